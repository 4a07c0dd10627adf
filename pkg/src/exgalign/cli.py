"""Command-line entry point: synth -> align -> probe -> eval, plus simmatrix.

Every run writes ``run.json`` into its ``--out`` directory: the argv, the
full resolved config, the seed, and SHA-256 hashes of inputs and outputs.

Exit codes: 0 success, 1 validation error (bad flag, missing file, bad
config), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__, checkpoint, dataio
from .align import (
    AlignConfig,
    AlignmentError,
    build_model,
    load_alignment,
    prepare_pairs,
    save_alignment,
    similarity_matrix,
    train_align,
    write_trace,
)
from .downstream import (
    ProbeConfig,
    ProbeMode,
    classify,
    load_head,
    save_head,
    split_pairs,
    split_subject_independent,
    train_probe,
    write_predictions,
)
from .encoder import EncoderConfig
from .synthdata import SynthConfig, generate

log = logging.getLogger("exgalign")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# helpers --------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root: Path) -> str:
    """Hash of relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "run.json"):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(sha256_file(path).encode())
    return h.hexdigest()


def _hash(path: Path) -> str:
    return sha256_tree(path) if path.is_dir() else sha256_file(path)


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{p}: config must be a mapping of field names to values")
    return doc


def write_record(out: Path, command: str, argv: list[str], config: dict, seed, inputs: dict, outputs: list[Path]):
    record = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": _hash(Path(v))} for k, v in inputs.items()},
        "outputs": {p.name: sha256_file(p) for p in outputs},
        "versions": {
            "exgalign": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def set_deterministic(on: bool) -> None:
    if on:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(pairs, how: str, seed: int):
    if how == "subject":
        return split_subject_independent(pairs, (3, 1, 1), seed)
    if how == "pair":
        return split_pairs(pairs, (3, 1, 1), seed)
    raise ValidationError(f"unknown split mode {how!r}; use 'subject' or 'pair'")


# subcommands ----------------------------------------------------------------

_SYNTH_FLAGS = {
    "n_pairs": int, "n_classes": int, "eeg_channels": int, "exg_channels": int,
    "rate_eeg_hz": float, "rate_exg_hz": float, "duration_sec": float, "correlation": float,
    "noise_sigma": float, "seed": int, "window_sec": float, "n_subjects": int, "exg_modality": str,
}


def cmd_synth(args, argv) -> None:
    fields_ = read_config(args.config)
    for name in _SYNTH_FLAGS:
        value = getattr(args, name)
        if value is not None:
            fields_[name] = value
    try:
        cfg = SynthConfig.from_dict(fields_)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid synth config: {exc}") from exc
    out = _out_dir(args.out)
    manifest = dataio.save_dataset(generate(cfg), out)
    log.info("wrote %d pairs to %s", cfg.n_pairs, manifest)
    write_record(out, "synth", argv, cfg.to_dict(), cfg.seed, {}, [manifest])


def _align_config(doc: dict, args) -> tuple[AlignConfig, EncoderConfig, EncoderConfig]:
    doc = dict(doc)
    enc = doc.pop("encoder", None) or {}
    eeg_enc = doc.pop("eeg_encoder", None)
    for name in ("seed", "epochs", "max_steps"):
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    try:
        cfg = AlignConfig.from_dict(doc)
        enc_cfg = EncoderConfig(**enc)
        eeg_cfg = EncoderConfig(**eeg_enc) if eeg_enc is not None else enc_cfg
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid align config: {exc}") from exc
    return cfg, enc_cfg, eeg_cfg


def cmd_align(args, argv) -> None:
    cfg, enc_cfg, eeg_cfg = _align_config(read_config(args.config), args)
    pairs = dataio.load_dataset(args.data)
    data = prepare_pairs(pairs, cfg)
    if len(data) < cfg.batch_sequences:
        raise ValidationError(f"dataset has {len(data)} pairs, fewer than batch_sequences={cfg.batch_sequences}")
    model = build_model(data.eeg.shape[2], data.exg.shape[2], data.n_patches, cfg, enc_cfg, eeg_cfg)
    result = train_align(
        data, model, cfg,
        on_step=lambda r: log.info("epoch %d step %d total %.4f", r["epoch"], r["step"], r["total"]),
    )
    out = _out_dir(args.out)
    ckpt = save_alignment(out / "checkpoint.json", model, cfg, result.rng, {"steps": result.steps})
    trace = write_trace(out / "loss_trace.csv", result.trace)
    config = {"align": cfg.to_dict(), "encoder": enc_cfg.to_dict(), "eeg_encoder": eeg_cfg.to_dict()}
    write_record(out, "align", argv, config, cfg.seed, {"data": args.data}, [ckpt, trace])


def cmd_probe(args, argv) -> None:
    mode = ProbeMode(args.mode)
    doc = read_config(args.config)
    split_how = doc.pop("split", "subject")
    split_seed = int(doc.pop("split_seed", 0))
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        pcfg = ProbeConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid probe config: {exc}") from exc

    model, acfg, _ = load_alignment(args.checkpoint, with_eeg=mode.uses_eeg)
    pairs = dataio.load_dataset(args.data)
    train, val, _test = _split(pairs, split_how, split_seed)
    if not train or not val:
        raise ValidationError("train or validation split is empty")
    result = train_probe(prepare_pairs(train, acfg), prepare_pairs(val, acfg), model, mode, pcfg)
    _, _, report = classify(val, model, result.head, mode, acfg)

    out = _out_dir(args.out)
    head_path = save_head(out / "head.json", result.head, mode, {
        "probe_config": pcfg.to_dict(), "split": split_how, "split_seed": split_seed,
        "best_epoch": result.best_epoch,
    })
    outputs = [head_path]
    if mode is ProbeMode.FINETUNE:
        outputs.append(save_alignment(out / "finetuned_checkpoint.json", model, acfg))
    eeg_calls = model.eeg_encoder.n_calls if model.eeg_encoder is not None else 0
    val_doc = {**report.to_dict(), "split": "val", "mode": mode.value,
               "eeg_encoder_loaded": model.eeg_encoder is not None, "eeg_encoder_calls": eeg_calls}
    report_path = out / "probe_report.json"
    report_path.write_text(json.dumps(val_doc, indent=1, sort_keys=True) + "\n")
    outputs.append(report_path)
    config = {"probe": pcfg.to_dict(), "mode": mode.value, "split": split_how, "split_seed": split_seed}
    write_record(out, "probe", argv, config, pcfg.seed,
                 {"checkpoint": args.checkpoint, "data": args.data}, outputs)


def cmd_eval(args, argv) -> None:
    head, mode, meta = load_head(args.head)
    model, acfg, _ = load_alignment(args.checkpoint, with_eeg=mode.uses_eeg)
    pairs = dataio.load_dataset(args.data)
    split_how = args.split or meta.get("split", "subject")
    _, _, test = _split(pairs, split_how, int(meta.get("split_seed", 0)))
    if not test:
        raise ValidationError("test split is empty")
    data = prepare_pairs(test, acfg)
    pred, scores, report = classify(data, model, head, mode)
    out = _out_dir(args.out)
    eeg_calls = model.eeg_encoder.n_calls if model.eeg_encoder is not None else 0
    report_path = out / "eval_report.json"
    report_path.write_text(json.dumps({**report.to_dict(), "split": "test", "mode": mode.value,
                                       "eeg_encoder_calls": eeg_calls}, indent=1, sort_keys=True) + "\n")
    preds = write_predictions(out / "predictions.csv", data.pair_ids, data.labels, pred, scores)
    write_record(out, "eval", argv, {"mode": mode.value, "split": split_how}, None,
                 {"checkpoint": args.checkpoint, "head": args.head, "data": args.data}, [report_path, preds])


def cmd_simmatrix(args, argv) -> None:
    model, acfg, _ = load_alignment(args.checkpoint)
    pairs = {p.pair_id: p for p in dataio.load_dataset(args.data)}
    for pid in (args.pair_a, args.pair_b):
        if pid not in pairs:
            raise ValidationError(f"pair id {pid!r} not found in {args.data}")
    sim = similarity_matrix(pairs[args.pair_a], pairs[args.pair_b], model, acfg)
    out = _out_dir(args.out)
    names = {"a": args.pair_a, "b": args.pair_b}
    outputs = []
    for r in "ab":
        for c in "ab":
            path = out / f"sim_eeg_{r}_exg_{c}.csv"
            np.savetxt(path, sim.blocks[(names[r], names[c])], delimiter=",", fmt="%.10f")
            outputs.append(path)
    summary = out / "simmatrix.json"
    summary.write_text(json.dumps({"pair_a": args.pair_a, "pair_b": args.pair_b,
                                   "rows": "EEG patches", "cols": "EXG patches",
                                   "within_minus_cross": sim.within_minus_cross()}, indent=1) + "\n")
    outputs.append(summary)
    write_record(out, "simmatrix", argv, {"pair_a": args.pair_a, "pair_b": args.pair_b}, None,
                 {"checkpoint": args.checkpoint, "data": args.data}, outputs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="exgalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                        help="allow nondeterministic kernels and multithreading")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--config", help="YAML/JSON file with SynthConfig fields")
    for name, typ in _SYNTH_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="two-level EEG/EXG alignment training")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--config", help="YAML/JSON file with AlignConfig fields (+ 'encoder', 'eeg_encoder')")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("probe", help="train a downstream fusion head on an aligned model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[m.value for m in ProbeMode], default="linear_probe")
    p.add_argument("--config", help="YAML/JSON with ProbeConfig fields (+ 'split', 'split_seed')")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="evaluate a trained head on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["subject", "pair"], help="override the split mode stored in the head")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simmatrix", help="patch similarity blocks for two pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair-a", required=True)
    p.add_argument("--pair-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simmatrix)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_deterministic(args.deterministic)
    try:
        args.func(args, argv)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, dataio.DatasetError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AlignmentError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
