"""On-disk dataset format ``bx-dataset/1``.

A dataset directory holds ``manifest.json`` and a ``signals/`` folder. Each
recording is one raw file of little-endian float32 samples, channel-major
(all of channel 0, then channel 1, ...). The manifest is canonical JSON
(sorted keys, fixed indentation) so save -> load -> save is byte-stable.

Manifest schema::

    {
      "format": "bx-dataset/1",
      "pairs": [
        {
          "pair_id": str, "label": int | null, "meta": {...},
          "eeg": <recording>, "exg": <recording>
        }, ...
      ]
    }

    <recording> = {
      "subject_id": str, "modality": "EEG" | "EOG" | "ECG" | "EMG",
      "rate_hz": float, "n_channels": int, "channel_names": [str],
      "n_samples": int, "path": "signals/<file>", "dtype": "float32",
      "byte_order": "little"
    }
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .sigcore import LabeledPair, Modality, Recording

FORMAT = "bx-dataset/1"
MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


class UnsupportedVersionError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


class UnknownModalityError(DatasetError):
    pass


def _canonical(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _write_recording(rec: Recording, root: Path, name: str) -> dict:
    rel = f"signals/{name}.f32"
    path = root / rel
    try:
        path.write_bytes(np.ascontiguousarray(rec.data, dtype="<f4").tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write signal file {path}: {exc}") from exc
    return {
        "subject_id": rec.subject_id,
        "modality": rec.modality.value,
        "rate_hz": float(rec.rate_hz),
        "n_channels": rec.n_channels,
        "channel_names": list(rec.channel_names),
        "n_samples": rec.n_samples,
        "path": rel,
        "dtype": "float32",
        "byte_order": "little",
    }


def save_dataset(pairs, directory) -> Path:
    root = Path(directory)
    try:
        (root / "signals").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    entries = []
    seen = set()
    for i, pair in enumerate(pairs):
        pid = pair.pair_id or f"pair{i:05d}"
        if pid in seen:
            raise DatasetError(f"duplicate pair_id {pid!r}")
        seen.add(pid)
        entries.append({
            "pair_id": pid,
            "label": None if pair.label is None else int(pair.label),
            "meta": pair.meta,
            "eeg": _write_recording(pair.eeg, root, f"{pid}_eeg"),
            "exg": _write_recording(pair.exg, root, f"{pid}_exg"),
        })
    manifest = root / MANIFEST
    manifest.write_text(_canonical({"format": FORMAT, "pairs": entries}))
    return manifest


def _read_recording(entry: dict, root: Path) -> Recording:
    try:
        modality = Modality(entry["modality"])
    except ValueError:
        raise UnknownModalityError(f"unknown modality tag {entry['modality']!r}") from None
    if entry.get("dtype", "float32") != "float32" or entry.get("byte_order", "little") != "little":
        raise DatasetError(f"unsupported sample encoding {entry.get('dtype')}/{entry.get('byte_order')}")
    path = root / entry["path"]
    c, n = int(entry["n_channels"]), int(entry["n_samples"])
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read signal file {path}: {exc}") from exc
    if len(raw) != 4 * c * n:
        raise SizeMismatchError(
            f"size mismatch in {path}: {len(raw)} bytes, expected {4 * c * n} for {c} x {n} float32"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(c, n).astype(np.float64)
    if not np.isfinite(data).all():
        raise DatasetError(f"non-finite samples in {path}")
    return Recording(modality, float(entry["rate_hz"]), data, entry["subject_id"], list(entry["channel_names"]))


def load_dataset(manifest) -> list[LabeledPair]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST
    doc = json.loads(manifest.read_text())
    if doc.get("format") != FORMAT:
        raise UnsupportedVersionError(f"unsupported version {doc.get('format')!r} in {manifest}; expected {FORMAT}")
    root = manifest.parent
    pairs = []
    for entry in doc["pairs"]:
        eeg = _read_recording(entry["eeg"], root)
        exg = _read_recording(entry["exg"], root)
        try:
            pairs.append(LabeledPair(eeg, exg, entry.get("label"), entry["pair_id"], entry.get("meta") or {}))
        except ValueError as exc:
            raise DatasetError(f"{manifest}: {exc}") from exc
    return pairs
