import json
import subprocess
import sys

import pytest

from exgalign.cli import main, sha256_tree

TINY_SYNTH = ["--n-pairs", "15", "--duration-sec", "10", "--window-sec", "2.5", "--n-subjects", "5",
              "--eeg-channels", "2", "--exg-channels", "1"]

TINY_ALIGN = """\
batch_sequences: 4
negatives_per_anchor: 8
d_seq: 8
window_sec: 2.5
max_steps: 2
encoder:
  d_patch: 8
  conv_channels: [4]
  transformer_layers: 1
  attention_heads: 2
  ff_multiplier: 2
  dropout: 0.0
"""


def test_synth_is_deterministic(tmp_path):
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "a"), *TINY_SYNTH]) == 0
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "b"), *TINY_SYNTH]) == 0
    for d in ("a", "b"):
        (tmp_path / d / "run.json").unlink()
    assert sha256_tree(tmp_path / "a") == sha256_tree(tmp_path / "b")


def test_unknown_flag(capsys):
    assert main(["synth", "--out", "x", "--bogus"]) == 1
    err = capsys.readouterr().err.strip()
    assert "--bogus" in err and "\n" not in err


def test_missing_file(tmp_path, capsys):
    code = main(["align", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "nope" in capsys.readouterr().err


def test_config_validation(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("correlation: 3.0\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    assert "correlation" in capsys.readouterr().err


def test_unknown_align_field(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), *TINY_SYNTH]) == 0
    cfg = tmp_path / "c.yaml"
    cfg.write_text("learning_rate: 1.0\n")
    assert main(["align", "--data", str(tmp_path / "d"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "align.yaml"
    cfg.write_text(TINY_ALIGN)
    probe_cfg = root / "probe.yaml"
    probe_cfg.write_text("epochs: 3\nn_classes: 3\n")
    data, run = root / "data", root / "run"
    assert main(["synth", "--out", str(data), *TINY_SYNTH]) == 0
    assert main(["align", "--data", str(data), "--config", str(cfg), "--out", str(run / "align")]) == 0
    ckpt = run / "align" / "checkpoint.json"
    assert main(["probe", "--checkpoint", str(ckpt), "--data", str(data), "--config", str(probe_cfg),
                 "--out", str(run / "probe")]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--head", str(run / "probe" / "head.json"),
                 "--data", str(data), "--out", str(run / "eval")]) == 0
    return root, data, run


def test_pipeline_outputs(pipeline):
    _, _, run = pipeline
    assert (run / "align" / "loss_trace.csv").read_text().count("\n") == 3
    report = json.loads((run / "eval" / "eval_report.json").read_text())
    assert report["split"] == "test" and 0 <= report["accuracy"] <= 1
    assert (run / "eval" / "predictions.csv").exists()


def test_run_record(pipeline):
    _, data, run = pipeline
    rec = json.loads((run / "align" / "run.json").read_text())
    assert rec["command"] == "align" and rec["seed"] == 0
    assert rec["config"]["align"]["max_steps"] == 2
    assert rec["inputs"]["data"]["sha256"] == sha256_tree(data)
    assert set(rec["outputs"]) >= {"checkpoint.json", "loss_trace.csv"}


def test_exg_only_probe_loads_no_eeg_encoder(pipeline, tmp_path):
    _, data, run = pipeline
    out = tmp_path / "exg"
    code = main(["probe", "--checkpoint", str(run / "align" / "checkpoint.json"), "--data", str(data),
                 "--mode", "exg_only", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "probe_report.json").read_text())
    assert report["eeg_encoder_loaded"] is False and report["eeg_encoder_calls"] == 0


def test_simmatrix(pipeline, tmp_path):
    _, data, run = pipeline
    code = main(["simmatrix", "--checkpoint", str(run / "align" / "checkpoint.json"), "--data", str(data),
                 "--pair-a", "p00000", "--pair-b", "p00001", "--out", str(tmp_path)])
    assert code == 0
    names = sorted(p.name for p in tmp_path.glob("sim_*.csv"))
    assert names == ["sim_eeg_a_exg_a.csv", "sim_eeg_a_exg_b.csv", "sim_eeg_b_exg_a.csv", "sim_eeg_b_exg_b.csv"]
    assert main(["simmatrix", "--checkpoint", str(run / "align" / "checkpoint.json"), "--data", str(data),
                 "--pair-a", "p00000", "--pair-b", "zzz", "--out", str(tmp_path)]) == 1


def test_help_via_module():
    out = subprocess.run([sys.executable, "-m", "exgalign", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("synth", "align", "probe", "eval", "simmatrix"):
        assert sub in out.stdout
