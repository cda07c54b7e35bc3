import json
import subprocess
import sys

import pytest
import yaml

from m2d.cli import main
from m2d.io import read_features, read_metrics

TINY = {
    "encoder": {"depth": 1, "dim": 16, "heads": 2, "patch_f": 16, "patch_t": 8, "input_frames": 32, "pred_depth": 1},
    "train": {"steps": 3, "batch_size": 4, "log_wall_time": False, "checkpoint_every": 2},
    "optimizer": {"lr": 1e-3},
    "data": {"synth": {"clips_per_class": 4, "duration_s": 0.4}},
    "probe": {"lr": 1e-2, "max_epochs": 5},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_pretrain_twice_gives_identical_metrics(tmp_path, config):
    for name in ("a", "b"):
        assert main(["pretrain", "--config", str(config), "--seed", "1", "--out", str(tmp_path / name)]) == 0
    a, b = (tmp_path / n / "metrics.jsonl" for n in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert len(read_metrics(a)) == 3


def test_resume_without_config_uses_snapshot(tmp_path, config):
    main(["pretrain", "--config", str(config), "--out", str(tmp_path / "full")])
    ckpt = tmp_path / "full" / "checkpoint_0000002.bin"
    assert main(["pretrain", "--resume", str(ckpt), "--out", str(tmp_path / "res")]) == 0
    full, res = read_metrics(tmp_path / "full" / "metrics.jsonl"), read_metrics(tmp_path / "res" / "metrics.jsonl")
    assert res == full[2:]


def test_unknown_subcommand_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "m2d.cli", "train"], capture_output=True, text=True)
    assert proc.returncode != 0
    assert "usage: m2d" in proc.stderr


def test_pretrain_x_without_offline_is_config_error(tmp_path, config, capsys, monkeypatch):
    import m2d.training as training
    monkeypatch.setattr(training, "load_clips", lambda cfg: pytest.fail("computed before config check"))
    assert main(["pretrain-x", "--config", str(config), "--out", str(tmp_path / "x")]) == 2
    assert "offline" in capsys.readouterr().err


def test_exit_codes_for_bad_inputs(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mask_ratio: 1.5\n")
    assert main(["pretrain", "--config", str(bad)]) == 2
    missing_wavs = tmp_path / "nowav.yaml"
    missing_wavs.write_text(yaml.safe_dump({**TINY, "data": {"wav_dir": str(tmp_path / "empty")}}))
    (tmp_path / "empty").mkdir()
    assert main(["pretrain", "--config", str(missing_wavs), "--out", str(tmp_path / "o")]) == 3
    assert main(["extract", "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path / "f.bin")]) == 3


def test_divergence_exit_code(tmp_path, config, monkeypatch):
    import m2d.training as training
    from m2d.errors import DivergenceError

    def boom(*a, **k):
        raise DivergenceError(0, float("nan"))
    monkeypatch.setattr(training, "train_step", boom)
    assert main(["pretrain", "--config", str(config), "--out", str(tmp_path / "d")]) == 4


def test_extract_and_probe(tmp_path, config, capsys):
    main(["pretrain", "--config", str(config), "--out", str(tmp_path / "run")])
    ckpt = str(tmp_path / "run" / "checkpoint.bin")
    assert main(["extract", "--checkpoint", ckpt, "--out", str(tmp_path / "f.bin")]) == 0
    feats, manifest = read_features(tmp_path / "f.bin")
    assert feats.shape == (16, 80) and len(manifest) == 16
    assert main(["probe", "--checkpoint", ckpt, "--baseline", "--out", str(tmp_path / "p")]) == 0
    records = [json.loads(x) for x in (tmp_path / "p" / "probe_results.jsonl").read_text().splitlines()]
    assert [list(r) for r in records] == [["encoder", "task", "seed", "accuracy"]] * 2
    assert "accuracy %" in capsys.readouterr().out


def test_compare_reports_mean_gap(tmp_path, config, capsys):
    assert main(["compare", "--config", str(config), "--seeds", "0", "1", "--out", str(tmp_path / "c")]) == 0
    out = capsys.readouterr().out
    assert "mean gap" in out and "spread" in out
    lines = (tmp_path / "c" / "compare_results.jsonl").read_text().splitlines()
    assert len(lines) == 4
