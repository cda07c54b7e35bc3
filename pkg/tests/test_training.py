import numpy as np
import pytest

from m2d.checkpoint import read_checkpoint
from m2d.config import config_from_dict
from m2d.errors import ConfigError, DataError
from m2d.io import read_metrics, write_labels
from m2d.training import (EpochSampler, extract, load_clips, peak_lr, pretrain, random_crop, total_steps)

TINY = {
    "seed": 3,
    "encoder": {"depth": 1, "dim": 16, "heads": 2, "patch_f": 16, "patch_t": 8, "input_frames": 32, "pred_depth": 1},
    "train": {"steps": 4, "batch_size": 4, "log_wall_time": False, "checkpoint_every": 2},
    "optimizer": {"lr": 1e-3},
    "data": {"synth": {"clips_per_class": 2, "duration_s": 0.4}, "synth_bg_clips": 3},
}


def tiny(**over):
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for k, v in over.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) and k in raw else v
    return config_from_dict(raw)


def test_sampler_replicates_evenly_and_is_deterministic():
    s = EpochSampler(5, 20, 4, seed=0)
    assert s.steps_per_epoch == 5
    epoch0 = np.concatenate([s.indices(k) for k in range(5)])
    assert np.bincount(epoch0).tolist() == [4] * 5
    assert np.array_equal(EpochSampler(5, 20, 4, seed=0).indices(7), s.indices(7))
    assert not np.array_equal(s.order(0), s.order(1))
    with pytest.raises(DataError):
        EpochSampler(0, 4, 2, 0)
    with pytest.raises(ConfigError):
        EpochSampler(3, 2, 4, 0)


def test_step_and_lr_bookkeeping():
    cfg = config_from_dict({"train": {"epochs": 2, "batch_size": 8, "grad_accum_steps": 2}})
    assert total_steps(cfg, 100) == 2 * (100 // 16)
    assert peak_lr(cfg) == pytest.approx(3e-4 * 16 / 256)
    cfg = config_from_dict({"train": {"epochs": 3, "virtual_epoch_samples": 64, "batch_size": 32}})
    assert total_steps(cfg, 10) == 6


def test_random_crop_and_pad():
    spec = np.arange(20.0).reshape(2, 10)
    out = random_crop(spec, 4, np.random.default_rng(0), -1.0)
    assert out.shape == (2, 4) and out[0, 1] - out[0, 0] == 1
    padded = random_crop(spec, 12, np.random.default_rng(0), -1.0)
    assert np.all(padded[:, 10:] == -1.0) and np.array_equal(padded[:, :10], spec)


def test_pretrain_is_deterministic(tmp_path):
    cfg = tiny()
    a = pretrain(cfg, tmp_path / "a")
    b = pretrain(cfg, tmp_path / "b")
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    records = read_metrics(a.metrics)
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert all(r["seconds"] == 0.0 and r["loss_off"] == 0.0 for r in records)
    assert (tmp_path / "a" / "checkpoint_0000002.bin").exists()


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny()
    full = pretrain(cfg, tmp_path / "full")
    resumed = pretrain(cfg, tmp_path / "resumed", resume=tmp_path / "full" / "checkpoint_0000002.bin")
    assert [r.step for r in resumed.reports] == [2, 3]
    for a, b in zip(full.reports[2:], resumed.reports):
        assert abs(a.loss_m2d - b.loss_m2d) <= 1e-6 and a.tau_used == b.tau_used
    with pytest.raises(ConfigError):
        pretrain(tiny(seed=4), tmp_path / "x", resume=full.checkpoint)
    with pytest.raises(ConfigError):
        pretrain(cfg, tmp_path / "y", offline=True)


@pytest.fixture(scope="module")
def base_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    return pretrain(tiny(), out).checkpoint


@pytest.mark.parametrize("scenario", ["supervised", "distill", "regularize"])
def test_pretrain_x_scenarios(tmp_path, base_checkpoint, scenario):
    offline = {"scenario": scenario, "lambda_off": 0.5, "eta": 0.3}
    if scenario == "supervised":
        offline["n_classes"] = 4
    elif scenario == "distill":
        offline["teacher"] = {"random_init": True}
    else:
        offline["teacher"] = {"checkpoint": str(base_checkpoint)}
    cfg = tiny(offline=offline)
    res = pretrain(cfg, tmp_path, offline=True)
    for r in res.reports:
        assert np.isfinite(r.loss_total) and r.loss_off > 0
        assert r.loss_total == pytest.approx(r.loss_m2d + 0.5 * r.loss_off, rel=1e-6)
    assert read_checkpoint(res.checkpoint).meta["extra"]["offline"] is True


def test_extract_modes(tmp_path, base_checkpoint):
    clips = load_clips(tiny())
    feats, manifest = extract(base_checkpoint, clips, "clip")
    assert feats.shape == (8, 5 * 16) and manifest[1] == ("synth_00001", 1, 1)
    frames, manifest = extract(base_checkpoint, clips, "frame")
    assert frames.shape[1] == 5 * 16
    assert sum(n for _, _, n in manifest) == len(frames)
    assert manifest[1][1] == manifest[0][2]
    with pytest.raises(ConfigError):
        extract(base_checkpoint, clips, "patch")


def test_label_file_overrides_and_missing_labels(tmp_path):
    cfg = tiny()
    clips = load_clips(cfg)
    path = tmp_path / "labels.tsv"
    write_labels(path, {cid: [0, 1] for cid in clips.ids})
    relabelled = load_clips(tiny(data={"labels": str(path)}))
    assert relabelled.labels[0] == [0, 1]
    with pytest.raises(DataError):
        relabelled.single_labels()
    write_labels(path, {clips.ids[0]: [0]})
    with pytest.raises(DataError):
        load_clips(tiny(data={"labels": str(path)}))
