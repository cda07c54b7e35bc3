"""Command-line entry point: ``m2d {pretrain,pretrain-x,extract,probe,compare}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import read_checkpoint
from .config import RunConfig, config_from_dict, load_config
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, M2DError
from .io import write_features
from . import training

log = logging.getLogger("m2d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="m2d", description="M2D / M2D-X audio pre-training, feature extraction and linear probing")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, out_default):
        p.add_argument("--config", help="YAML run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    for name, help_ in (("pretrain", "M2D pre-training"), ("pretrain-x", "M2D-X pre-training (needs 'offline')")):
        p = sub.add_parser(name, help=help_)
        common(p, f"runs/{name}")
        p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("extract", help="write per-clip or per-frame features of a checkpoint")
    common(p, "features.bin")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("clip", "frame"), default="clip")

    p = sub.add_parser("probe", help="linear-probe one or more checkpoints")
    common(p, "runs/probe")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--baseline", action="store_true", help="also probe the untrained initial weights")

    p = sub.add_parser("compare", help="pre-train per seed and probe against the untrained initial weights")
    common(p, "runs/compare")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: the config seed)")
    return ap


def _config(args, fallback: dict | None = None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = config_from_dict(fallback or {})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _print_step(report):
    log.info("step %d loss_m2d %.6f loss_off %.6f tau %.6f", report.step, report.loss_m2d, report.loss_off,
             report.tau_used)


def cmd_pretrain(args, offline: bool) -> int:
    if args.resume and not args.config:
        snapshot = read_checkpoint(args.resume).meta.get("config")
        if snapshot is None:
            raise CheckpointError("checkpoint has no config snapshot")
        cfg = _config(args, snapshot)
    else:
        cfg = _config(args)
    if offline and cfg.offline is None:
        raise ConfigError("offline: pretrain-x needs an 'offline' section in the config")
    result = training.pretrain(cfg, args.out, offline=offline, resume=args.resume, on_step=_print_step)
    last = result.reports[-1] if result.reports else None
    print(f"finished {result.total_steps} steps; checkpoint {result.checkpoint}; metrics {result.metrics}")
    if last is not None:
        print(f"final loss_m2d {last.loss_m2d:.6f} loss_total {last.loss_total:.6f}")
    return EXIT_OK


def _snapshot_config(args, ckpt_path) -> RunConfig:
    return _config(args, read_checkpoint(ckpt_path).meta.get("config"))


def cmd_extract(args) -> int:
    cfg = _snapshot_config(args, args.checkpoint)
    clips = training.load_clips(cfg)
    array, manifest = training.extract(args.checkpoint, clips, args.mode)
    write_features(args.out, array, manifest)
    print(f"wrote {array.shape} features for {len(manifest)} clips to {args.out}")
    return EXIT_OK


def _table(rows, header):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join(fmt.format(*map(str, r)) for r in [header] + rows)


def _write_records(path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def cmd_probe(args) -> int:
    cfg = _snapshot_config(args, args.checkpoint[0])
    clips = training.load_clips(cfg)
    records = []
    for path in args.checkpoint:
        ckpt = read_checkpoint(path)
        encoder = training.load_online(ckpt)
        stats = training.checkpoint_stats(ckpt)
        res = training.probe_encoder(encoder, clips, stats, cfg, cfg.seed)
        records.append({"encoder": str(path), "task": clips.name, "seed": cfg.seed, "accuracy": res.accuracy})
        if args.baseline:
            snap = config_from_dict(ckpt.meta["config"])
            base = training.probe_encoder(training.build_online(snap), clips, stats, cfg, cfg.seed)
            records.append({"encoder": f"random_init(seed={snap.seed})", "task": clips.name, "seed": cfg.seed,
                            "accuracy": base.accuracy})
    out = Path(args.out) / "probe_results.jsonl"
    _write_records(out, records)
    rows = [(r["encoder"], r["task"], r["seed"], f"{100 * r['accuracy']:.2f}") for r in records]
    print(_table(rows, ("encoder", "task", "seed", "accuracy %")))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    seeds = args.seeds or [cfg.seed]
    out = Path(args.out)
    records, rows, gaps = [], [], []
    for seed in seeds:
        result, cmp = training.compare_seed(cfg, out / f"seed_{seed}", seed, on_step=_print_step)
        task = result.clips.name
        for name, res in (("pretrained", cmp.pretrained), ("random_init", cmp.random_init)):
            records.append({"encoder": name, "task": task, "seed": seed, "accuracy": res.accuracy})
        first, last = result.reports[0].loss_m2d, result.reports[-1].loss_m2d
        rows.append((seed, f"{100 * cmp.pretrained.accuracy:.2f}", f"{100 * cmp.random_init.accuracy:.2f}",
                     f"{100 * cmp.gap:+.2f}", f"{first:.4f} -> {last:.4f}"))
        gaps.append(cmp.gap)
    _write_records(out / "compare_results.jsonl", records)
    mean = sum(gaps) / len(gaps)
    spread = (sum((g - mean) ** 2 for g in gaps) / len(gaps)) ** 0.5
    print(_table(rows, ("seed", "pretrained %", "random-init %", "gap", "loss_m2d first -> last")))
    print(f"mean gap {100 * mean:+.2f} points (spread {100 * spread:.2f}) over {len(gaps)} seed(s)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("pretrain", "pretrain-x"):
            return cmd_pretrain(args, offline=args.command == "pretrain-x")
        if args.command == "extract":
            return cmd_extract(args)
        if args.command == "probe":
            return cmd_probe(args)
        return cmd_compare(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, M2DError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
