"""Command line: train, fuse, dump-states, eval, bench-sds.

Exit status: 0 success, 1 partial failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from contifuse import bench
from contifuse.config import load_run_config
from contifuse.data import (
    DatasetError,
    PairRecord,
    discover_dataset,
    load_pair,
    recompose_color,
    save_image,
)
from contifuse.metrics import METRICS, evaluate_directory
from contifuse.model import CheckpointError, ConfigError, fuse_array, load_checkpoint, state_images
from contifuse.train import TrainingDiverged, train_loop

log = logging.getLogger("contifuse")

OK, PARTIAL, CONFIG_ERROR = 0, 1, 2


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    overrides = _parse_set(args.set)
    for flag, key in [
        ("epochs", "train.epochs"),
        ("batch_size", "train.batch_size"),
        ("loss_mode", "train.loss_mode"),
        ("decay", "train.decay"),
        ("seed", "train.seed"),
        ("data", "data.root"),
        ("out", "output.dir"),
    ]:
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    cfg = load_run_config(args.config, overrides)
    if not cfg.data_root:
        raise ConfigError("invalid configuration:\n  data.root is required")
    out = Path(cfg.out_dir)
    cfg.dump(out / "effective_config.yaml")
    dataset = discover_dataset(cfg.data_root)
    log.info("training on %d pairs from %s", len(dataset), cfg.data_root)
    result = train_loop(
        dataset, cfg.train, cfg.model, cfg.aug, out_dir=out, resume=args.resume, max_steps=args.max_steps
    )
    for path in result.checkpoints:
        print(path)
    return OK


def _fuse_one(model, pair, out_path: Path, grayscale: bool) -> None:
    fused = fuse_array(model, pair.ir, pair.vis)
    if grayscale or pair.cb is None:
        save_image(out_path, fused)
    else:
        save_image(out_path, recompose_color(fused, pair.cb, pair.cr))


def _pairs_from_args(args) -> list[PairRecord]:
    if args.data:
        return discover_dataset(args.data)
    if not (args.ir and args.vis) or len(args.ir) != len(args.vis):
        raise ConfigError("give --data ROOT, or matching lists of --ir and --vis files")
    return [PairRecord(Path(i).stem, Path(i), Path(v)) for i, v in zip(args.ir, args.vis)]


def cmd_fuse(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    failures = 0
    for rec in _pairs_from_args(args):
        try:
            pair = load_pair(rec)
            name = rec.vis_path.with_suffix(".png").name
            _fuse_one(model, pair, out / name, args.grayscale)
            log.info("fused %s -> %s", rec.id, out / name)
        except (DatasetError, OSError, ValueError) as exc:
            failures += 1
            log.error("failed on %s: %s", rec.id, exc)
    return PARTIAL if failures else OK


def cmd_dump_states(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    n = model.config.num_layers
    if not 1 <= args.layer <= n:
        raise ConfigError(f"layer must be in 1..{n}, got {args.layer}")
    pair = load_pair(PairRecord(Path(args.ir).stem, Path(args.ir), Path(args.vis)))
    dtype = next(model.parameters()).dtype
    to = lambda a: torch.as_tensor(a, dtype=dtype)[None, None]
    model.eval()
    with torch.no_grad():
        stack = model(to(pair.ir), to(pair.vis)).stacks[args.layer - 1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(state_images(stack)):
        path = out / f"{pair.id}_layer{args.layer}_state{i:02d}.png"
        save_image(path, img.astype(np.float64) / 255.0)
        print(path)
    return OK


def cmd_eval(args) -> int:
    names = None
    if args.metrics:
        lookup = {m.lower(): m for m in METRICS}
        requested = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
        bad = [m for m in requested if m not in lookup]
        if bad:
            raise ConfigError(f"unknown metrics {bad}; choose from {list(METRICS)}")
        names = [lookup[m] for m in requested]
    try:
        report = evaluate_directory(args.fused, args.ir, args.vis, names)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return PARTIAL
    print(report.table())
    if args.report:
        report.write_csv(args.report)
    return PARTIAL if report.skipped else OK


def cmd_bench_sds(args) -> int:
    ks = [int(k) for k in args.k.split(",")]
    rows = bench.benchmark_sds(ks, trials=args.trials, num_layers=args.layers, size=args.size, seed=args.seed)
    print(bench.format_rows(rows))
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contifuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="YAML file of flat dotted keys")
    t.add_argument("--data", help="dataset root with ir/ and vi/ (or a manifest CSV)")
    t.add_argument("--out", help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--loss-mode", choices=["sds", "full", "none"])
    t.add_argument("--decay", choices=["gaussian", "linear"])
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, help="stop after this many steps")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse image pairs with a checkpoint")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--ir", nargs="+")
    f.add_argument("--vis", nargs="+")
    f.add_argument("--data", help="dataset root with ir/ and vi/")
    f.add_argument("--out", required=True)
    f.add_argument("--grayscale", action="store_true", help="write the fused luma only")
    f.set_defaults(func=cmd_fuse)

    d = sub.add_parser("dump-states", help="write the K+2 state images of one layer")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--ir", required=True)
    d.add_argument("--vis", required=True)
    d.add_argument("--layer", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_states)

    e = sub.add_parser("eval", help="score fused images against their sources")
    e.add_argument("--fused", required=True)
    e.add_argument("--ir", required=True)
    e.add_argument("--vis", required=True)
    e.add_argument("--report", help="CSV report path")
    e.add_argument("--metrics", help="comma-separated subset of " + ",".join(METRICS))
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-sds", help="cost of full vs sampled decomposition loss")
    b.add_argument("--k", default="5,7,9,11,15", help="comma-separated K values")
    b.add_argument("--trials", type=int, default=3)
    b.add_argument("--layers", type=int, default=3)
    b.add_argument("--size", type=int, default=48)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_sds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except (DatasetError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return PARTIAL


if __name__ == "__main__":
    sys.exit(main())
