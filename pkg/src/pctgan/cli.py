"""Command-line entry points.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
``PCTGAN_THREADS`` caps BLAS threads and ablation workers.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import containers, data
from .evaluation import REPORT_HEADER, NumericalError, evaluate_model, format_report_row
from .forging import ForgingParams
from .labels import make_timing_label
from .training import NonFiniteLossError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
_TIMING = re.compile(r"^\s*(\d+)\s*:\s*(\d+)\s*/\s*(\d+)\s*$")


class UsageError(Exception):
    pass


def _threads() -> int | None:
    raw = os.environ.get("PCTGAN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PCTGAN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"PCTGAN_THREADS must be a positive integer, got {raw!r}")
    return n


def parse_timings(text: str, N: int = 3):
    labels = []
    for item in text.split(","):
        m = _TIMING.match(item)
        if not m:
            raise UsageError(f"malformed timing {item!r}; expected n:s/S")
        n, s, S = (int(g) for g in m.groups())
        try:
            labels.append(make_timing_label(n, s, S, N))
        except ValueError as exc:
            raise UsageError(f"timing {item.strip()!r}: {exc}") from None
    return labels


def _load_config(path: str | None, overrides: dict) -> TrainConfig:
    base = TrainConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {p} not found")
        base = TrainConfig.from_text(p.read_text(encoding="utf-8"))
    return base.updated({k: v for k, v in overrides.items() if v is not None})


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    for name in ("train_processes", "val_processes", "test_processes"):
        if getattr(args, name) < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 0")
    if args.train_processes < 1:
        raise UsageError("--train-processes must be >= 1")
    if args.image_size < 1 or 64 % args.image_size:
        raise UsageError("--image-size must divide 64")
    params = ForgingParams(orientation=args.orientation)
    splits, stats = data.make_splits(args.seed, {"train": args.train_processes, "val": args.val_processes,
                                                 "test": args.test_processes}, args.image_size, params)
    path = data.write_dataset(args.out, splits, stats)
    print(f"wrote {sum(len(v) for v in splits.values())} processes and {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    info = data.read_manifest(args.data)
    cfg = _load_config(args.config, {"cond_mode": args.cond, "nd": args.nd, "seed": args.seed,
                                     "iterations": args.iterations, "image_size": info["image_size"]})
    train_seqs = data.load_split(args.data, "train")
    val = data.load_split(args.data, "val") or None
    if not train_seqs:
        raise UsageError(f"{args.data}: no training processes in manifest")
    report = (lambda row: print("\t".join(str(row[k]) for k in row), flush=True)) if args.verbose else None
    res = train(cfg, train_seqs, args.out, val=val, progress=report)
    print(f"trained {cfg.iterations} iterations; checkpoints in {args.out}")
    if np.isfinite(res.best_frechet):
        print(f"best validation score {res.best_frechet:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .checkpoint import load_model
    from .models import predict_frame

    model, cfg = load_model(args.ckpt)
    labels = parse_timings(args.timings, cfg.N)
    size = cfg.image_size
    begin = containers.read_png(args.begin, size)
    end = containers.read_png(args.end, size)
    t_begin = make_timing_label(1, 0, 1, cfg.N)
    t_end = make_timing_label(cfg.N, 1, 1, cfg.N)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(labels):
        frame = predict_frame(model, begin, end, t_begin, t_end, t)
        containers.write_png(out / f"frame_{i:03d}_{t.n}_{t.s}of{t.S}.png", frame[0])
    print(f"wrote {len(labels)} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    seqs = data.load_split(args.real, args.split)
    if not seqs:
        raise UsageError(f"{args.real}: split {args.split!r} is empty")
    if args.against_real:
        score, mode, nd = evaluate_model(None, seqs), "real", 0
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --against-real is given")
        from .checkpoint import load_model

        model, cfg = load_model(args.ckpt)
        if seqs[0]["frames"].shape[-1] != cfg.image_size:
            raise UsageError(f"checkpoint expects {cfg.image_size}px images, data has "
                             f"{seqs[0]['frames'].shape[-1]}px")
        score, mode, nd = evaluate_model(model, seqs), cfg.cond_mode, cfg.nd
    text = REPORT_HEADER + "\n" + format_report_row(args.split, mode, nd, score) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _ablation_run(job: tuple) -> str:
    data_dir, out_dir, cfg_text, split = job
    cfg = TrainConfig.from_text(cfg_text)
    seqs = data.load_split(data_dir, "train")
    val = data.load_split(data_dir, "val") or None
    res = train(cfg, seqs, out_dir, val=val)
    test = data.load_split(data_dir, split)
    score = evaluate_model(res.state.model, test)
    return format_report_row(split, cfg.cond_mode, cfg.nd, score)


def cmd_ablation(args) -> int:
    info = data.read_manifest(args.data)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    try:
        nds = [int(v) for v in args.nd.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--nd must be a comma separated list of integers, got {args.nd!r}") from None
    base = _load_config(args.config, {"seed": args.seed, "iterations": args.iterations,
                                      "image_size": info["image_size"]})
    jobs = []
    for mode in modes:
        for nd in nds:
            cfg = base.updated({"cond_mode": mode, "nd": nd})
            jobs.append((args.data, str(Path(args.out) / f"{mode}_nd{nd}"), cfg.to_text(), args.split))
    workers = _threads() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablation_run, jobs))
    else:
        rows = [_ablation_run(j) for j in jobs]
    Path(args.out).mkdir(parents=True, exist_ok=True)
    text = REPORT_HEADER + "\n" + "\n".join(rows) + "\n"
    (Path(args.out) / "report.tsv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pctgan", description="Forging-sequence GAN toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic forging dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train-processes", type=int, default=12)
    g.add_argument("--val-processes", type=int, default=1)
    g.add_argument("--test-processes", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--orientation", choices=("continuous", "literal"), default="continuous")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--cond", choices=("none", "concat", "projection"))
    t.add_argument("--nd", type=int)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="predict shape frames between two images")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--begin", required=True)
    r.add_argument("--end", required=True)
    r.add_argument("--timings", required=True, help='comma separated "n:s/S" entries')
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a checkpoint on held-out processes")
    e.add_argument("--real", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=data.SPLITS, default="test")
    e.add_argument("--against-real", action="store_true", help="score the real data against itself")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="train and score every conditioning mode and channel count")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--modes", default="none,concat,projection")
    a.add_argument("--nd", default="1,2,3,4,5")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--iterations", type=int)
    a.add_argument("--split", choices=data.SPLITS, default="test")
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limit = _threads()
        if limit is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=limit):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pctgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"pctgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericalError, FloatingPointError) as exc:
        print(f"pctgan {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"pctgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
