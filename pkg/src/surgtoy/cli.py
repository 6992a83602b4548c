"""Command-line entry point: ``surgtoy <command> [--config PATH] [--seed N] [--out DIR] [--stage NAME]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, pipeline
from .config import load_config
from .errors import SurgToyError

# stages each command runs when --stage is not given
COMMAND_STAGES = {
    "gen-data": ("data", "data"),
    "pretrain": ("pretrain", "pretrain"),
    "align": ("align", "align"),
    "tune": ("lm", "tune"),
    "route-train": ("route", "route"),
    "eval": ("eval", "eval"),
}


def _common(p):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgtoy", description="Toy surgical video-language pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (first, last) in COMMAND_STAGES.items():
        p = sub.add_parser(name, help=f"run stages {first}..{last}")
        _common(p)
        p.add_argument("--stage", choices=("all",) + pipeline.STAGES,
                       help=f"first stage to (re)run; 'all' starts from data (default: {first})")
        p.add_argument("--resume", action="store_true", help="skip stages whose outputs already exist")
    p = sub.add_parser("ablate", help="run an ablation and write one report per variant")
    _common(p)
    p.add_argument("axis", choices=("embedding",))
    p.add_argument("--seeds", type=int, nargs="+", help="seed set (default: the configured seed)")
    p.add_argument("--stage", choices=("all",), default="all")
    p = sub.add_parser("inspect", help="pretty-print a checkpoint, tensor file or a dataset's mask plan")
    _common(p)
    p.add_argument("path", type=Path)
    p.add_argument("--scale", type=int, help="tube duration for a sampled mask plan (dataset paths)")
    p.add_argument("--stage", choices=("all",), default="all")
    return parser


def _array_line(name, arr: np.ndarray) -> str:
    stats = ""
    if arr.size and arr.dtype.kind in "fiub":
        a = arr.astype(np.float64)
        stats = f"  min={a.min():.4g} max={a.max():.4g} mean={a.mean():.4g}"
    return f"  {name:<44} {str(arr.dtype):<8} {str(tuple(arr.shape)):<16}{stats}"


def _grid(arr: np.ndarray) -> str:
    rows = []
    for t, plane in enumerate(arr):
        rows.append(f"  t={t}: " + " | ".join("".join(str(int(v)) for v in row) for row in plane))
    return "\n".join(rows)


def inspect_path(path: Path, cfg, scale: int | None) -> str:
    if path.is_dir():
        from .synthgen import load_dataset
        from .tubemask import TubeSpec, make_mask_plan
        sample = load_dataset(path)[0]
        k = scale or cfg.masking.scales[0]
        plan = make_mask_plan(sample.video.shape, sample.annotation, TubeSpec(k, cfg.masking.tube_size,
                                                                              cfg.masking.tube_size),
                              cfg.masking.r, cfg.seed, cfg.masking.background_keep_prob)
        return format_plan(plan.to_arrays(), f"mask plan for {sample.annotation.clip_id}")
    data = path.read_bytes()
    if data[:4] == container.TENSOR_MAGIC:
        arr = container.decode_tensor(data)
        return f"tensor {path}\n" + _array_line("data", arr)
    ckpt = container.Checkpoint.from_bytes(data)
    lines = [f"checkpoint {path}", f"  stage: {ckpt.stage}",
             "  config: " + json.dumps(ckpt.config, sort_keys=True), f"  arrays: {len(ckpt.arrays)}"]
    lines += [_array_line(n, ckpt.arrays[n]) for n in sorted(ckpt.arrays)]
    if any(n.startswith("maskplan.") for n in ckpt.arrays):
        lines.append(format_plan(ckpt.arrays, "mask plan"))
    return "\n".join(lines)


def format_plan(arrays, title: str) -> str:
    from .tubemask import MaskPlan
    plan = MaskPlan.from_arrays(arrays)
    head = (f"{title}: k={plan.spec.k} tube={plan.spec.h}x{plan.spec.w} r={plan.r} seed={plan.seed} "
            f"fallback={plan.fallback} instrument={int(plan.instrument.sum())} hints={int(plan.hint.sum())}")
    return "\n".join([head, " M (instrument tubes):", _grid(plan.instrument), " H (hints):", _grid(plan.hint)])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        # empty-hint warnings are routine at r=0.1; keep them behind --verbose
        logging.getLogger("surgtoy.tubemask").setLevel(logging.ERROR)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "inspect":
            print(inspect_path(args.path, cfg, args.scale))
            return 0
        if args.command == "ablate":
            seeds = args.seeds if args.seeds else [cfg.seed]
            summary = pipeline.ablate_embedding(cfg, args.out, seeds)
            print(json.dumps(summary, indent=2))
            return 0
        first, last = COMMAND_STAGES[args.command]
        start = args.stage or first
        if start != "all" and pipeline.STAGES.index(start) > pipeline.STAGES.index(last):
            parser.error(f"--stage {start} comes after {args.command}'s last stage {last}")
        report = pipeline.run_pipeline(cfg, args.out, start, last, resume=args.resume)
        if report is not None:
            sys.stdout.write(report.dumps())
        return 0
    except SurgToyError as exc:
        print(f"surgtoy: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
