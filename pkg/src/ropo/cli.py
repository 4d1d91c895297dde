"""Command-line entry point: ``ropo <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .checkpoint import CheckpointError
from .data import generate_pairs, save_pairs
from .rotations import apply_chain, solve_ladder_angles

log = logging.getLogger("ropo")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--cadence", type=int)
    p.add_argument("--lr", type=float)


def _config(args, method: str) -> harness.RunConfig:
    cfg = harness.load_config(args.config, method) if args.config else harness.RunConfig.default(method)
    if args.steps is not None and args.cadence is None and args.steps % cfg.cadence:
        args.cadence = args.steps or 1
    return cfg.with_overrides(
        seed=args.seed, out=args.out, beta=args.beta, steps=args.steps, cadence=args.cadence, lr=args.lr
    )


def cmd_gen_data(args) -> int:
    cfg = _config(args, "ropo")
    seed = cfg.data_seed if args.seed is None else args.seed
    pairs = generate_pairs(cfg.task, args.count, seed)
    out = Path(args.out or "pairs.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pairs(pairs, out)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_sft(args) -> int:
    cfg = _config(args, "sft")
    result = harness.run_sft(cfg)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_po(args) -> int:
    cfg = _config(args, args.method)
    if cfg.method != args.method:
        cfg = replace(cfg, method=args.method)
    result = harness.run_po(cfg, args.sft, resume=args.resume, stop_after=args.stop_after)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_diagnose(args) -> int:
    reports = harness.diagnose(args.checkpoint, args.baseline, args.out or "diagnose")
    for r in reports:
        print(f"{r.name}\tHE_before={r.baseline_he!r}\tHE_after={r.he!r}\tdelta={r.delta_he:+.3e}")
    return 0


def _read_vectors(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    numeric = []
    for r in rows:
        try:
            numeric.append([float(x) for x in r])
        except ValueError:
            continue  # header
    if len(numeric) != 2:
        raise ValueError(f"{path}: expected exactly two numeric rows (v, then y), found {len(numeric)}")
    return np.array(numeric[0]), np.array(numeric[1])


def cmd_solve_rotation(args) -> int:
    v, y = _read_vectors(args.vectors)
    if args.normalize:
        v, y = v / np.linalg.norm(v), y / np.linalg.norm(y)
    chain = solve_ladder_angles(v, y)
    residual = float(np.linalg.norm(apply_chain(chain, v) - y))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["order", "i", "j", "angle"])
        for k, ((i, j), t) in enumerate(chain):
            writer.writerow([k, i, j, repr(t)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    print(f"residual {residual:.3e}", file=sys.stderr)
    return 0


def cmd_merge(args) -> int:
    path = harness.merge_checkpoint(args.checkpoint, args.out)
    print(f"merged checkpoint: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropo", description="Rotation-constrained preference optimization on a tiny decoder")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic preference pairs as JSONL")
    _common(p)
    p.add_argument("--count", type=int, default=1000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sft", help="supervised fine-tuning on preferred completions")
    _common(p)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("po", help="preference optimization from an SFT checkpoint")
    _common(p)
    p.add_argument("--method", choices=("dpo-full", "ropo"), required=True)
    p.add_argument("--sft", required=True, help="SFT checkpoint (also the frozen reference)")
    p.add_argument("--resume", help="continue from a checkpoint written by --stop-after")
    p.add_argument("--stop-after", type=int)
    p.set_defaults(func=cmd_po)

    p = sub.add_parser("diagnose", help="hyperspherical-energy report against a baseline checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("solve-rotation", help="adjacent-plane rotation chain mapping v onto y")
    p.add_argument("vectors", help="CSV with two numeric rows: v then y")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve_rotation)

    p = sub.add_parser("merge", help="fold RoPO factors into dense weights")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
