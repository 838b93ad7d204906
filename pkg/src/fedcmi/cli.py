"""Command-line entry point: gen-data, run, compare and sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import generate_dataset
from .experiment import (
    compare,
    dataset_hash,
    format_comparison,
    load_config,
    load_data_spec,
    output_root,
    run_experiment,
    sweep,
)


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def cmd_gen_data(args) -> None:
    spec = load_data_spec(args.spec)
    train, test = generate_dataset(spec, "train"), generate_dataset(spec, "test")
    h = dataset_hash(train, test)
    out = Path(args.out) if args.out else output_root() / f"data-{h[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    train.save(out / "train.fcmi")
    test.save(out / "test.fcmi")
    print(json.dumps({"dir": str(out), "dataset_hash": h}))


def cmd_run(args) -> None:
    cfg, text = load_config(args.config)
    if args.out:
        cfg = cfg.with_overrides(output_dir=args.out)
    print(run_experiment(cfg, config_text=text, workers=args.workers))


def cmd_sweep(args) -> None:
    cfg, _ = load_config(args.config)
    if args.out:
        cfg = cfg.with_overrides(output_dir=args.out)
    seeds = [int(s) for s in _csv_list(args.seeds)]
    for d in sweep(cfg, _csv_list(args.strategies), seeds, workers=args.workers):
        print(d)


def cmd_compare(args) -> None:
    table = compare(args.dirs, threshold=args.threshold)
    if args.json:
        print(json.dumps(table, indent=2))
    else:
        print(format_comparison(table))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcmi", description="Balanced multimodal federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/test files from a data spec")
    g.add_argument("spec")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare run directories")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--threshold", type=float, default=0.8)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="grid over strategies and seeds")
    s.add_argument("config")
    s.add_argument("--strategies", default="mfedavg,mfedprox,fedcmi")
    s.add_argument("--seeds", default="0")
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        # one line on stderr, parseable as JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, ValueError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
