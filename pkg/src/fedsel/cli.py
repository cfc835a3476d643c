"""``fedsel`` command line: run / report / partition."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .config import load_config
from .errors import FedselError
from .experiment import AGGREGATE_COLUMNS, aggregate_rows, read_summary, run_experiment
from .fed import PartitionConfig, partition_noniid


def cmd_run(args) -> int:
    overrides = {}
    if args.out:
        overrides["output_dir"] = args.out
    if args.workers:
        overrides["workers"] = args.workers
    cfg = load_config(args.config, **overrides)
    res = run_experiment(cfg)
    _print_aggregate(res["aggregate"])
    print(f"outputs written to {cfg.output_dir}")
    return 1 if any(r["error"] for r in res["rows"]) else 0


def _num(v):
    if v in (None, "", "NA"):
        return None
    return float(v)


def _print_aggregate(agg) -> None:
    print("  ".join(f"{c:>24}" if i else f"{c:<12}" for i, c in enumerate(AGGREGATE_COLUMNS)))
    for row in agg:
        cells = []
        for i, c in enumerate(AGGREGATE_COLUMNS):
            v = row[c]
            s = "NA" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))
            cells.append(f"{s:>24}" if i else f"{s:<12}")
        print("  ".join(cells))


def cmd_report(args) -> int:
    path = Path(args.dir) / "summary.csv"
    rows = read_summary(path)
    parsed = []
    for r in rows:
        rt = r["rounds_to_target"]
        parsed.append({**r, "rounds_to_target": None if rt in ("", "NA") else int(rt),
                       "accuracy": _num(r["accuracy"])})
    datasets = sorted({(r["dataset"], r["sigma"]) for r in rows})
    for ds, sigma in datasets:
        print(f"dataset={ds} sigma={sigma}")
        _print_aggregate(aggregate_rows([r for r in parsed
                                         if (r["dataset"], r["sigma"]) == (ds, sigma)]))
    errors = [r for r in rows if r.get("error")]
    for r in errors:
        print(f"error in {r['selector']}/seed{r['seed']}: {r['error']}")
    return 0


def cmd_partition(args) -> int:
    train, _ = data.load_preset(args.dataset, args.data_dir)
    shards = partition_noniid(train, PartitionConfig(args.clients, args.sigma, args.seed))
    k = train.num_classes
    print(f"{len(train)} samples, {len(shards)} clients, sigma={args.sigma}")
    if args.inspect:
        print("client  dominant  size  " + " ".join(f"{c:>5}" for c in range(k)))
        for s in shards:
            counts = s.class_counts(k)
            dom = "-" if s.dominant_class is None else str(s.dominant_class)
            print(f"{s.client_id:>6}  {dom:>8}  {s.sample_count:>4}  "
                  + " ".join(f"{c:>5}" for c in counts))
        total = np.sum([s.sample_count for s in shards])
        print(f"total assigned: {total}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsel", description="Federated client-selection simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override output_dir")
    r.add_argument("--workers", type=int, help="threads for client training")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarize an output directory")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(func=cmd_report)

    part = sub.add_parser("partition", help="show a non-IID partition")
    part.add_argument("--dataset", default="mnist-subset")
    part.add_argument("--data-dir")
    part.add_argument("--sigma", type=float, default=0.0)
    part.add_argument("--clients", type=int, default=20)
    part.add_argument("--seed", type=int, default=0)
    part.add_argument("--inspect", action="store_true")
    part.set_defaults(func=cmd_partition)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedselError, FileNotFoundError, OSError) as exc:
        print(f"fedsel: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
