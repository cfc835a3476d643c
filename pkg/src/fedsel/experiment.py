"""Run configured experiments and write their outputs.

Layout of ``output_dir``::

    summary.csv                  one row per (selector, seed)
    aggregate.csv                median / spread per selector, reduction vs random
    timing.csv                   wall-clock seconds per run (not reproducible)
    <selector>/seed<k>/rounds.jsonl
    <selector>/seed<k>/clusters.jsonl
    <selector>/seed<k>/roc.csv
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, nn
from .config import ExperimentConfig
from .fed import PartitionConfig, RoundRecord, Simulation, evaluate, partition_noniid
from .metrics import MetricsReport, metrics_report, roc_curve, rounds_to_target
from .selectors import make_selector

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["dataset", "sigma", "selector", "seed", "rounds_to_target", "accuracy",
                   "balanced_accuracy", "recall", "kappa", "auc", "runtime_s", "error"]
ROUND_KEYS = ["round", "selected", "test_acc", "test_loss", "reward"]


@dataclass
class RunResult:
    selector: str
    seed: int
    records: list = field(default_factory=list)
    clusters: list = field(default_factory=list)
    report: MetricsReport | None = None
    rounds_to_target: int | None = None
    runtime: float = 0.0
    roc: dict = field(default_factory=dict)
    error: str = ""


def build_model_spec(cfg: ExperimentConfig, train: data.Dataset) -> list:
    if cfg.model == "mlp":
        return nn.mlp_spec([train.n_features, cfg.hidden, train.num_classes])
    c, h, w = data.PRESET_IMAGE_SHAPES.get(cfg.dataset, (1, 28, 28))
    if c * h * w != train.n_features:
        raise ValueError(f"dqre-conv needs image data; {cfg.dataset} has {train.n_features} features")
    return nn.dqre_conv_spec(c, h, w, train.num_classes)


def run_single(cfg: ExperimentConfig, selector_kind: str, seed: int,
               train: data.Dataset, test: data.Dataset) -> RunResult:
    t0 = time.perf_counter()
    result = RunResult(selector_kind, seed)
    specs = build_model_spec(cfg, train)
    fed_cfg = cfg.fed()
    if selector_kind == "centralized":
        shards = partition_noniid(train, PartitionConfig(1, 0.0, seed))
        fed_cfg = replace(fed_cfg, clients_per_round=1)
    else:
        shards = partition_noniid(train, cfg.partition(seed))
    sim = Simulation(specs, shards, test, fed_cfg, seed=seed, workers=cfg.workers)
    selector = make_selector(selector_kind, seed, cfg.dqn(), cfg.ensemble_size, cfg.k_clusters,
                             cfg.bandwidth, cfg.train_steps_per_round)
    if selector.needs_embeddings:
        sim.probe()
    for _ in range(fed_cfg.max_rounds):
        rec = sim.run_round(selector)
        dump = selector.dump()
        if dump is not None:
            result.clusters.append({"round": rec.round_index, **dump})
        if cfg.stop_at_target and rec.test_accuracy >= fed_cfg.target_accuracy:
            break
    result.records = sim.records
    result.rounds_to_target = rounds_to_target([r.test_accuracy for r in sim.records],
                                               fed_cfg.target_accuracy)
    ev = evaluate(sim.params, specs, test)
    result.runtime = time.perf_counter() - t0
    result.report = metrics_report(ev.predictions, test.labels, ev.scores, result.runtime,
                                   test.num_classes)
    for c in np.unique(test.labels):
        fpr, tpr = roc_curve(test.labels == c, ev.scores[:, c])
        result.roc[int(c)] = (fpr, tpr)
    return result


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_row(cfg: ExperimentConfig, res: RunResult) -> dict:
    rep = res.report
    row = {"dataset": cfg.dataset, "sigma": cfg.sigma, "selector": res.selector,
           "seed": res.seed, "rounds_to_target": res.rounds_to_target,
           "accuracy": rep.accuracy if rep else None,
           "balanced_accuracy": rep.balanced_accuracy if rep else None,
           "recall": rep.recall if rep else None,
           "kappa": rep.kappa if rep else None,
           "auc": rep.auc if rep else None,
           "runtime_s": res.runtime if (cfg.record_runtime and rep) else None,
           "error": res.error}
    return row


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def write_jsonl(path: Path, items) -> None:
    text = "".join(json.dumps(it, sort_keys=False) + "\n" for it in items)
    path.write_text(text, encoding="utf-8", newline="")


def emit_outputs(records, reports, path, clusters=None, roc=None) -> list[Path]:
    """Write ``rounds.jsonl`` / ``clusters.jsonl`` for one run into ``path``,
    plus ``summary.csv`` when ``reports`` (summary rows) are given."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        rounds = out / "rounds.jsonl"
        write_jsonl(rounds, [r.to_json() if isinstance(r, RoundRecord) else r for r in records])
        written.append(rounds)
        cl = out / "clusters.jsonl"
        write_jsonl(cl, clusters or [])
        written.append(cl)
        if roc:
            rows = [{"class": c, "fpr": f, "tpr": t}
                    for c, (fpr, tpr) in sorted(roc.items()) for f, t in zip(fpr, tpr)]
            _write_csv(out / "roc.csv", ["class", "fpr", "tpr"], rows)
            written.append(out / "roc.csv")
        if reports is not None:
            _write_csv(out / "summary.csv", SUMMARY_COLUMNS, reports)
            written.append(out / "summary.csv")
        return written
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out}: {exc}") from exc


def _median(values):
    vals = sorted(float("inf") if v is None else v for v in values)
    if not vals:
        return None
    m = len(vals)
    med = vals[m // 2] if m % 2 else 0.5 * (vals[m // 2 - 1] + vals[m // 2])
    return None if med == float("inf") else med


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Median and min/max of rounds_to_target per selector, plus the
    percentage reduction of the median relative to the random selector."""
    by_sel: dict[str, list] = {}
    for r in rows:
        by_sel.setdefault(r["selector"], []).append(r)
    base = _median([r["rounds_to_target"] for r in by_sel.get("random", [])]) \
        if "random" in by_sel else None
    out = []
    for sel, rs in by_sel.items():
        rt = [r["rounds_to_target"] for r in rs]
        reached = [v for v in rt if v is not None]
        med = _median(rt)
        acc = [r["accuracy"] for r in rs if r["accuracy"] is not None]
        out.append({
            "selector": sel,
            "runs": len(rs),
            "reached": len(reached),
            "median_rounds": med,
            "min_rounds": min(reached) if reached else None,
            "max_rounds": max(reached) if reached else None,
            "median_accuracy": float(np.median(acc)) if acc else None,
            "reduction_vs_random_pct": None if (base is None or med is None)
            else 100.0 * (base - med) / base,
        })
    return out


AGGREGATE_COLUMNS = ["selector", "runs", "reached", "median_rounds", "min_rounds", "max_rounds",
                     "median_accuracy", "reduction_vs_random_pct"]


def run_experiment(cfg: ExperimentConfig, datasets=None) -> dict:
    """Run every (selector, seed) pair and write all outputs.

    Returns ``{"rows": summary rows, "aggregate": per-selector rows,
    "results": RunResult list}``.
    """
    train, test = datasets if datasets is not None else data.load_preset(cfg.dataset, cfg.data_dir)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, results, timing = [], [], []
    for sel in cfg.selectors:
        for seed in cfg.seeds:
            log.info("run selector=%s seed=%s", sel, seed)
            try:
                res = run_single(cfg, sel, seed, train, test)
            except Exception as exc:  # recorded per run, the rest continue
                log.exception("run %s/%s failed", sel, seed)
                res = RunResult(sel, seed, error=f"{type(exc).__name__}: {exc}")
            results.append(res)
            rows.append(summary_row(cfg, res))
            timing.append({"selector": sel, "seed": seed, "runtime_s": res.runtime})
            emit_outputs(res.records, None, out / sel / f"seed{seed}", res.clusters, res.roc)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    agg = aggregate_rows(rows)
    _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, agg)
    _write_csv(out / "timing.csv", ["selector", "seed", "runtime_s"], timing)
    return {"rows": rows, "aggregate": agg, "results": results}


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
