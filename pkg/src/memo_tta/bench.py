"""Evaluation harness: per-point episodic runs, corruption summaries, B sweeps, CSV output."""
from __future__ import annotations

import csv
import logging
import math
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adapt import (AdaptationConfig, EvalRecord, memo_adapt_predict, plain_predict, tent_adapt,
                    tta_predict)
from .augment import AugmentationPolicy, point_seed
from .data import Dataset
from .nn import Model

logger = logging.getLogger(__name__)

CSV_HEADER = ("strategy", "dataset", "corruption", "severity", "B", "eta", "N", "steps",
              "error_pct", "sec_per_point", "seed")
PLOT_HEADER = ("B", "sec_per_point", "error_pct")

_SHIFTED = re.compile(r"test_shifted\((?P<kind>[a-z_]+),\s*(?P<sev>\d+)\)")


@dataclass
class RunResult:
    strategy: str
    dataset: str
    records: list
    error_pct: float
    sec_per_point: float
    config: AdaptationConfig
    seed: int
    corruption: str = ""
    severity: int = 0
    failures: int = 0

    @property
    def predictions(self) -> list[int]:
        return [r.pred for r in self.records]

    def row(self) -> dict:
        c = self.config
        return {"strategy": self.strategy, "dataset": self.dataset, "corruption": self.corruption,
                "severity": self.severity, "B": c.B, "eta": c.lr, "N": c.prior_strength,
                "steps": c.steps, "error_pct": self.error_pct, "sec_per_point": self.sec_per_point,
                "seed": self.seed}


def split_corruption(split: str) -> tuple[str, int]:
    m = _SHIFTED.fullmatch(split)
    return (m["kind"], int(m["sev"])) if m else ("", 0)


def _run_point(model: Model, x, label: int, index: int, config: AdaptationConfig,
               policy: AugmentationPolicy, seed: int) -> EvalRecord:
    s = point_seed(seed, index)
    if config.strategy == "none":
        return plain_predict(model, x, index, label)[1]
    if config.strategy == "tta":
        return tta_predict(model, x, config, s, policy, index, label)[1]
    return memo_adapt_predict(model, x, config, s, policy, index, label)[1]


# worker state for process-pool fan-out; set once per worker by the initializer
_WORKER: dict = {}


def _init_worker(model, images, labels, config, policy, seed):
    _WORKER.update(model=model, images=images, labels=labels, config=config, policy=policy, seed=seed)


def _run_chunk(indices):
    w = _WORKER
    return [_run_point(w["model"], w["images"][i], int(w["labels"][i]), i, w["config"], w["policy"],
                       w["seed"]) for i in indices]


def evaluate(model: Model, dataset: Dataset, config: AdaptationConfig, seed: int = 0,
             parallelism: int = 1, policy: Optional[AugmentationPolicy] = None) -> RunResult:
    """Run ``config.strategy`` over every point of ``dataset``.

    Each point draws its augmentations from ``point_seed(seed, index)``, so the
    result does not depend on ``parallelism``.  Per-point failures are flagged in
    the records and counted, never raised.  ``model`` is not modified.
    """
    policy = policy or AugmentationPolicy()
    n = len(dataset)
    images, labels = dataset.images, dataset.labels
    if config.strategy == "tent_batch":
        _, records = tent_adapt(model, images, config, seed, policy, labels=labels)
    elif parallelism <= 1 or n < 2:
        records = [_run_point(model, images[i], int(labels[i]), i, config, policy, seed) for i in range(n)]
    else:
        chunks = [c.tolist() for c in np.array_split(np.arange(n), min(parallelism * 4, n)) if len(c)]
        with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker,
                                 initargs=(model, images, labels, config, policy, seed)) as pool:
            records = [r for part in pool.map(_run_chunk, chunks) for r in part]
        records.sort(key=lambda r: r.index)
    correct = sum(int(r.pred == r.label) for r in records)
    failures = sum(1 for r in records if r.flag.startswith("error"))
    if failures:
        logger.warning("%s on %s: %d of %d points fell back to the unadapted prediction",
                       config.strategy, dataset.split, failures, n)
    kind, severity = split_corruption(dataset.split)
    return RunResult(
        strategy=config.strategy, dataset=dataset.split, records=records,
        error_pct=100.0 * (1 - correct / n) if n else 0.0,
        sec_per_point=float(np.mean([r.seconds for r in records])) if records else 0.0,
        config=config, seed=seed, corruption=kind, severity=severity, failures=failures)


def sweep_B(model: Model, dataset: Dataset, config: AdaptationConfig, B_values: Sequence[int],
            seed: int = 0, parallelism: int = 1, policy: Optional[AugmentationPolicy] = None) -> list:
    """One :func:`evaluate` per ``B``; smaller budgets see a prefix of the larger draws."""
    if not B_values:
        raise ValueError("B_values must be non-empty")
    return [evaluate(model, dataset, config.with_(B=int(b)), seed, parallelism, policy) for b in B_values]


@dataclass
class TuningResult:
    best: AdaptationConfig
    best_error: float
    trials: list = field(default_factory=list)   # (lr, steps, error_pct)


def tune_learning_rate(model: Model, dataset: Dataset, config: AdaptationConfig,
                       coarse: Sequence[float] = (1e-2, 1e-3, 1e-4),
                       refine: Sequence[float] = (5.0, 2.5, 0.5),
                       steps_options: Sequence[int] = (1, 2), seed: int = 0,
                       parallelism: int = 1, policy: Optional[AugmentationPolicy] = None) -> TuningResult:
    """Pick ``(lr, steps)`` by error on a validation split.

    For each step count: evaluate the ``coarse`` grid, then ``refine`` multiples
    of the best coarse rate.  Ties go to the earlier trial.
    """
    trials = []
    seen = {}

    def run(lr, steps):
        key = (float(lr), int(steps))
        if key not in seen:
            seen[key] = evaluate(model, dataset, config.with_(lr=key[0], steps=key[1]), seed,
                                 parallelism, policy).error_pct
            trials.append((key[0], key[1], seen[key]))
            logger.info("tune %s lr=%g steps=%d: %.2f%%", config.strategy, key[0], key[1], seen[key])
        return seen[key]

    for steps in steps_options:
        best_lr = min(coarse, key=lambda lr: (run(lr, steps), coarse.index(lr)))
        for mult in refine:
            run(best_lr * mult, steps)
    lr, steps, err = min(trials, key=lambda t: (t[2], trials.index(t)))
    return TuningResult(config.with_(lr=lr, steps=steps), err, trials)


def corruption_error_summary(results: Sequence[RunResult],
                             reference: Optional[Sequence[RunResult]] = None) -> dict:
    """Average corruption error, and mCE normalized by ``reference`` when given.

    mCE = mean over kinds of ``100 * sum_s E[k, s] / sum_s E_ref[k, s]``.  Kinds
    whose reference errors sum to zero are excluded with a warning.
    """
    grid = _grid(results, "results")
    kinds = sorted({k for k, _ in grid})
    sevs = sorted({s for _, s in grid})
    out = {"kinds": kinds, "severities": sevs,
           "per_kind": {k: float(np.mean([grid[k, s] for s in sevs])) for k in kinds},
           "avg_error": float(np.mean(list(grid.values())))}
    if reference is not None:
        ref = _grid(reference, "reference")
        missing = [f"{k}/{s}" for k in kinds for s in sevs if (k, s) not in ref]
        if missing:
            raise ValueError(f"reference grid is missing cells: {', '.join(missing)}")
        ratios, excluded = [], []
        for k in kinds:
            denom = sum(ref[k, s] for s in sevs)
            if denom == 0:
                logger.warning("reference error is zero for %s; excluded from mCE", k)
                excluded.append(k)
                continue
            ratios.append(100.0 * sum(grid[k, s] for s in sevs) / denom)
        out["mce"] = float(np.mean(ratios)) if ratios else math.nan
        out["excluded"] = excluded
    return out


def _grid(results, what) -> dict:
    grid = {}
    for r in results:
        grid[(r.corruption, r.severity)] = r.error_pct
    kinds = {k for k, _ in grid}
    sevs = {s for _, s in grid}
    missing = [f"{k}/{s}" for k in sorted(kinds) for s in sorted(sevs) if (k, s) not in grid]
    if missing:
        raise ValueError(f"incomplete {what} grid, missing cells: {', '.join(missing)}")
    if not grid:
        raise ValueError(f"empty {what} grid")
    return grid


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_results(results: Sequence[RunResult], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in results:
            row = r.row()
            w.writerow([_fmt(row[k]) for k in CSV_HEADER])
    return path


_INT_COLS = {"severity", "B", "steps", "seed"}
_FLOAT_COLS = {"eta", "N", "error_pct", "sec_per_point"}


def read_results(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = dict(raw)
            for k in _INT_COLS:
                row[k] = int(row[k])
            for k in _FLOAT_COLS:
                row[k] = float(row[k])
            rows.append(row)
    return rows


def write_plot_data(results: Sequence[RunResult], path) -> Path:
    """``(B, seconds per point, error %)`` series for an error-versus-cost plot."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(PLOT_HEADER)
        for r in results:
            w.writerow([r.config.B, repr(r.sec_per_point), repr(r.error_pct)])
    return path


def records_table(result: RunResult) -> list[dict]:
    return [asdict(r) for r in result.records]
