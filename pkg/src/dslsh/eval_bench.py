"""Exhaustive baseline, prediction scoring and comparison-count benchmarks.

Speed is measured as the maximum number of distance computations any single
processor performs for a query. The baseline (PKNN) splits the dataset evenly
over all ``p * nu`` processors, so its cost is ``ceil(n / (p * nu))``.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .orchestrator import ClusterError, Orchestrator, VotingConfig, in_process_cluster, weighted_vote
from .points import KnnEntry, PointSet, l1_distances, read_dataset, top_k
from .slsh_index import SlshConfig

log = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "m_out", "L_out", "m_in", "L_in", "alpha",
    "median_cmp", "ci_lo", "ci_hi", "pknn_cmp", "speedup", "mcc", "recall",
]
SCALING_COLUMNS = [
    "nu", "p", "processors", "median_cmp", "s_first", "ci_lo", "ci_hi", "pknn_cmp", "pknn_over_dslsh",
]


# ----------------------------------------------------------------- baseline


def pknn_shares(n: int, processors: int) -> list[int]:
    """Share sizes when ``n`` points are split as evenly as possible."""
    if processors < 1:
        raise ValueError("need at least one processor")
    base, extra = divmod(n, processors)
    return [base + 1] * extra + [base] * (processors - extra)


def pknn_comparisons(n: int, p: int, nu: int) -> int:
    """Per-processor cost of the exhaustive baseline: ``ceil(n / (p * nu))``."""
    return max(pknn_shares(n, p * nu))


def pknn_query(
    query: np.ndarray, dataset: PointSet, K: int, p: int = 1, nu: int = 1
) -> tuple[list[KnnEntry], list[int]]:
    """Exact l1 top-K plus the comparison count of each of the ``p * nu`` shares."""
    shares = pknn_shares(len(dataset), p * nu)
    bounds = np.cumsum([0] + shares)
    query = np.asarray(query, dtype=np.float64)
    partials = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        part = dataset.slice(int(lo), int(hi))
        partials.extend(top_k(part.ids, l1_distances(part.features, query), part.labels, K))
    partials.sort(key=KnnEntry.sort_key)
    return partials[:K], shares


def exact_knn_batch(dataset: PointSet, queries: np.ndarray, K: int) -> list[list[KnnEntry]]:
    """Exact l1 neighbors for many queries (ground truth for recall)."""
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        out.append(top_k(dataset.ids, l1_distances(dataset.features, q), dataset.labels, K))
    return out


def pknn_mcc(exact: Sequence[Sequence[KnnEntry]], labels: Sequence[int], voting: VotingConfig) -> float:
    """MCC of the exhaustive baseline, given its neighbor lists; the reference for MCC loss."""
    preds = [weighted_vote(e, voting) for e in exact]
    return mcc(ConfusionMatrix.from_predictions(preds, labels))


# ----------------------------------------------------------------- scoring


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, predicted: Iterable[int], actual: Iterable[int]) -> "ConfusionMatrix":
        tp = fp = fn = tn = 0
        for yhat, y in zip(predicted, actual):
            if yhat and y:
                tp += 1
            elif yhat:
                fp += 1
            elif y:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    denom = (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if denom == 0:
        return 0.0
    value = (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(denom)
    return max(-1.0, min(1.0, value))


def recall_at_k(approx: Sequence[KnnEntry], exact: Sequence[KnnEntry], K: int) -> float:
    return len({e.point_id for e in approx[:K]} & {e.point_id for e in exact[:K]}) / K


def bootstrap_median_ci(
    samples: Sequence[float], resamples: int = 1000, level: float = 0.95, seed: int = 0
) -> tuple[float, float, float]:
    """Sample median with a percentile-bootstrap confidence interval."""
    data = np.asarray(samples, dtype=np.float64)
    if data.size == 0:
        raise ValueError("bootstrap needs at least one sample")
    median = float(np.median(data))
    rng = np.random.default_rng(seed)
    medians = np.empty(resamples)
    # row blocks bound memory for large sample counts
    block = max(1, 2_000_000 // data.size)
    for start in range(0, resamples, block):
        stop = min(resamples, start + block)
        idx = rng.integers(0, data.size, size=(stop - start, data.size))
        medians[start:stop] = np.median(data[idx], axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(medians, [tail, 100.0 - tail])
    return median, min(float(lo), median), max(float(hi), median)


# ------------------------------------------------------------- benchmarks


@dataclass
class BenchResult:
    config: SlshConfig
    nu: int
    p: int
    max_comparisons: list[int] = field(repr=False)
    candidates: list[int] = field(repr=False)
    median: float
    ci_low: float
    ci_high: float
    mcc: float
    recall_at_k: float
    pknn_per_processor: int
    speedup: float
    error: str | None = None

    @property
    def median_candidates(self) -> float:
        return float(np.median(self.candidates)) if self.candidates else 0.0

    def row(self) -> dict[str, Any]:
        c = self.config
        inner = c.inner_enabled
        return {
            "m_out": c.m_out,
            "L_out": c.L_out,
            "m_in": c.m_in if inner else 0,
            "L_in": c.L_in if inner else 0,
            "alpha": c.alpha if inner else 0,
            "median_cmp": self.median,
            "ci_lo": self.ci_low,
            "ci_hi": self.ci_high,
            "pknn_cmp": self.pknn_per_processor,
            "speedup": self.speedup,
            "mcc": self.mcc,
            "recall": self.recall_at_k,
        }


ClusterFactory = Callable[[SlshConfig], Orchestrator]


def evaluate(
    orch: Orchestrator,
    queries: PointSet,
    exact: Sequence[Sequence[KnnEntry]] | None,
    n: int,
    processors: int,
    nu: int,
    seed: int = 0,
) -> BenchResult:
    """Run every query through a built cluster and summarise it."""
    K = orch.voting.K
    max_cmp, cands, preds, recalls = [], [], [], []
    for i, q in enumerate(queries.features):
        res = orch.query(q, K)
        max_cmp.append(res.stats.max_comparisons)
        cands.append(res.stats.candidates_unique)
        preds.append(res.prediction)
        if exact is not None:
            recalls.append(recall_at_k(res.neighbors, exact[i], K))
    median, lo, hi = bootstrap_median_ci(max_cmp, seed=seed)
    pknn = max(pknn_shares(n, processors))
    return BenchResult(
        orch.slsh,
        nu,
        processors // nu,
        max_cmp,
        cands,
        median,
        lo,
        hi,
        mcc(ConfusionMatrix.from_predictions(preds, queries.labels)),
        float(np.mean(recalls)) if recalls else float("nan"),
        pknn,
        pknn / median if median > 0 else float("inf"),
    )


def run_benchmark(
    dataset_path: str | os.PathLike,
    queries: PointSet,
    grid: Sequence[SlshConfig],
    nu: int = 1,
    p: int = 1,
    factory: ClusterFactory | None = None,
    voting: VotingConfig | None = None,
    seed: int = 0,
) -> list[BenchResult]:
    """Build and evaluate each grid point in turn; failed builds are recorded and skipped."""
    dataset = read_dataset(dataset_path)
    n = len(dataset)
    K = grid[0].K if grid else 10
    exact = exact_knn_batch(dataset, queries.features, K)
    results = []
    for cfg in grid:
        vcfg = voting or VotingConfig(cfg.K)
        orch = factory(cfg) if factory else in_process_cluster(nu, p, cfg, vcfg)
        try:
            report = orch.build(dataset_path)
            processors = sum(r.get("workers", 1) for r in report["nodes"].values())
            res = evaluate(orch, queries, exact, n, processors, orch.nu, seed)
        except ClusterError as exc:
            log.error("grid point %s failed: %s", cfg, exc)
            nan = float("nan")
            res = BenchResult(cfg, orch.nu, p, [], [], nan, nan, nan, nan, nan, pknn_comparisons(n, p, orch.nu), nan, str(exc))
        finally:
            orch.close()
        log.info("m_out=%d L_out=%d inner=%s -> median %.0f speedup %.2f", cfg.m_out, cfg.L_out, cfg.inner_enabled, res.median, res.speedup)
        results.append(res)
    return results


@dataclass
class ScalingRow:
    nu: int
    p: int
    median: float
    s_first: float
    ci_low: float
    ci_high: float
    pknn: int

    @property
    def processors(self) -> int:
        return self.nu * self.p

    def row(self) -> dict[str, Any]:
        return {
            "nu": self.nu,
            "p": self.p,
            "processors": self.processors,
            "median_cmp": self.median,
            "s_first": self.s_first,
            "ci_lo": self.ci_low,
            "ci_hi": self.ci_high,
            "pknn_cmp": self.pknn,
            "pknn_over_dslsh": self.pknn / self.median if self.median > 0 else float("inf"),
        }


def strong_scaling(
    dataset_path: str | os.PathLike,
    queries: PointSet,
    cfg: SlshConfig,
    nus: Sequence[int],
    p: int,
    seed: int = 0,
) -> list[ScalingRow]:
    """Fixed dataset and config, growing node count; ``s_first`` is speedup over the first ``nu``."""
    n = len(read_dataset(dataset_path))
    rows: list[ScalingRow] = []
    for nu in nus:
        with in_process_cluster(nu, p, cfg) as orch:
            orch.build(dataset_path)
            res = evaluate(orch, queries, None, n, nu * p, nu, seed)
        first = rows[0].median if rows else res.median
        rows.append(ScalingRow(nu, p, res.median, first / res.median if res.median else float("inf"), res.ci_low, res.ci_high, pknn_comparisons(n, p, nu)))
    return rows


# ------------------------------------------------------------------- grids

OUTER_M = (100, 125, 150, 175, 200)
OUTER_L = (72, 96, 120)
ONSET = (125, 120)
INNER_M = (40, 65, 90, 115)
INNER_L = (20, 60)
INNER_ALPHA = 0.005


def expand_grid(spec: dict[str, Any]) -> list[SlshConfig]:
    """Grid JSON to configs.

    Keys ``m_out``, ``L_out`` (lists) give outer-only points. An optional
    ``inner`` object with ``onset: [m_out, L_out]``, ``m_in``, ``L_in`` lists
    and ``alpha`` adds stratified points at that onset. ``d``, ``K``,
    ``master_seed`` and ``rank_metric`` apply to every point.
    """
    allowed = {"m_out", "L_out", "inner", "d", "K", "master_seed", "rank_metric"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    common = {k: spec[k] for k in ("d", "K", "master_seed", "rank_metric") if k in spec}
    out = [
        SlshConfig(m_out=m, L_out=L, **common)
        for L, m in itertools.product(spec.get("L_out", []), spec.get("m_out", []))
    ]
    inner = spec.get("inner")
    if inner:
        m_out, L_out = inner["onset"]
        for L_in, m_in in itertools.product(inner["L_in"], inner["m_in"]):
            out.append(
                SlshConfig(
                    m_out=m_out, L_out=L_out, m_in=m_in, L_in=L_in,
                    alpha=inner.get("alpha", INNER_ALPHA), inner_enabled=True, **common,
                )
            )
    return out


def reference_grid(d: int = 30, K: int = 10, master_seed: int = 0) -> dict[str, Any]:
    """The reference sweep: 15 outer-only points plus 8 stratified ones at the SLSH onset (125, 120)."""
    return {
        "m_out": list(OUTER_M),
        "L_out": list(OUTER_L),
        "inner": {"onset": list(ONSET), "m_in": list(INNER_M), "L_in": list(INNER_L), "alpha": INNER_ALPHA},
        "d": d,
        "K": K,
        "master_seed": master_seed,
    }


def load_grid(path: str | os.PathLike) -> list[SlshConfig]:
    return expand_grid(json.loads(Path(path).read_text()))


# -------------------------------------------------------------------- CSV


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else "inf")
    return v


def write_rows(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in columns})


def write_results(path: str | os.PathLike, results: Iterable[BenchResult]) -> None:
    write_rows(path, RESULT_COLUMNS, (r.row() for r in results))


def write_scaling(path: str | os.PathLike, rows: Iterable[ScalingRow]) -> None:
    write_rows(path, SCALING_COLUMNS, (r.row() for r in rows))
