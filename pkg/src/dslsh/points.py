"""Point containers, neighbor entries and the dataset CSV format."""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import pandas as pd


class KnnEntry(NamedTuple):
    point_id: int
    distance: float
    label: int

    def sort_key(self) -> tuple[float, int]:
        return (self.distance, self.point_id)


@dataclass(frozen=True)
class LabeledPoint:
    features: tuple[float, ...]
    label: int
    point_id: int = -1
    source: tuple[str, float] | None = None


@dataclass
class PointSet:
    """Column-oriented slice of a labeled dataset.

    Rows are addressed by local position; ``ids`` holds the stable global id
    of each row.
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    sources: list[str] | None = field(default=None, repr=False)
    starts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("labels and ids must have one entry per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_arrays(cls, features: np.ndarray, labels: np.ndarray | None = None, first_id: int = 0) -> "PointSet":
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        if labels is None:
            labels = np.zeros(n, dtype=np.int8)
        return cls(features, labels, np.arange(first_id, first_id + n))

    @classmethod
    def from_points(cls, points: Sequence[LabeledPoint], d: int | None = None) -> "PointSet":
        if not points:
            return cls(np.zeros((0, d or 0)), np.zeros(0), np.zeros(0))
        ids = [p.point_id if p.point_id >= 0 else i for i, p in enumerate(points)]
        return cls(
            np.array([p.features for p in points], dtype=np.float64),
            np.array([p.label for p in points]),
            np.array(ids),
        )

    def slice(self, start: int, stop: int) -> "PointSet":
        return PointSet(
            self.features[start:stop],
            self.labels[start:stop],
            self.ids[start:stop],
            None if self.sources is None else self.sources[start:stop],
            None if self.starts is None else self.starts[start:stop],
        )

    def point(self, row: int) -> LabeledPoint:
        source = None
        if self.sources is not None and self.starts is not None:
            source = (self.sources[row], float(self.starts[row]))
        return LabeledPoint(tuple(self.features[row].tolist()), int(self.labels[row]), int(self.ids[row]), source)


def l1_distances(features: np.ndarray, query: np.ndarray) -> np.ndarray:
    return np.abs(features - query).sum(axis=1)


def cosine_distances(features: np.ndarray, query: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1) * np.linalg.norm(query)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (features @ query) / norms
    return 1.0 - np.nan_to_num(sim, nan=0.0)


METRICS = {"l1": l1_distances, "cosine": cosine_distances}


def top_k(ids: np.ndarray, distances: np.ndarray, labels: np.ndarray, k: int) -> list[KnnEntry]:
    """The ``k`` smallest entries under the ``(distance, id)`` total order."""
    if len(ids) == 0:
        return []
    if len(ids) > 4 * k:
        # cheap pre-selection; ties at the cut are kept so lexsort decides
        cut = np.partition(distances, k - 1)[k - 1]
        keep = distances <= cut
        ids, distances, labels = ids[keep], distances[keep], labels[keep]
    order = np.lexsort((ids, distances))[:k]
    return [KnnEntry(int(ids[i]), float(distances[i]), int(labels[i])) for i in order]


def brute_force_knn(points: PointSet, query: np.ndarray, k: int, metric: str = "l1") -> list[KnnEntry]:
    query = np.asarray(query, dtype=np.float64)
    return top_k(points.ids, METRICS[metric](points.features, query), points.labels, k)


# ------------------------------------------------------------- dataset CSV


def feature_columns(d: int) -> list[str]:
    return [f"f{i}" for i in range(d)]


def write_dataset(path: str | os.PathLike, points: PointSet | Iterable[LabeledPoint]) -> None:
    """Write ``f0..f{d-1},label,source_id,start_s``."""
    if not isinstance(points, PointSet):
        pts = list(points)
        ps = PointSet.from_points(pts)
        ps.sources = [p.source[0] if p.source else "" for p in pts]
        ps.starts = np.array([p.source[1] if p.source else 0.0 for p in pts])
        points = ps
    frame = pd.DataFrame(points.features, columns=feature_columns(points.d))
    frame["label"] = points.labels.astype(int)
    frame["source_id"] = points.sources if points.sources is not None else ""
    frame["start_s"] = points.starts if points.starts is not None else 0.0
    frame.to_csv(path, index=False, float_format="%.17g")


def _read_dataset(path: str, mtime_ns: int) -> PointSet:
    frame = pd.read_csv(path, dtype={"source_id": str}, keep_default_na=False, float_precision="round_trip")
    fcols = [c for c in frame.columns if c.startswith("f") and c[1:].isdigit()]
    if fcols != feature_columns(len(fcols)) or not fcols:
        raise ValueError(f"{path}: expected feature columns f0..f(d-1)")
    labels = frame["label"].to_numpy() if "label" in frame else np.zeros(len(frame))
    ps = PointSet(frame[fcols].to_numpy(dtype=np.float64), labels, np.arange(len(frame)))
    if "source_id" in frame:
        ps.sources = frame["source_id"].astype(str).tolist()
    if "start_s" in frame:
        ps.starts = frame["start_s"].to_numpy(dtype=np.float64)
    return ps


_cached_read = functools.lru_cache(maxsize=4)(_read_dataset)


def read_dataset(path: str | os.PathLike) -> PointSet:
    """Load a dataset CSV; global ids are row numbers.

    Parsed files are cached by path and modification time so in-process
    nodes sharing one file parse it once. Treat the result as read-only.
    """
    p = Path(path).resolve()
    return _cached_read(str(p), p.stat().st_mtime_ns)
