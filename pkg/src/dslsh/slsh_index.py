"""Two-layer SLSH index over one dataset slice.

The outer layer is ``L_out`` l1 bit-sampling tables. Any outer bucket holding
more than ``alpha * n_local`` points gets an inner layer of ``L_in`` cosine
tables built over that bucket's population. A query collects candidates from
the outer bucket it lands in, or from the inner buckets when the outer bucket
was stratified, and ranks the union with a counted linear scan.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .lsh_hash import (
    BucketKey,
    ComposedHash,
    Family,
    HashSpec,
    InvalidParameter,
    child_seed,
    derive_composed_hash,
    key_from_packed,
    pack_keys,
)
from .points import METRICS, KnnEntry, LabeledPoint, PointSet, top_k

SNAPSHOT_VERSION = 1

_OUTER_STREAM = 0
_INNER_STREAM = 1


@dataclass(frozen=True)
class SlshConfig:
    m_out: int
    L_out: int
    m_in: int = 0
    L_in: int = 0
    alpha: float = 0.005
    d: int = 30
    K: int = 10
    inner_enabled: bool = False
    master_seed: int = 0
    rank_metric: str = "l1"

    def __post_init__(self) -> None:
        if self.m_out < 1 or self.L_out < 1:
            raise InvalidParameter("m_out and L_out must be >= 1")
        if self.inner_enabled and (self.m_in < 1 or self.L_in < 1):
            raise InvalidParameter("inner layer needs m_in, L_in >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidParameter("alpha must lie in (0, 1)")
        if self.d < 1 or self.K < 1:
            raise InvalidParameter("d and K must be >= 1")
        if self.rank_metric not in METRICS:
            raise InvalidParameter(f"rank_metric must be one of {sorted(METRICS)}")

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "SlshConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise InvalidParameter(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def outer_specs(self) -> list[HashSpec]:
        """The ``L_out`` outer hash specs every node must share."""
        stream = child_seed(self.master_seed, _OUTER_STREAM)
        return [
            HashSpec(Family.L1_BIT_SAMPLE, child_seed(stream, t), self.m_out, self.d)
            for t in range(self.L_out)
        ]

    def inner_hashes(self, table_index: int) -> list[ComposedHash]:
        """Cosine hashes for the inner layers under outer table ``table_index``."""
        stream = child_seed(child_seed(self.master_seed, _INNER_STREAM), table_index)
        return [
            derive_composed_hash(Family.COSINE_PROJECTION, child_seed(stream, j), self.m_in, self.d)
            for j in range(self.L_in)
        ]


@dataclass
class InnerLayer:
    hashes: list[ComposedHash]
    tables: list[dict[BucketKey, np.ndarray]]
    population: np.ndarray


@dataclass
class OuterTable:
    """One outer table; bucket members are row positions in the slice."""

    hash: ComposedHash
    buckets: dict[BucketKey, np.ndarray]
    inner: dict[BucketKey, InnerLayer] = field(default_factory=dict)
    index: int = 0


@dataclass
class QueryStats:
    comparisons_per_processor: list[int]
    candidates_unique: int = 0
    inner_layer_hits: int = 0

    @property
    def max_comparisons(self) -> int:
        return max(self.comparisons_per_processor, default=0)

    @classmethod
    def combine(cls, parts: Iterable["QueryStats"]) -> "QueryStats":
        out = cls([])
        for s in parts:
            out.comparisons_per_processor.extend(s.comparisons_per_processor)
            out.candidates_unique += s.candidates_unique
            out.inner_layer_hits += s.inner_layer_hits
        return out


def _as_pointset(points: PointSet | Sequence[LabeledPoint], d: int | None = None) -> PointSet:
    if isinstance(points, PointSet):
        return points
    return PointSet.from_points(list(points), d)


def group_rows(packed: np.ndarray, m: int, rows: np.ndarray) -> dict[BucketKey, np.ndarray]:
    """Group ``rows`` by their packed key rows; members keep ascending order."""
    if len(rows) == 0:
        return {}
    packed = np.ascontiguousarray(packed)
    view = packed.view(np.dtype((np.void, packed.shape[1]))).ravel()
    uniq, inverse = np.unique(view, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    members = np.split(rows[order], bounds)
    return {
        key_from_packed(np.frombuffer(u.tobytes(), dtype=np.uint8), m): rows_
        for u, rows_ in zip(uniq, members)
    }


def build_outer_tables(
    points: PointSet | Sequence[LabeledPoint],
    hashes: Sequence[ComposedHash],
    first_index: int = 0,
) -> list[OuterTable]:
    """Partition the slice into buckets once per hash.

    ``first_index`` numbers the tables globally so inner-layer seeds do not
    depend on how tables are split among workers.
    """
    d = hashes[0].d if hashes else None
    ps = _as_pointset(points, d)
    rows = np.arange(len(ps))
    tables = []
    for offset, h in enumerate(hashes):
        if h.family is not Family.L1_BIT_SAMPLE:
            raise InvalidParameter("outer tables use the l1 bit-sampling family")
        if len(ps) and ps.d != h.d:
            raise InvalidParameter(f"points have dimension {ps.d}, hash expects {h.d}")
        buckets = group_rows(pack_keys(h.bits(ps.features)), h.m, rows) if len(ps) else {}
        tables.append(OuterTable(h, buckets, {}, first_index + offset))
    return tables


def build_inner_layers(
    table: OuterTable,
    features: np.ndarray,
    cfg: SlshConfig,
    n_local: int,
    hashes: Sequence[ComposedHash] | None = None,
) -> OuterTable:
    """Attach an inner cosine layer to every bucket with more than ``alpha * n_local`` points."""
    if not cfg.inner_enabled:
        return dataclasses.replace(table, inner={})
    threshold = cfg.alpha * n_local
    crowded = [key for key, rows in table.buckets.items() if len(rows) > threshold]
    if not crowded:
        return dataclasses.replace(table, inner={})
    if hashes is None:
        hashes = cfg.inner_hashes(table.index)
    inner = {}
    for key in crowded:
        population = table.buckets[key]
        sub = features[population]
        layer_tables = [group_rows(pack_keys(h.bits(sub)), h.m, population) for h in hashes]
        inner[key] = InnerLayer(list(hashes), layer_tables, population)
    return dataclasses.replace(table, inner=inner)


class TableGroup:
    """A set of built tables with their hash parameters stacked for fast querying."""

    def __init__(self, tables: Sequence[OuterTable]):
        self.tables = list(tables)
        ms = {t.hash.m for t in self.tables}
        self._stacked = len(ms) == 1
        if self.tables and self._stacked:
            self._m = ms.pop()
            self._coords = np.stack([t.hash.coords for t in self.tables])
            self._thresholds = np.stack([t.hash.thresholds for t in self.tables])
            self._ceiling = self.tables[0].hash.ceiling
        self._inner_normals: dict[int, np.ndarray] = {}

    def outer_keys(self, query: np.ndarray) -> list[BucketKey]:
        if not self.tables:
            return []
        if not self._stacked:
            return [key_from_packed(pack_keys(t.hash.bits(query)), t.hash.m) for t in self.tables]
        if query.shape[-1] != self.tables[0].hash.d:
            raise InvalidParameter(f"query has dimension {query.shape[-1]}, expected {self.tables[0].hash.d}")
        bits = np.clip(query[self._coords], 0.0, self._ceiling) >= self._thresholds
        return [key_from_packed(row, self._m) for row in pack_keys(bits)]

    def _inner_keys(self, pos: int, layer: InnerLayer, query: np.ndarray) -> list[BucketKey]:
        normals = self._inner_normals.get(pos)
        if normals is None:
            normals = np.concatenate([h.normals for h in layer.hashes])
            self._inner_normals[pos] = normals
        m_in = layer.hashes[0].m
        bits = (normals @ query >= 0.0).reshape(len(layer.hashes), m_in)
        return [key_from_packed(row, m_in) for row in pack_keys(bits)]

    def candidates(self, query: np.ndarray) -> tuple[np.ndarray, int]:
        """Deduplicated candidate rows and the number of inner-layer lookups."""
        query = np.asarray(query, dtype=np.float64)
        found = []
        inner_hits = 0
        for pos, (table, key) in enumerate(zip(self.tables, self.outer_keys(query))):
            bucket = table.buckets.get(key)
            if bucket is None:
                continue
            layer = table.inner.get(key)
            if layer is None:
                found.append(bucket)
                continue
            inner_hits += 1
            for inner_table, inner_key in zip(layer.tables, self._inner_keys(pos, layer, query)):
                rows = inner_table.get(inner_key)
                if rows is not None:
                    found.append(rows)
        if not found:
            return np.zeros(0, dtype=np.int64), inner_hits
        return np.unique(np.concatenate(found)), inner_hits


def candidates_for(query: np.ndarray, tables: Sequence[OuterTable]) -> tuple[np.ndarray, int]:
    return TableGroup(tables).candidates(query)


def scan_candidates(
    query: np.ndarray,
    candidate_rows: np.ndarray,
    points: PointSet,
    K: int,
    metric: str = "l1",
) -> tuple[list[KnnEntry], int]:
    """Rank candidates by distance; returns at most ``K`` entries and the comparison count."""
    if K < 1:
        raise InvalidParameter("K must be >= 1")
    rows = np.unique(np.asarray(candidate_rows, dtype=np.int64))
    if len(rows) == 0:
        return [], 0
    query = np.asarray(query, dtype=np.float64)
    distances = METRICS[metric](points.features[rows], query)
    return top_k(points.ids[rows], distances, points.labels[rows], K), len(rows)


def merge_topk(partials: Iterable[Sequence[KnnEntry]], K: int) -> list[KnnEntry]:
    """Global top-``K`` of several sorted lists; duplicate ids keep their smallest entry."""
    pooled = sorted((KnnEntry(*e) for part in partials for e in part), key=KnnEntry.sort_key)
    out: list[KnnEntry] = []
    seen: set[int] = set()
    for entry in pooled:
        if entry.point_id in seen:
            continue
        seen.add(entry.point_id)
        out.append(entry)
        if len(out) == K:
            break
    return out


class SlshIndex:
    """Single-process SLSH index over a slice; the unit that workers and tests share."""

    def __init__(self, points: PointSet, cfg: SlshConfig, tables: list[OuterTable]):
        self.points = points
        self.cfg = cfg
        self.tables = tables
        self._group = TableGroup(tables)

    @classmethod
    def build(
        cls,
        points: PointSet | Sequence[LabeledPoint],
        cfg: SlshConfig,
        hashes: Sequence[ComposedHash] | None = None,
    ) -> "SlshIndex":
        ps = _as_pointset(points, cfg.d)
        if len(ps) and ps.d != cfg.d:
            raise InvalidParameter(f"points have dimension {ps.d}, config says {cfg.d}")
        if hashes is None:
            hashes = [s.build() for s in cfg.outer_specs()]
        tables = build_outer_tables(ps, hashes)
        tables = [build_inner_layers(t, ps.features, cfg, len(ps)) for t in tables]
        return cls(ps, cfg, tables)

    def candidates(self, query: np.ndarray) -> tuple[np.ndarray, int]:
        return self._group.candidates(query)

    def query(self, query: np.ndarray, K: int | None = None) -> tuple[list[KnnEntry], QueryStats]:
        K = K or self.cfg.K
        rows, hits = self.candidates(query)
        entries, comparisons = scan_candidates(query, rows, self.points, K, self.cfg.rank_metric)
        return entries, QueryStats([comparisons], len(rows), hits)

    # ------------------------------------------------------------ snapshot

    def save(self, path: str | Path) -> None:
        """Write a versioned ``.npz`` snapshot.

        Outer bucket maps are stored verbatim; inner layers are rebuilt from
        their seeds on load, which is deterministic.
        """
        header = {
            "version": SNAPSHOT_VERSION,
            "config": self.cfg.to_json(),
            "hash_specs": [t.hash.spec().to_json() for t in self.tables],
        }
        arrays: dict[str, np.ndarray] = {
            "header": np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8),
            "features": self.points.features,
            "labels": self.points.labels,
            "ids": self.points.ids,
        }
        for t, table in enumerate(self.tables):
            keys = list(table.buckets)
            nbytes = (table.hash.m + 7) // 8
            arrays[f"t{t}_keys"] = np.array(
                [list(k.to_bytes(nbytes, "little") if isinstance(k, int) else k) for k in keys],
                dtype=np.uint8,
            ).reshape(len(keys), nbytes)
            members = [table.buckets[k] for k in keys]
            arrays[f"t{t}_sizes"] = np.array([len(r) for r in members], dtype=np.int64)
            arrays[f"t{t}_rows"] = np.concatenate(members) if members else np.zeros(0, dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "SlshIndex":
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode("utf-8"))
            if header.get("version") != SNAPSHOT_VERSION:
                raise InvalidParameter(f"unsupported snapshot version {header.get('version')}")
            cfg = SlshConfig.from_json(header["config"])
            points = PointSet(data["features"], data["labels"], data["ids"])
            tables = []
            for t, spec in enumerate(header["hash_specs"]):
                h = HashSpec.from_json(spec).build()
                sizes = data[f"t{t}_sizes"]
                members = np.split(data[f"t{t}_rows"], np.cumsum(sizes)[:-1]) if len(sizes) else []
                buckets = {
                    key_from_packed(k, h.m): rows for k, rows in zip(data[f"t{t}_keys"], members)
                }
                tables.append(OuterTable(h, buckets, {}, t))
        tables = [build_inner_layers(t, points.features, cfg, len(points)) for t in tables]
        return cls(points, cfg, tables)
