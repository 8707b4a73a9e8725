"""Per-beat MAP waveforms to labeled lag-window datasets.

Waveform files are CSV with header ``t_s,map_mmhg`` (one row per beat).
A dataset row holds ``d`` subwindow mean-MAP features of a lag window plus
the AHE label of the condition window that follows it.

Beat validity here is a simplified plausibility predicate (MAP within
20-200 mmHg, inter-beat interval within 0.3-2.0 s), not a full beat
quality assessment.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .points import LabeledPoint, write_dataset

log = logging.getLogger(__name__)

MAP_MIN = 20.0
MAP_MAX = 200.0
IBI_MIN = 0.3
IBI_MAX = 2.0


class BeatRecord(NamedTuple):
    t: float
    map: float
    valid: bool = True


class WindowRejected(Exception):
    """The window cannot be featurised or labeled (no valid beats somewhere)."""


@dataclass(frozen=True)
class WindowSpec:
    l: float  # lag window, seconds
    c: float  # condition window, seconds
    d: int = 30
    ahe_threshold_mmhg: float = 60.0
    ahe_fraction: float = 0.90
    step_fraction: float = 0.10

    def __post_init__(self) -> None:
        if self.l <= 0 or self.c <= 0:
            raise ValueError("lag and condition lengths must be positive")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0 < self.ahe_fraction <= 1:
            raise ValueError("ahe_fraction must lie in (0, 1]")
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must lie in (0, 1]")

    @property
    def span(self) -> float:
        return self.l + self.c

    @property
    def negative_step(self) -> float:
        return self.step_fraction * self.span


@dataclass
class Waveform:
    t: np.ndarray
    map: np.ndarray
    waveform_id: str = ""

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.float64)
        self.map = np.asarray(self.map, dtype=np.float64)
        if self.t.shape != self.map.shape or self.t.ndim != 1:
            raise ValueError("t and map must be 1-d arrays of equal length")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError(f"waveform {self.waveform_id!r}: times must be strictly increasing")
        if not np.all(np.isfinite(self.map)):
            raise ValueError(f"waveform {self.waveform_id!r}: MAP values must be finite")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def end(self) -> float:
        return float(self.t[-1]) if len(self.t) else 0.0

    def valid_mask(self) -> np.ndarray:
        return valid_mask(self.t, self.map)

    def beats(self) -> list[BeatRecord]:
        return [BeatRecord(float(t), float(m), bool(v)) for t, m, v in zip(self.t, self.map, self.valid_mask())]


def is_valid_beat(beat: BeatRecord, prev_beat: BeatRecord | None) -> bool:
    if not MAP_MIN <= beat.map <= MAP_MAX:
        return False
    if prev_beat is None:
        return True
    return IBI_MIN <= beat.t - prev_beat.t <= IBI_MAX


def valid_mask(t: np.ndarray, map_: np.ndarray) -> np.ndarray:
    """Vectorised :func:`is_valid_beat` over a whole record."""
    ok = (map_ >= MAP_MIN) & (map_ <= MAP_MAX)
    if len(t) > 1:
        dt = np.diff(t)
        ok[1:] &= (dt >= IBI_MIN) & (dt <= IBI_MAX)
    return ok


def label_condition_window(beats: Sequence[BeatRecord], spec: WindowSpec | None = None) -> int:
    """1 when at least ``ahe_fraction`` of the valid beats sit below the AHE threshold."""
    spec = spec or WindowSpec(300, 300)
    maps = np.array([b.map for b in beats if b.valid], dtype=np.float64)
    return _label(maps, spec)


def _label(valid_maps: np.ndarray, spec: WindowSpec) -> int:
    if len(valid_maps) == 0:
        raise WindowRejected("condition window has no valid beats")
    below = int(np.count_nonzero(valid_maps < spec.ahe_threshold_mmhg))
    # slack absorbs rounding in ahe_fraction * n, e.g. 0.9 * 30 > 27
    return int(below >= spec.ahe_fraction * len(valid_maps) - 1e-9)


def extract_features(beats: Sequence[BeatRecord], start: float, spec: WindowSpec) -> np.ndarray:
    """Mean valid-beat MAP of each of the ``d`` subwindows of ``[start, start + l)``."""
    t = np.array([b.t for b in beats], dtype=np.float64)
    m = np.array([b.map for b in beats], dtype=np.float64)
    v = np.array([b.valid for b in beats], dtype=bool)
    return _features(t, m, v, start, spec)


def _features(t: np.ndarray, m: np.ndarray, v: np.ndarray, start: float, spec: WindowSpec) -> np.ndarray:
    bounds = start + np.arange(spec.d + 1) * (spec.l / spec.d)
    idx = np.searchsorted(t, bounds, side="left")
    lo, hi = idx[0], idx[-1]
    vm = np.where(v[lo:hi], m[lo:hi], 0.0)
    sums = np.concatenate(([0.0], np.cumsum(vm)))
    counts = np.concatenate(([0], np.cumsum(v[lo:hi])))
    rel = idx - lo
    n = counts[rel[1:]] - counts[rel[:-1]]
    if np.any(n == 0):
        raise WindowRejected("a lag subwindow has no valid beats")
    return (sums[rel[1:]] - sums[rel[:-1]]) / n


@dataclass
class ExtractionReport:
    attempted: int = 0
    rejected: int = 0
    positive: int = 0
    negative: int = 0
    starts: list[float] = field(default_factory=list, repr=False)

    def merge(self, other: "ExtractionReport") -> None:
        self.attempted += other.attempted
        self.rejected += other.rejected
        self.positive += other.positive
        self.negative += other.negative


def rolling_extract(waveform: Waveform, spec: WindowSpec) -> tuple[list[LabeledPoint], ExtractionReport]:
    """Slide the lag+condition window along one record.

    After a negative or rejected window the start moves by
    ``step_fraction * (l + c)``; after a positive one it jumps past the whole
    window. Windows must fit inside the record (end = last beat time).
    """
    report = ExtractionReport()
    points: list[LabeledPoint] = []
    if len(waveform) == 0:
        return points, report
    t, m = waveform.t, waveform.map
    v = waveform.valid_mask()
    end = waveform.end
    start = 0.0
    while start + spec.span <= end:
        report.attempted += 1
        report.starts.append(start)
        try:
            features = _features(t, m, v, start, spec)
            lo, hi = np.searchsorted(t, [start + spec.l, start + spec.span], side="left")
            label = _label(m[lo:hi][v[lo:hi]], spec)
        except WindowRejected:
            report.rejected += 1
            label = 0
        else:
            points.append(LabeledPoint(tuple(features.tolist()), label, source=(waveform.waveform_id, start)))
            if label:
                report.positive += 1
            else:
                report.negative += 1
        start += spec.span if label else spec.negative_step
    return points, report


# ------------------------------------------------------------------- files


def read_waveform(path: str | os.PathLike) -> Waveform:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != ["t_s", "map_mmhg"]:
        raise ValueError(f"{path}: expected header t_s,map_mmhg")
    return Waveform(frame["t_s"].to_numpy(), frame["map_mmhg"].to_numpy(), Path(path).stem)


def write_waveform(path: str | os.PathLike, waveform: Waveform) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("t_s,map_mmhg\n")
        for t, m in zip(waveform.t, waveform.map):
            fh.write(f"{t:.3f},{m:.2f}\n")


def extract_directory(
    in_dir: str | os.PathLike, spec: WindowSpec, out_path: str | os.PathLike | None = None
) -> tuple[list[LabeledPoint], ExtractionReport]:
    """Run :func:`rolling_extract` over every ``*.csv`` waveform in sorted name order."""
    files = sorted(Path(in_dir).glob("*.csv"))
    points: list[LabeledPoint] = []
    report = ExtractionReport()
    for path in files:
        pts, rep = rolling_extract(read_waveform(path), spec)
        points.extend(pts)
        report.merge(rep)
    log.info("extracted %d points from %d waveforms (%d rejected)", len(points), len(files), report.rejected)
    if out_path is not None:
        write_dataset(out_path, points)
    return points, report


# --------------------------------------------------------------- synthetic

BASELINE_LOW = 65.0
BASELINE_HIGH = 110.0
DIP_LEVEL = 50.0


def synthesize_waveform(
    rng: np.random.Generator,
    duration_s: float,
    ahe_rate: float,
    block_s: float = 300.0,
    waveform_id: str = "",
) -> Waveform:
    """One ABP-like per-beat MAP record.

    Beats arrive at ~1 Hz with jitter. The baseline is a mean-reverting walk
    clipped to [65, 110] mmHg. Each ``block_s`` block after the first two
    starts a hypotensive episode with probability ``ahe_rate``: MAP declines
    over one block, then stays below 60 mmHg for 1-4 blocks and recovers
    over one block. About 0.2% of beats are artifact spikes that fail the
    validity predicate.
    """
    if not 0.0 <= ahe_rate <= 1.0:
        raise ValueError("ahe_rate must lie in [0, 1]")
    n_est = int(duration_s * 1.1) + 16
    t = np.cumsum(rng.uniform(0.8, 1.2, n_est))
    t = t[t < duration_s] - t[0]
    n = len(t)
    walk = lfilter([1.0], [1.0, -0.999], rng.normal(0.0, 0.35, n))
    centre = rng.uniform(75.0, 100.0)
    baseline = np.clip(centre + walk, BASELINE_LOW, BASELINE_HIGH)
    weight = np.zeros(n)
    n_blocks = int(duration_s // block_s)
    block = 2
    while block < n_blocks:
        if rng.random() < ahe_rate:
            onset = block * block_s
            dip = rng.uniform(1.0, 4.0) * block_s
            fall = (t >= onset - block_s) & (t < onset)
            weight[fall] = np.maximum(weight[fall], (t[fall] - (onset - block_s)) / block_s * 0.6)
            weight[(t >= onset) & (t < onset + dip)] = 1.0
            rise = (t >= onset + dip) & (t < onset + dip + block_s)
            weight[rise] = np.maximum(weight[rise], 1.0 - (t[rise] - onset - dip) / block_s)
            block += int(np.ceil((dip + block_s) / block_s)) + 1
        else:
            block += 1
    noise = rng.normal(0.0, 2.0, n)
    map_ = (1.0 - weight) * baseline + weight * DIP_LEVEL + noise
    map_ = np.where(weight >= 1.0, np.minimum(map_, 59.0), map_)
    spikes = rng.random(n) < 0.002
    map_[spikes] = rng.uniform(210.0, 240.0, int(spikes.sum()))
    return Waveform(np.round(t, 3), np.round(map_, 2), waveform_id)


def generate_synthetic(
    seed: int,
    n_waveforms: int,
    duration_s: float,
    ahe_rate: float,
    out_dir: str | os.PathLike | None = None,
    block_s: float = 300.0,
) -> list[Waveform]:
    """Deterministic synthetic records; written as ``wf_00000.csv``... when ``out_dir`` is given."""
    children = np.random.SeedSequence(seed).spawn(n_waveforms)
    waves = [
        synthesize_waveform(np.random.default_rng(child), duration_s, ahe_rate, block_s, f"wf_{i:05d}")
        for i, child in enumerate(children)
    ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for w in waves:
            write_waveform(out / f"{w.waveform_id}.csv", w)
    return waves
