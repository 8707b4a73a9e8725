"""Seed-deterministic LSH families and their m-fold composition.

Two families are provided:

* ``L1BitSample``: bit sampling for the l1 norm, realised as the thresholded
  test ``x[coord] >= threshold`` on coordinates clamped to ``[0, C]``.
* ``CosineProjection``: sign of the dot product with a Gaussian normal.

Every component is derived from a 64-bit seed with SplitMix64 so that a
composed hash can be shipped as ``(family, seed, m, d, C)`` and regenerated
bit-for-bit on the receiving side.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Sequence, Union

import numpy as np

CEILING_MMHG = 250.0

GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_INT_KEY_MAX_BITS = 128

BucketKey = Union[int, bytes]


class InvalidParameter(ValueError):
    """Raised for malformed hash parameters or mismatched dimensions."""


class Family(str, enum.Enum):
    L1_BIT_SAMPLE = "L1BitSample"
    COSINE_PROJECTION = "CosineProjection"


# ---------------------------------------------------------------- SplitMix64


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def child_seed(seed: int, index: int) -> int:
    """Derive an independent 64-bit seed for the ``index``-th child of ``seed``."""
    return mix64((seed & _MASK) ^ mix64(((index + 1) * GAMMA) & _MASK))


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def component_states(seeds: np.ndarray | int, indices: np.ndarray) -> np.ndarray:
    """SplitMix64 start state of each component: ``seed ^ mix64((i + 1) * GAMMA)``.

    ``seeds`` broadcasts against ``indices``.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        scrambled = _mix64_array((idx + np.uint64(1)) * np.uint64(GAMMA))
    return np.asarray(seeds, dtype=np.uint64) ^ scrambled


def splitmix_draws(states: np.ndarray, n_draws: int) -> np.ndarray:
    """First ``n_draws`` SplitMix64 outputs for each start state, shape ``states.shape + (n_draws,)``."""
    steps = np.arange(1, n_draws + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = states[..., None] + steps * np.uint64(GAMMA)
    return _mix64_array(z)


def draws_to_unit(draws: np.ndarray) -> np.ndarray:
    """Map 64-bit draws onto ``[0, 1)`` using the top 53 bits."""
    return (draws >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _gaussians(states: np.ndarray, d: int) -> np.ndarray:
    """Box-Muller standard normals, ``d`` per state."""
    pairs = (d + 1) // 2
    u = draws_to_unit(splitmix_draws(states, 2 * pairs))
    radius = np.sqrt(-2.0 * np.log1p(-u[..., 0::2]))
    angle = 2.0 * math.pi * u[..., 1::2]
    z = np.empty(u.shape, dtype=np.float64)
    z[..., 0::2] = radius * np.cos(angle)
    z[..., 1::2] = radius * np.sin(angle)
    return z[..., :d]


# ------------------------------------------------------------------- members


@dataclass(frozen=True)
class SensitivityParams:
    """``(r, cr, p1, p2)``-sensitivity of a hash family."""

    r: float
    c: float
    p1: float
    p2: float

    def __post_init__(self) -> None:
        if not self.r > 0:
            raise InvalidParameter("r must be positive")
        if not self.c >= 1:
            raise InvalidParameter("c must be >= 1")
        if not (0.0 <= self.p2 < self.p1 <= 1.0):
            raise InvalidParameter("need 0 <= p2 < p1 <= 1")


@dataclass(frozen=True)
class BitSampleFunction:
    coord: int
    threshold: float


@dataclass(frozen=True)
class RandomProjectionFunction:
    normal: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class ComposedHash:
    """``m`` family members evaluated together into one bucket key.

    Parameters live in numpy arrays (``coords``/``thresholds`` for l1,
    ``normals`` for cosine); :attr:`components` gives the per-member view.
    ``seed`` is ``None`` for hand-built hashes, which cannot be serialised
    as a :class:`HashSpec`.
    """

    family: Family
    d: int
    seed: int | None
    coords: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    normals: np.ndarray | None = None
    ceiling: float = CEILING_MMHG

    @property
    def m(self) -> int:
        if self.family is Family.L1_BIT_SAMPLE:
            return len(self.coords)
        return len(self.normals)

    @property
    def components(self) -> list[BitSampleFunction] | list[RandomProjectionFunction]:
        if self.family is Family.L1_BIT_SAMPLE:
            return [
                BitSampleFunction(int(c), float(t))
                for c, t in zip(self.coords, self.thresholds)
            ]
        return [RandomProjectionFunction(tuple(float(v) for v in row)) for row in self.normals]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ComposedHash):
            return NotImplemented
        if (self.family, self.d, self.seed, self.ceiling) != (
            other.family,
            other.d,
            other.seed,
            other.ceiling,
        ):
            return False
        if self.family is Family.L1_BIT_SAMPLE:
            return np.array_equal(self.coords, other.coords) and np.array_equal(
                self.thresholds, other.thresholds
            )
        return np.array_equal(self.normals, other.normals)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def from_components(
        cls,
        components: Sequence[BitSampleFunction] | Sequence[RandomProjectionFunction],
        d: int,
        ceiling: float = CEILING_MMHG,
    ) -> "ComposedHash":
        """Build a hash from explicit members (fixtures, degenerate configs)."""
        if not components:
            raise InvalidParameter("need at least one component")
        if d < 1:
            raise InvalidParameter("d must be >= 1")
        if all(isinstance(c, BitSampleFunction) for c in components):
            coords = np.array([c.coord for c in components], dtype=np.int64)
            thresholds = np.array([c.threshold for c in components], dtype=np.float64)
            if coords.min() < 0 or coords.max() >= d:
                raise InvalidParameter("coordinate out of range")
            if thresholds.min() < 0 or thresholds.max() >= ceiling:
                raise InvalidParameter("threshold outside [0, C)")
            return cls(Family.L1_BIT_SAMPLE, d, None, coords=coords, thresholds=thresholds, ceiling=ceiling)
        if all(isinstance(c, RandomProjectionFunction) for c in components):
            normals = np.array([c.normal for c in components], dtype=np.float64)
            if normals.shape[1] != d:
                raise InvalidParameter("normal length must equal d")
            if np.any(~normals.any(axis=1)):
                raise InvalidParameter("zero normal vector")
            return cls(Family.COSINE_PROJECTION, d, None, normals=normals, ceiling=ceiling)
        raise InvalidParameter("components must all come from one family")

    def bits(self, x: np.ndarray) -> np.ndarray:
        """Component bits for one point ``(m,)`` or a batch ``(n, m)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise InvalidParameter(f"expected dimension {self.d}, got {x.shape[-1]}")
        if self.family is Family.L1_BIT_SAMPLE:
            clamped = np.clip(x[..., self.coords], 0.0, self.ceiling)
            return clamped >= self.thresholds
        # dot product exactly 0 hashes to 1
        return x @ self.normals.T >= 0.0

    def spec(self) -> "HashSpec":
        if self.seed is None:
            raise InvalidParameter("hand-built hashes have no seed to serialise")
        return HashSpec(self.family, self.seed, self.m, self.d, self.ceiling)


def derive_composed_hash(
    family: Family | str, seed: int, m: int, d: int, ceiling: float = CEILING_MMHG
) -> ComposedHash:
    """Regenerate the ``m`` components of ``family`` from ``seed``.

    Component ``i`` depends only on ``(seed, i)``, so the hash for ``m`` is a
    prefix of the hash for any larger ``m`` with the same seed.
    """
    family = Family(family)
    if m < 1 or d < 1:
        raise InvalidParameter("m and d must be >= 1")
    seed &= _MASK
    states = component_states(np.uint64(seed), np.arange(m))
    if family is Family.L1_BIT_SAMPLE:
        u = draws_to_unit(splitmix_draws(states, 2))
        coords = np.minimum((u[:, 0] * d).astype(np.int64), d - 1)
        thresholds = u[:, 1] * ceiling
        return ComposedHash(family, d, seed, coords=coords, thresholds=thresholds, ceiling=ceiling)
    normals = _gaussians(states, d)
    # a zero normal needs every Box-Muller radius to vanish; reject rather than loop
    if np.any(~normals.any(axis=1)):
        raise InvalidParameter("degenerate normal drawn; choose another seed")
    return ComposedHash(family, d, seed, normals=normals, ceiling=ceiling)


# -------------------------------------------------------------- bucket keys


def pack_keys(bits: np.ndarray) -> np.ndarray:
    """Pack ``(..., m)`` bits little-endian into ``(..., ceil(m/8))`` bytes."""
    return np.packbits(bits, axis=-1, bitorder="little")


def key_from_packed(row: np.ndarray, m: int) -> BucketKey:
    raw = bytes(row)
    if m <= _INT_KEY_MAX_BITS:
        return int.from_bytes(raw, "little")
    return raw


def hash_point(h: ComposedHash, x: Sequence[float] | np.ndarray) -> BucketKey:
    """Bucket key of ``x``: bit ``j`` is component ``j``.

    Keys are integers for ``m <= 128`` and byte strings otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidParameter("hash_point takes a single vector")
    return key_from_packed(pack_keys(h.bits(x)), h.m)


def hash_points(h: ComposedHash, xs: np.ndarray) -> list[BucketKey]:
    packed = pack_keys(h.bits(np.atleast_2d(xs)))
    return [key_from_packed(row, h.m) for row in packed]


# ---------------------------------------------------------- serialisation


@dataclass(frozen=True)
class HashSpec:
    """Wire description of a composed hash; regenerates it exactly."""

    family: Family
    seed: int
    m: int
    d: int
    ceiling: float = CEILING_MMHG

    def to_json(self) -> dict[str, Any]:
        return {"family": self.family.value, "seed": self.seed, "m": self.m, "d": self.d, "C": self.ceiling}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "HashSpec":
        if set(obj) != {"family", "seed", "m", "d", "C"}:
            raise InvalidParameter(f"bad hash spec fields: {sorted(obj)}")
        seed, m, d = obj["seed"], obj["m"], obj["d"]
        for name, v in (("seed", seed), ("m", m), ("d", d)):
            if not isinstance(v, int) or isinstance(v, bool):
                raise InvalidParameter(f"{name} must be an integer")
        if not 0 <= seed <= _MASK:
            raise InvalidParameter("seed must fit in 64 bits")
        ceiling = obj["C"]
        if not isinstance(ceiling, (int, float)) or isinstance(ceiling, bool) or not ceiling > 0:
            raise InvalidParameter("C must be a positive number")
        try:
            family = Family(obj["family"])
        except ValueError as exc:
            raise InvalidParameter(str(exc)) from None
        return cls(family, seed, m, d, float(ceiling))

    def build(self) -> ComposedHash:
        return derive_composed_hash(self.family, self.seed, self.m, self.d, self.ceiling)


def specs_digest(specs: Sequence[HashSpec]) -> str:
    """SHA-256 over the canonical JSON of a list of specs."""
    blob = json.dumps([s.to_json() for s in specs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ------------------------------------------------------------- test support


def collision_probability_estimate(
    family: Family | str,
    x: Sequence[float],
    y: Sequence[float],
    trials: int,
    seed: int = 0,
    ceiling: float = CEILING_MMHG,
) -> float:
    """Fraction of ``trials`` independently derived components on which x and y collide."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidParameter("x and y must be vectors of equal dimension")
    if trials < 1:
        raise InvalidParameter("trials must be >= 1")
    h = derive_composed_hash(family, seed, trials, x.shape[0], ceiling)
    return float(np.mean(h.bits(x) == h.bits(y)))


def l1_collision_law(x: Sequence[float], y: Sequence[float], ceiling: float = CEILING_MMHG) -> float:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, ceiling)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, ceiling)
    return 1.0 - float(np.abs(x - y).sum()) / (x.shape[0] * ceiling)


def cosine_collision_law(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cos = float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))
    return 1.0 - math.acos(max(-1.0, min(1.0, cos))) / math.pi
