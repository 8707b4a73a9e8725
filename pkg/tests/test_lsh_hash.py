import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from dslsh.lsh_hash import (
    BitSampleFunction,
    ComposedHash,
    Family,
    HashSpec,
    InvalidParameter,
    RandomProjectionFunction,
    SensitivityParams,
    collision_probability_estimate,
    cosine_collision_law,
    derive_composed_hash,
    hash_point,
    hash_points,
    l1_collision_law,
    mix64,
    splitmix_draws,
)


def test_splitmix_reference_output():
    # first output of the reference SplitMix64 generator seeded with 0
    assert mix64(0x9E3779B97F4A7C15) == 0xE220A8397B1DCDAF
    draws = splitmix_draws(np.array([0], dtype=np.uint64), 2)
    assert int(draws[0, 0]) == 0xE220A8397B1DCDAF
    assert int(draws[0, 1]) == mix64(2 * 0x9E3779B97F4A7C15 % 2**64)


def test_derive_is_deterministic():
    a = derive_composed_hash(Family.L1_BIT_SAMPLE, 7, 3, 30)
    b = derive_composed_hash("L1BitSample", 7, 3, 30)
    assert a == b
    assert a.components == b.components
    assert len(a.components) == 3


def test_cosine_single_component_in_two_dims():
    a = derive_composed_hash(Family.COSINE_PROJECTION, 1, 1, 2)
    b = derive_composed_hash(Family.COSINE_PROJECTION, 1, 1, 2)
    assert len(a.components) == 1
    assert len(a.components[0].normal) == 2
    assert a.components == b.components


def test_components_are_prefix_stable():
    short = derive_composed_hash(Family.L1_BIT_SAMPLE, 99, 4, 30)
    long = derive_composed_hash(Family.L1_BIT_SAMPLE, 99, 9, 30)
    assert long.components[:4] == short.components


@pytest.mark.parametrize("m,d", [(0, 30), (3, 0)])
def test_derive_rejects_empty(m, d):
    with pytest.raises(InvalidParameter):
        derive_composed_hash(Family.L1_BIT_SAMPLE, 1, m, d)


def test_bit_sample_coordinate_uniformity():
    counts = np.zeros(30, dtype=int)
    for seed in range(100_000):
        counts[derive_composed_hash(Family.L1_BIT_SAMPLE, seed, 1, 30).coords[0]] += 1
    assert chisquare(counts).pvalue > 0.001


def test_bit_sample_threshold_definition():
    h = ComposedHash.from_components([BitSampleFunction(0, 100.0)], d=3)
    assert hash_point(h, [120, 0, 0]) == 1
    assert hash_point(h, [80, 0, 0]) == 0


def test_cosine_sign_definition():
    h = ComposedHash.from_components([RandomProjectionFunction((1.0, 0.0))], d=2)
    assert hash_point(h, [5, 3]) == 1
    assert hash_point(h, [-5, 3]) == 0
    assert hash_point(h, [0, 3]) == 1  # zero dot product hashes to 1


def test_key_packing_is_little_endian():
    h = ComposedHash.from_components(
        [BitSampleFunction(0, 100.0), BitSampleFunction(1, 100.0), BitSampleFunction(2, 100.0)], d=3
    )
    assert hash_point(h, [150, 50, 150]) == 0b101


def test_wide_keys_become_bytes():
    h = derive_composed_hash(Family.L1_BIT_SAMPLE, 3, 200, 30)
    key = hash_point(h, np.full(30, 125.0))
    assert isinstance(key, bytes) and len(key) == 25
    narrow = derive_composed_hash(Family.L1_BIT_SAMPLE, 3, 128, 30)
    assert isinstance(hash_point(narrow, np.full(30, 125.0)), int)


def test_hash_point_dimension_mismatch():
    h = derive_composed_hash(Family.L1_BIT_SAMPLE, 3, 4, 30)
    with pytest.raises(InvalidParameter):
        hash_point(h, np.zeros(29))


def test_repeated_evaluation_is_stable():
    rng = np.random.default_rng(5)
    xs = rng.uniform(0, 250, (10_000, 30))
    for seed in range(10_000):
        family = Family.L1_BIT_SAMPLE if seed % 2 else Family.COSINE_PROJECTION
        h = derive_composed_hash(family, seed, 4, 30)
        x = xs[seed]
        assert hash_point(h, x) == hash_point(h, x)


def test_batch_matches_single():
    rng = np.random.default_rng(6)
    xs = rng.uniform(0, 250, (50, 30))
    h = derive_composed_hash(Family.L1_BIT_SAMPLE, 12, 20, 30)
    assert hash_points(h, xs) == [hash_point(h, x) for x in xs]


def test_spec_round_trip_regenerates_identical_keys():
    rng = np.random.default_rng(8)
    xs = rng.uniform(0, 250, (1000, 30))
    for family in Family:
        h = derive_composed_hash(family, 2**63 + 17, 24, 30)
        spec = HashSpec.from_json(h.spec().to_json())
        again = spec.build()
        assert again == h
        assert hash_points(again, xs) == hash_points(h, xs)


def test_spec_validation():
    good = HashSpec(Family.L1_BIT_SAMPLE, 1, 2, 3).to_json()
    with pytest.raises(InvalidParameter):
        HashSpec.from_json({**good, "extra": 1})
    with pytest.raises(InvalidParameter):
        HashSpec.from_json({**good, "seed": -1})
    with pytest.raises(InvalidParameter):
        HashSpec.from_json({**good, "family": "Euclidean"})


def test_sensitivity_params_invariants():
    SensitivityParams(r=10.0, c=2.0, p1=0.9, p2=0.5)
    with pytest.raises(InvalidParameter):
        SensitivityParams(r=10.0, c=2.0, p1=0.5, p2=0.9)
    with pytest.raises(InvalidParameter):
        SensitivityParams(r=10.0, c=0.5, p1=0.9, p2=0.5)
    with pytest.raises(InvalidParameter):
        SensitivityParams(r=0.0, c=2.0, p1=0.9, p2=0.5)


def test_identical_points_always_collide():
    x = np.linspace(10, 200, 30)
    for family in Family:
        assert collision_probability_estimate(family, x, x, 1000) == 1.0


def test_cosine_orthogonal_collision_rate():
    est = collision_probability_estimate(Family.COSINE_PROJECTION, [1, 0], [0, 1], 100_000)
    assert abs(est - (1 - (math.pi / 2) / math.pi)) <= 0.01


def test_l1_collision_rate_one_dimension():
    est = collision_probability_estimate(Family.L1_BIT_SAMPLE, [100], [150], 100_000)
    assert abs(est - (1 - 50 / 250)) <= 0.01


def test_l1_collision_law_clamps():
    assert l1_collision_law([300.0], [250.0]) == 1.0
    assert l1_collision_law([-5.0], [0.0]) == 1.0


def test_composition_collides_iff_all_components_collide():
    rng = np.random.default_rng(9)
    h = derive_composed_hash(Family.L1_BIT_SAMPLE, 77, 6, 30)
    for _ in range(500):
        x, y = rng.uniform(0, 250, (2, 30))
        bits_equal = np.array_equal(h.bits(x), h.bits(y))
        assert (hash_point(h, x) == hash_point(h, y)) == bits_equal


def test_collision_rate_non_increasing_in_m():
    rng = np.random.default_rng(10)
    x = rng.uniform(0, 250, 30)
    y = x + rng.normal(0, 20, 30)
    rates = []
    for m in (1, 2, 4, 8):
        hits = sum(
            hash_point(h := derive_composed_hash(Family.L1_BIT_SAMPLE, s, m, 30), x) == hash_point(h, y)
            for s in range(10_000)
        )
        rates.append(hits / 10_000)
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[0] == pytest.approx(l1_collision_law(x, y), abs=0.02)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
    st.floats(1e-3, 1e3),
    st.integers(0, 2**64 - 1),
)
def test_cosine_hash_is_scale_invariant(x, alpha, seed):
    h = derive_composed_hash(Family.COSINE_PROJECTION, seed, 8, 4)
    x = np.array(x)
    scaled = alpha * x
    # skip vectors whose scaled dot products straddle zero only through rounding
    dots = h.normals @ x
    if np.any((dots != 0) & (np.abs(dots) < 1e-9 * (np.abs(h.normals) @ np.abs(x) + 1))):
        return
    assert hash_point(h, scaled) == hash_point(h, x)


def test_cosine_law_reference():
    assert cosine_collision_law([1, 0], [0, 1]) == pytest.approx(0.5)
    assert cosine_collision_law([1, 1], [2, 2]) == pytest.approx(1.0)
