from __future__ import annotations

import numpy as np
import pytest

from dslsh.points import PointSet, write_dataset


def uniform_points(n: int, d: int = 30, seed: int = 0, high: float = 250.0) -> PointSet:
    rng = np.random.default_rng(seed)
    return PointSet.from_arrays(rng.uniform(0.0, high, (n, d)), rng.integers(0, 2, n))


def clustered_points(n: int, d: int = 30, clusters: int = 50, spread: float = 6.0, seed: int = 0) -> PointSet:
    """Gaussian blobs around centres in [40, 200]^d; label is the parity of the blob index."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(40.0, 200.0, (clusters, d))
    which = rng.integers(0, clusters, n)
    x = np.clip(centres[which] + rng.normal(0.0, spread, (n, d)), 0.0, 250.0)
    return PointSet.from_arrays(x, which % 2)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> tuple[str, PointSet]:
    ps = uniform_points(2000, seed=11)
    path = tmp_path_factory.mktemp("data") / "small.csv"
    write_dataset(path, ps)
    return str(path), ps


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
