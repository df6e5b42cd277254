import numpy as np
import pytest

from maxwellpi.basis import FovGrid, compute_basis, place_boundary_dipoles, sample_random_fields


@pytest.fixture(scope="session")
def grid64():
    return FovGrid.create((64, 64), (220, 220))


@pytest.fixture(scope="session")
def samples64(grid64):
    dip = place_boundary_dipoles(grid64)
    return sample_random_fields(dip, grid64, 250, seed=7)


@pytest.fixture(scope="session")
def basis64(samples64, grid64):
    return compute_basis(samples64, 200, grid64)


@pytest.fixture(scope="session")
def small_basis():
    """16 x 16 grid, q = 12; cheap enough for dense oracles."""
    g = FovGrid.create((16, 16), (200, 200))
    s = sample_random_fields(place_boundary_dipoles(g), g, 40, seed=1)
    return compute_basis(s, 12, g)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
