from __future__ import annotations

import numpy as np
import pytest

from d2d_malware.infection import SimState
from d2d_malware.mobility import Fleet
from d2d_malware.street_system import from_segments, generate_street_system


@pytest.fixture(scope="session")
def small_map():
    """A 2 km window at lambda=50: a few hundred edges."""
    return generate_street_system(50.0, 2.0, 7)


@pytest.fixture(scope="session")
def medium_map():
    return generate_street_system(50.0, 4.0, 11)


@pytest.fixture
def line_map():
    """A single 2 km street along the x axis."""
    return from_segments([[0.0, 0.0], [2.0, 0.0]], [[0, 1]], H=2.0)


def grid_map(n: int = 3, step: float = 1.0):
    """Square lattice of ``n x n`` vertices; edges numbered row-major, horizontals first."""
    xs = np.arange(n) * step
    verts = np.array([(x, y) for y in xs for x in xs])
    edges = []
    for row in range(n):
        for col in range(n - 1):
            a = row * n + col
            edges.append((a, a + 1))
    for row in range(n - 1):
        for col in range(n):
            a = row * n + col
            edges.append((a, a + n))
    return from_segments(verts, edges, H=float(xs[-1]))


def line_state(starts, dests, *, speed=5.0, origin=0, dt=18.0, rho=20.0, r=0.2, length=10.0):
    """Agents on one straight street, each shuttling between its start and a fixed destination."""
    S = from_segments([[0.0, 0.0], [length, 0.0]], [[0, 1]], H=length)
    dests = list(dests)
    fleet = Fleet(S, np.zeros(len(starts), int), starts, speed, 0,
                  destination_fn=lambda f, i: (0, dests[i]))
    return SimState(S, fleet, origin, dt, rho, r)
