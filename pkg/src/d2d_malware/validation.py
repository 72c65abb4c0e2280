"""Self-checks behind ``d2d-sim validate``: geometry statistics and engine cross-checks.

Each suite yields ``(description, passed)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Iterator

import numpy as np
from scipy.stats import ks_2samp

from .harness import ParameterSet, RunSeeds, build_state
from .infection import connection_interval_arrays, contact_pairs, step
from .street_system import generate_street_system, interior_lengths, length_density, unit_length_pool

Check = Iterator[tuple[str, bool]]


def geometry(seed: int = 0, quick: bool = False) -> Check:
    pool = unit_length_pool() if not quick else interior_lengths(generate_street_system(1.0, 60.0, seed))
    mean, var = float(pool.mean()), float(pool.var())
    yield f"unit mean edge length {mean:.4f} vs 2/3 (2%)", abs(mean - 2 / 3) <= 0.02 * 2 / 3
    yield f"unit edge length variance {var:.4f} vs 0.1856 (5%)", abs(var - 0.1856) <= 0.05 * 0.1856
    for lam in (1.0, 50.0):
        H = (60.0 if quick else 150.0) / math.sqrt(lam)
        S = generate_street_system(lam, H, seed + 1)
        ratio = length_density(S) / (2 * math.sqrt(lam))
        yield f"length density / 2 sqrt(lambda) at lambda={lam:g}: {ratio:.4f} (3%)", abs(ratio - 1) <= 0.03


def scaling(seed: int = 0, quick: bool = False) -> Check:
    H = 40.0 if quick else 80.0
    l1 = interior_lengths(generate_street_system(1.0, H, seed))
    l4 = interior_lengths(generate_street_system(4.0, H / 2, seed + 1))
    p = ks_2samp(l1 / 2, l4).pvalue
    yield f"KS lambda=4 vs unit lengths / 2: p={p:.3f} (> 0.01)", p > 0.01
    for n in (1, 2):
        a, b = float(np.mean(l4**n)), float(np.mean(l1**n)) / 4 ** (n / 2)
        yield f"moment {n}: {a:.5f} vs {b:.5f} (3%)", abs(a / b - 1) <= 0.03


def contacts(seed: int = 0, quick: bool = False) -> Check:
    """Connection intervals against a 10 ms time scan of pairs on a common street."""
    rng = np.random.default_rng(seed)
    n = 100 if quick else 1000
    worst = 0.0
    r = 0.2
    for _ in range(n):
        L = rng.uniform(0.3, 2.0)
        speeds = rng.uniform(1, 60, 2) / 3600 * rng.choice([-1, 1], 2)
        t = 100.0
        d = rng.uniform(0, L, 2)
        d[1] = np.clip(d[0] + rng.uniform(-r, r), 0, L)
        tin = t - np.where(speeds > 0, d, L - d) / np.abs(speeds) * rng.uniform(0, 1, 2)
        tout = t + np.where(speeds > 0, L - d, d) / np.abs(speeds) * rng.uniform(0, 1, 2)
        a, b = connection_interval_arrays(t, d[0], d[1], speeds[0], speeds[1], tin[0], tin[1],
                                          tout[0], tout[1], r)
        grid = np.arange(max(tin.max(), t - 2000.0), min(tout.min(), t + 2000.0), 0.01)
        x = d[:, None] + speeds[:, None] * (grid - t)
        on = np.abs(x[0] - x[1]) <= r
        # contiguous run containing t
        k = int(np.searchsorted(grid, t))
        k = min(max(k, 0), len(grid) - 1)
        lo = k
        while lo > 0 and on[lo - 1]:
            lo -= 1
        hi = k
        while hi < len(grid) - 1 and on[hi + 1]:
            hi += 1
        worst = max(worst, abs(grid[lo] - a), abs(grid[hi] - b))
    yield f"{n} connection intervals vs 10 ms scan: worst endpoint error {worst * 1e3:.1f} ms (<= 20 ms)", worst <= 0.02


def neighbors(seed: int = 0, quick: bool = False) -> Check:
    bad = 0
    seeds = range(seed, seed + (10 if quick else 100))
    for s in seeds:
        state = build_state(ParameterSet(lam=50, H=1.2, theta=20, v=5, u=0.5), RunSeeds(s, s + 1, s + 2))
        state.fleet.advance_to(state.dt)
        edge, off, *_ = state.fleet.current()
        xy = state.fleet.positions()
        n = state.n
        i, j = contact_pairs(state, np.arange(n))
        fast = set(zip(i.tolist(), j.tolist()))
        dist = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
        same = edge[:, None] == edge[None, :]
        slow = {(a, b) for a, b in zip(*np.nonzero(same & (dist <= state.r + 1e-12))) if a != b}
        bad += fast != slow
    yield f"indexed neighbour search equals pairwise scan on {len(seeds)} instances", bad == 0


def discretization(seed: int = 0, quick: bool = False) -> Check:
    n = 5 if quick else 50
    mismatches = 0
    worst = 0.0
    for s in range(seed, seed + n):
        seeds = RunSeeds(s, s + 1000, s + 2000)
        base = ParameterSet(lam=50, H=2.0, theta=5, v=10, rho=20, u=0.9)
        coarse = build_state(replace(base, dt=18.0), seeds)
        fine = build_state(replace(base, dt=1.8), seeds)
        horizon = 3600.0
        while coarse.time < horizon:
            step(coarse)
        while fine.time < horizon - 1e-9:
            step(fine)
        a, b = coarse.T <= horizon, fine.T <= horizon
        mismatches += int(np.any(a != b))
        if np.any(a & b):
            worst = max(worst, float(np.max(np.abs(coarse.T[a & b] - fine.T[a & b]))))
    yield f"dt=0.9 rho vs dt=0.09 rho on {n} instances: {mismatches} differing infection sets", mismatches == 0
    yield f"largest infection-time difference {worst:.2e} s (<= 1e-6)", worst <= 1e-6


SUITES = {
    "geometry": geometry,
    "scaling": scaling,
    "contacts": contacts,
    "neighbors": neighbors,
    "discretization": discretization,
}
