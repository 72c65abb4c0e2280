"""Propagation speed and infection rate of a run, measured at distance ``u`` from the origin."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .infection import SimState, StepReport
from .mobility import Fleet


@dataclass
class RunResult:
    """Outcome of one simulation run.

    ``tau_u`` is ``None`` when the infection never reached distance ``u``.
    ``infected_at_tau`` counts every infected agent at ``tau_u``; ``in_ball_at_tau``
    counts agents strictly inside the ball; ``infected_in_ball_at_tau`` those both.
    """

    tau_u: float | None
    infected_at_tau: int
    in_ball_at_tau: int
    infected_in_ball_at_tau: int
    u: float
    seed: int
    params: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    n_agents: int = 0
    steps: int = 0
    isolation_events: int = 0

    @property
    def reached(self) -> bool:
        return self.tau_u is not None

    @property
    def infected_outside_ball(self) -> int:
        return self.infected_at_tau - self.infected_in_ball_at_tau


def _segment_crossing(p0: np.ndarray, w: np.ndarray, center: np.ndarray, u: float, length: np.ndarray):
    """Earliest ``s`` in ``[0, length]`` with ``|p0 + w s - center| >= u``; ``inf`` if none.

    Distance to a point is convex along a segment, so only the endpoints need
    checking before solving the quadratic for the exact crossing.
    """
    q = p0 - center
    c = np.einsum("ij,ij->i", q, q) - u * u
    out = np.full(len(p0), np.inf)
    already = c >= 0
    out[already] = 0.0
    end = q + w * length[:, None]
    later = ~already & (np.einsum("ij,ij->i", end, end) >= u * u)
    if np.any(later):
        A = np.einsum("ij,ij->i", w[later], w[later])
        B = 2 * np.einsum("ij,ij->i", q[later], w[later])
        disc = np.sqrt(np.maximum(B * B - 4 * A * c[later], 0.0))
        s = (-B + disc) / (2 * A)
        out[later] = np.clip(s, 0.0, length[later])
    return out


def first_exit_time(fleet: Fleet, agents, legs, lower, upper, center, u) -> tuple[float, int]:
    """Earliest time in ``[lower_a, upper]`` an agent on one of the given legs is at distance ``>= u``.

    ``agents``/``legs`` are parallel arrays of leg indices into ``fleet``;
    ``lower`` gives a per-row start time. Returns ``(time, agent)``, or ``(inf, -1)``.
    """
    agents = np.asarray(agents, dtype=np.int64)
    if not len(agents):
        return math.inf, -1
    edge, tin, tout, off, nu = fleet.leg_arrays(np.asarray(legs, dtype=np.int64))
    a = np.maximum(tin, lower)
    b = np.minimum(tout, upper)
    ok = a <= b
    if not np.any(ok):
        return math.inf, -1
    agents, edge, tin, off, nu, a, b = (x[ok] for x in (agents, edge, tin, off, nu, a, b))
    S = fleet.S
    L = S.lengths[edge]
    d0 = np.clip(off + nu * (a - tin), 0.0, L)
    p0 = S.xy(edge, d0).reshape(-1, 2)
    vec = S.vertices[S.edges[edge, 1]] - S.vertices[S.edges[edge, 0]]
    w = vec / L[:, None] * nu[:, None]
    s = _segment_crossing(p0, w, np.asarray(center, dtype=float), u, b - a)
    times = a + s
    k = int(np.argmin(times))
    if not math.isfinite(times[k]):
        return math.inf, -1
    best = times[k]
    # lowest agent id among simultaneous crossings
    return float(best), int(agents[times == best].min())


class TauTracker:
    """Detects the first time an infected agent is at distance ``>= u`` from the origin's start.

    ``count_origin`` decides whether the origin's own displacement counts.
    Call :meth:`update` after every :func:`~d2d_malware.infection.step`.
    """

    def __init__(self, state: SimState, u: float, count_origin: bool = False):
        if not u > 0:
            raise ValueError(f"u must be positive, got {u}")
        self.state = state
        self.u = u
        self.count_origin = count_origin
        self.center = state.fleet.positions()[state.origin].copy()
        self.tau: float | None = None
        self.agent: int | None = None

    def _eligible(self, agents: np.ndarray, t: float) -> np.ndarray:
        ok = self.state.T[agents] <= t
        if not self.count_origin:
            ok &= agents != self.state.origin
        return ok

    def update(self, report: StepReport) -> float | None:
        if self.tau is not None:
            return self.tau
        state, fleet = self.state, self.state.fleet
        t, t_prev = report.t, report.t_prev
        ea, el = report.exit_agents, report.exit_legs
        cur_agents = np.arange(state.n)
        agents = np.concatenate([ea, cur_agents])
        legs = np.concatenate([el, fleet.cur])
        keep = self._eligible(agents, t)
        agents, legs = agents[keep], legs[keep]
        lower = np.maximum(state.T[agents], t_prev)
        tau, who = first_exit_time(fleet, agents, legs, lower, t, self.center, self.u)
        if math.isfinite(tau):
            self.tau, self.agent = tau, who
        return self.tau

    def counts_at_tau(self, report: StepReport) -> tuple[int, int, int]:
        """``(infected, in_open_ball, infected_in_open_ball)`` at the detected ``tau``."""
        if self.tau is None:
            raise ValueError("tau not reached")
        state, fleet = self.state, self.state.fleet
        agents = np.concatenate([report.exit_agents, np.arange(state.n)])
        legs = np.concatenate([report.exit_legs, fleet.cur])
        xy = positions_at(fleet, agents, legs, self.tau)
        infected = state.T <= self.tau
        d = np.hypot(*(xy - self.center).T)
        in_ball = d < self.u
        return int(infected.sum()), int(in_ball.sum()), int((in_ball & infected).sum())


def positions_at(fleet: Fleet, agents: np.ndarray, legs: np.ndarray, t: float) -> np.ndarray:
    """Planar position of every agent at time ``t`` given candidate legs per agent.

    The first listed leg covering ``t`` wins, matching the rule that an agent
    on a boundary stays on the leg it is finishing.
    """
    edge, tin, tout, off, nu = fleet.leg_arrays(legs)
    cover = (tin <= t) & (t <= tout)
    xy = np.full((fleet.n, 2), np.nan)
    rows = np.flatnonzero(cover)
    first = np.unique(agents[rows], return_index=True)[1]
    rows = rows[first]
    who = agents[rows]
    d = np.clip(off[rows] + nu[rows] * (t - tin[rows]), 0.0, fleet.S.lengths[edge[rows]])
    xy[who] = fleet.S.xy(edge[rows], d).reshape(-1, 2)
    if np.isnan(xy).any():
        raise RuntimeError(f"no leg covers t={t} for some agents")
    return xy


def tau_u_from_trace(fleet: Fleet, T: np.ndarray, origin: int, u: float, *,
                     count_origin: bool = False) -> float | None:
    """Exact ``tau_u`` from a recorded fleet (``record=True``) and final infection times."""
    if fleet._blocks is None:
        raise RuntimeError("needs a fleet built with record=True")
    center = fleet.S.xy(fleet.base_edge[origin:origin + 1], fleet.base_offset[origin:origin + 1]).reshape(2)
    agents, legs = [], []
    for i in np.flatnonzero(T <= fleet.time).tolist():
        if i == origin and not count_origin:
            continue
        for a, b in fleet._blocks[i]:
            agents.append(np.full(b - a, i))
            legs.append(np.arange(a, b))
    if not agents:
        return None
    agents = np.concatenate(agents)
    legs = np.concatenate(legs)
    tau, _ = first_exit_time(fleet, agents, legs, T[agents], fleet.time, center, u)
    return tau if math.isfinite(tau) else None


def propagation_speed(results: Sequence[RunResult], u: float | None = None) -> tuple[float, int]:
    """``u`` times the mean of ``1/tau_u`` over runs, in km/h, and the not-reached count.

    Runs that never reach ``u`` contribute zero speed.
    """
    if not results:
        raise ValueError("propagation_speed needs at least one result")
    inv = []
    missed = 0
    for res in results:
        uu = res.u if u is None else u
        if res.tau_u is None:
            inv.append(0.0)
            missed += 1
        else:
            inv.append(uu / (res.tau_u / 3600.0))
    return float(np.mean(inv)), missed


@dataclass(frozen=True)
class InfectionRate:
    raw: float
    in_ball: float
    no_propagation: bool


def infection_rate(result: RunResult) -> InfectionRate:
    """Infected count over the number of agents inside the open ball at ``tau_u``.

    ``raw`` uses every infected agent as numerator; ``in_ball`` only those inside
    the ball, so it never exceeds one.
    """
    if not result.reached:
        return InfectionRate(0.0, 0.0, True)
    den = result.in_ball_at_tau
    if den == 0:
        return InfectionRate(math.inf if result.infected_at_tau else 0.0, 0.0, False)
    return InfectionRate(result.infected_at_tau / den, result.infected_in_ball_at_tau / den, False)
