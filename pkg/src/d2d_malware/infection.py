"""SI infection engine on top of the mobility fleet.

Two devices are connected while they sit on the same street (line of sight)
within distance ``r``. A susceptible device is infected once it has stayed
connected to an infected one for ``rho`` seconds. The discrete step only
observes positions at multiples of ``dt``; with ``dt < rho`` every qualifying
contact is observed at least once and the exact infection time is recovered
from the constant-velocity connection interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, DiscretizationContractError, InvalidParametersError
from .mobility import Fleet
from .point_process import Placement
from .street_system import StreetSystem

NO_INFECTOR = -1


def connection_interval_arrays(t, d_i, d_j, nu_i, nu_j, tin_i, tin_j, tout_i, tout_j, r):
    """Vectorised connection interval of agent pairs observed connected at time ``t``.

    ``d`` are offsets along the shared edge at ``t`` (km), ``nu`` signed speeds
    (km/s), ``tin``/``tout`` the times the agents enter and leave the edge.
    Returns ``(t_start, t_end)``.
    """
    d_i, d_j, nu_i, nu_j, tin_i, tin_j, tout_i, tout_j = (
        np.asarray(x, dtype=float) for x in (d_i, d_j, nu_i, nu_j, tin_i, tin_j, tout_i, tout_j)
    )
    dnu = nu_i - nu_j
    moving = dnu != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        center = t - (d_i - d_j) / dnu
        half = r / np.abs(dnu)
        start = np.maximum(tin_i, tin_j)
        end = np.minimum(tout_i, tout_j)
        start = np.where(moving, np.maximum(center - half, start), start)
        end = np.where(moving, np.minimum(center + half, end), end)
    return start, end


@dataclass(frozen=True)
class ConnectionInterval:
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class StepReport:
    """What happened during one step: the time window and the legs agents left in it."""

    k: int
    t_prev: float
    t: float
    exit_agents: np.ndarray
    exit_legs: np.ndarray
    new_infections: int


@dataclass
class SimState:
    """The mutable model: fleet positions, infection times and the step counter.

    ``T`` holds first-infection times in seconds (``inf`` while susceptible).
    ``infector`` and ``infect_edge`` record, per agent, the source and street of
    the contact that produced the current value of ``T``.
    """

    S: StreetSystem
    fleet: Fleet
    origin: int
    dt: float
    rho: float
    r: float
    k: int = 0
    T: np.ndarray = field(init=False)
    infector: np.ndarray = field(init=False)
    infect_edge: np.ndarray = field(init=False)
    _index: tuple | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        for name in ("dt", "rho", "r"):
            if not getattr(self, name) > 0:
                raise InvalidParametersError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.dt < self.rho:
            raise DiscretizationContractError(
                f"discretization contract violated: dt={self.dt} must be < rho={self.rho}"
            )
        n = self.fleet.n
        if not 0 <= self.origin < n:
            raise InvalidParametersError(f"origin {self.origin} out of range for {n} agents")
        self.T = np.full(n, np.inf)
        self.T[self.origin] = 0.0
        self.infector = np.full(n, NO_INFECTOR, dtype=np.int64)
        self.infect_edge = np.full(n, -1, dtype=np.int64)
        self.infect_edge[self.origin] = self.fleet.current()[0][self.origin]

    @classmethod
    def from_placement(cls, S: StreetSystem, placement: Placement, speeds_kmh, seed, *,
                       dt: float, rho: float, r: float, record: bool = False) -> "SimState":
        if not dt < rho:
            raise DiscretizationContractError(
                f"discretization contract violated: dt={dt} must be < rho={rho}"
            )
        fleet = Fleet(S, placement.edges, placement.offsets, speeds_kmh, seed, record=record)
        return cls(S, fleet, placement.origin_index, dt, rho, r)

    @property
    def n(self) -> int:
        return self.fleet.n

    @property
    def time(self) -> float:
        return self.fleet.time

    def infected_mask(self, t: float | None = None) -> np.ndarray:
        return self.T <= (self.time if t is None else t)

    # -- per-edge index ----------------------------------------------------------

    def index(self):
        """Agents sorted by (edge, offset) with a search key, rebuilt after each move."""
        if self._index is None or self._index[0] != self.time:
            edge, off, *_ = self.fleet.current()
            order = np.lexsort((np.arange(self.n), off, edge))
            width = float(self.S.lengths.max()) + 2 * self.r + 1.0
            keys = edge[order] * width + off[order]
            self._index = (self.time, order, keys, width, edge, off)
        return self._index[1:]


def _ranges_to_indices(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = hi - lo
    owner = np.repeat(np.arange(len(lo)), counts)
    pos = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + np.repeat(lo, counts)
    return owner, pos


def contact_pairs(state: SimState, sources: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All ``(i, j)`` with ``i`` in ``sources``, ``j != i`` on the same edge and ``|d_i - d_j| <= r``."""
    sources = np.asarray(sources, dtype=np.int64)
    order, keys, width, edge, off = state.index()
    if not len(sources):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    ks = edge[sources] * width + off[sources]
    slack = 1e-9 * (1.0 + np.abs(ks))
    lo = np.searchsorted(keys, ks - state.r - slack, side="left")
    hi = np.searchsorted(keys, ks + state.r + slack, side="right")
    owner, pos = _ranges_to_indices(lo, hi)
    i = sources[owner]
    j = order[pos]
    keep = (j != i) & (edge[j] == edge[i]) & (np.abs(off[j] - off[i]) <= state.r)
    return i[keep], j[keep]


def get_neighbors(state: SimState, i: int) -> np.ndarray:
    """Agents on the same street as ``i`` within distance ``r`` at the current time, sorted by id."""
    _, j = contact_pairs(state, np.array([i]))
    return np.sort(j)


def connection_interval(state: SimState, i: int, j: int) -> ConnectionInterval:
    """Interval during which ``i`` and ``j`` stay connected, from their current legs."""
    edge, off, nu, tin, tout = state.fleet.current()
    if edge[i] != edge[j]:
        raise ContractViolationError(f"agents {i} and {j} are not on a common street")
    if abs(off[i] - off[j]) > state.r:
        raise ContractViolationError(f"agents {i} and {j} are not within range r")
    a, b = connection_interval_arrays(state.time, off[i], off[j], nu[i], nu[j],
                                      tin[i], tin[j], tout[i], tout[j], state.r)
    return ConnectionInterval(float(a), float(b))


def infect_neighbors(state: SimState, i: int, susceptible: np.ndarray | None = None) -> list[int]:
    """Sequential update of the infection times of ``i``'s susceptible neighbours.

    ``susceptible`` is the mask fixed at the start of the step (defaults to
    ``T > now``). Returns the agents whose time was lowered.
    """
    t = state.time
    if susceptible is None:
        susceptible = state.T > t
    Ti = state.T[i]
    changed = []
    for j in get_neighbors(state, i).tolist():
        if not susceptible[j]:
            continue
        ci = connection_interval(state, i, j)
        start = max(ci.start, Ti)
        if ci.end - start >= state.rho:
            cand = start + state.rho
            if cand < state.T[j]:
                state.T[j] = cand
                state.infector[j] = i
                state.infect_edge[j] = state.fleet.current()[0][j]
                changed.append(j)
    return changed


def _infection_update(state: SimState, infected: np.ndarray, susceptible: np.ndarray) -> int:
    """Vectorised equivalent of calling :func:`infect_neighbors` for every infected agent."""
    sources = np.flatnonzero(infected)
    i, j = contact_pairs(state, sources)
    keep = susceptible[j]
    i, j = i[keep], j[keep]
    if not len(i):
        return 0
    edge, off, nu, tin, tout = state.fleet.current()
    a, b = connection_interval_arrays(state.time, off[i], off[j], nu[i], nu[j],
                                      tin[i], tin[j], tout[i], tout[j], state.r)
    start = np.maximum(a, state.T[i])
    ok = b - start >= state.rho
    if not np.any(ok):
        return 0
    i, j, cand = i[ok], j[ok], start[ok] + state.rho
    # lowest candidate per target, ties to the lowest infector id
    order = np.lexsort((i, cand, j))
    i, j, cand = i[order], j[order], cand[order]
    first = np.ones(len(j), dtype=bool)
    first[1:] = j[1:] != j[:-1]
    i, j, cand = i[first], j[first], cand[first]
    better = cand < state.T[j]
    i, j, cand = i[better], j[better], cand[better]
    state.T[j] = cand
    state.infector[j] = i
    state.infect_edge[j] = edge[j]
    return len(j)


def step(state: SimState) -> StepReport:
    """Advance the model by one step of ``dt`` and apply the infection rule."""
    k = state.k + 1
    t_prev = state.time
    t = k * state.dt
    infected = state.T <= t
    susceptible = ~infected
    exit_agents, exit_legs = state.fleet.advance_to(t)
    state.k = k
    changed = _infection_update(state, infected, susceptible) if infected.any() else 0
    return StepReport(k, t_prev, t, exit_agents, exit_legs, changed)


def step_sequential(state: SimState) -> StepReport:
    """Reference step calling :func:`infect_neighbors` per infected agent in ascending id order."""
    k = state.k + 1
    t_prev = state.time
    t = k * state.dt
    infected = state.T <= t
    susceptible = ~infected
    exit_agents, exit_legs = state.fleet.advance_to(t)
    state.k = k
    changed = set()
    for i in np.flatnonzero(infected).tolist():
        changed.update(infect_neighbors(state, i, susceptible))
    return StepReport(k, t_prev, t, exit_agents, exit_legs, len(changed))


def event_log(state: SimState, horizon: float | None = None) -> list[tuple[int, float, int, int]]:
    """Infection events ``(agent_id, t_infected_s, infector_id, edge_id)`` up to ``horizon``, in time order."""
    horizon = state.time if horizon is None else horizon
    ids = np.flatnonzero(state.T <= horizon)
    ids = ids[np.lexsort((ids, state.T[ids]))]
    return [(int(a), float(state.T[a]), int(state.infector[a]), int(state.infect_edge[a])) for a in ids]


def write_event_log(events, fh) -> None:
    fh.write("agent_id,t_infected_s,infector_id,edge_id\n")
    for a, t, src, e in events:
        fh.write(f"{a},{t!r},{src},{e}\n")
