"""Street-adapted random-waypoint mobility.

Every agent is anchored at a base point. A trip draws a planar Gaussian point
around the base (standard deviation 15 min of travel at the agent's speed),
projects it onto the streets, walks the shortest street path there and walks
the same path back. Trips repeat indefinitely.

Motion is stored as *legs*: maximal stretches at constant signed velocity on
one edge. Leg boundaries are exact event times, never snapped to step
instants, so per-edge entry and exit times are available to the contact
computation at full precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .errors import IsolatedAgentError, UnreachableDestinationError
from .street_system import StreetPoint, StreetSystem, nearest_street_point, nearest_street_points

log = logging.getLogger(__name__)

WAYPOINT_HORIZON_H = 0.25  # sigma_X = 15 min x v
MAX_RETRIES = 100
ISOLATION_DWELL_S = 900.0


def waypoint_sigma(v_kmh) -> np.ndarray | float:
    """Standard deviation (km) of the Gaussian waypoint draw for speed ``v_kmh``."""
    return WAYPOINT_HORIZON_H * v_kmh


def sample_destination(
    current: StreetPoint,
    v: float,
    S: StreetSystem,
    rng: np.random.Generator,
    *,
    max_retries: int = MAX_RETRIES,
) -> StreetPoint:
    """Draw a waypoint around ``current`` and project it onto the streets.

    Destinations on a different connected component are redrawn; after
    ``max_retries`` failed draws :class:`IsolatedAgentError` is raised.
    """
    if v <= 0:
        raise ValueError("speed must be positive")
    sigma = waypoint_sigma(v)
    comp = S.edge_component
    origin = np.asarray(current.xy)
    for _ in range(max_retries):
        dest = nearest_street_point(S, origin + sigma * rng.standard_normal(2))
        if comp[dest.edge] == comp[current.edge]:
            return dest
    raise IsolatedAgentError(f"isolated agent: no reachable destination in {max_retries} draws")


@njit(cache=True)
def _heap_push(hk, hv, size, key, val):
    k = size
    hk[k] = key
    hv[k] = val
    while k > 0:
        p = (k - 1) >> 1
        if hk[p] < hk[k] or (hk[p] == hk[k] and hv[p] <= hv[k]):
            break
        hk[p], hk[k] = hk[k], hk[p]
        hv[p], hv[k] = hv[k], hv[p]
        k = p
    return size + 1


@njit(cache=True)
def _heap_pop(hk, hv, size):
    key, val = hk[0], hv[0]
    size -= 1
    hk[0] = hk[size]
    hv[0] = hv[size]
    k = 0
    while True:
        l = 2 * k + 1
        if l >= size:
            break
        c = l
        if l + 1 < size and (hk[l + 1] < hk[l] or (hk[l + 1] == hk[l] and hv[l + 1] < hv[l])):
            c = l + 1
        if hk[k] < hk[c] or (hk[k] == hk[c] and hv[k] <= hv[c]):
            break
        hk[c], hk[k] = hk[k], hk[c]
        hv[c], hv[k] = hv[k], hv[c]
        k = c
    return key, val, size


@njit(cache=True)
def _route_search(indptr, indices, data, vx, vy, src_a, src_b, da, db, dst_a, dst_b, ta, tb,
                  dist, pred, stamp, tag, hk, hv):
    """A* search between two street points.

    Sources are the base edge's endpoints at initial distances ``da``/``db``;
    targets are the destination edge's endpoints with remaining lengths
    ``ta``/``tb``. Streets are straight, so the Euclidean distance to the
    destination (through either endpoint) is a consistent lower bound. Source
    vertices get the predecessor ``len(stamp)`` (the virtual base vertex).
    Returns the endpoint of the destination edge the route enters through, or
    -1 if unreachable.
    """
    virtual = len(stamp)
    ax, ay, bx, by = vx[dst_a], vy[dst_a], vx[dst_b], vy[dst_b]
    size = 0
    for v, d in ((src_a, da), (src_b, db)):
        if stamp[v] != tag or d < dist[v]:
            stamp[v] = tag
            dist[v] = d
            pred[v] = virtual
            h = min(np.hypot(vx[v] - ax, vy[v] - ay) + ta, np.hypot(vx[v] - bx, vy[v] - by) + tb)
            size = _heap_push(hk, hv, size, d + h, v)
    best = np.inf
    end = -1
    while size > 0:
        f, x, size = _heap_pop(hk, hv, size)
        if f > best:
            break
        d = dist[x]
        h = min(np.hypot(vx[x] - ax, vy[x] - ay) + ta, np.hypot(vx[x] - bx, vy[x] - by) + tb)
        if f > d + h:
            continue  # stale entry
        if x == dst_a and d + ta < best:
            best = d + ta
            end = x
        if x == dst_b and (d + tb < best or (d + tb == best and x < end)):
            best = d + tb
            end = x
        for k in range(indptr[x], indptr[x + 1]):
            y = indices[k]
            nd = d + data[k]
            if stamp[y] != tag or nd < dist[y]:
                stamp[y] = tag
                dist[y] = nd
                pred[y] = x
                hy = min(np.hypot(vx[y] - ax, vy[y] - ay) + ta, np.hypot(vx[y] - bx, vy[y] - by) + tb)
                size = _heap_push(hk, hv, size, nd + hy, y)
    return end


class Router:
    """Shortest street routes between base points and destinations.

    Each query runs an A* search from both ends of the base edge that stops as
    soon as the destination is settled; work arrays are reused across queries.
    """

    def __init__(self, S: StreetSystem):
        self.S = S
        g = S.csgraph
        self._indptr = g.indptr.astype(np.int64)
        self._indices = g.indices.astype(np.int64)
        self._data = g.data.astype(float)
        self._vx = np.ascontiguousarray(S.vertices[:, 0], dtype=float)
        self._vy = np.ascontiguousarray(S.vertices[:, 1], dtype=float)
        V = S.n_vertices
        self._virtual = V
        self._dist = np.empty(V)
        self._pred = np.empty(V + 1, dtype=np.int64)
        self._stamp = np.zeros(V, dtype=np.int64)
        self._tag = 0
        m = max(len(self._indices), 1) + 2
        self._hk = np.empty(m)
        self._hv = np.empty(m, dtype=np.int64)

    def resolve(self, base_edge: int, base_offset: float, dest_edge: int,
                dest_offset: float) -> tuple[np.ndarray, int]:
        """Predecessor array of the search and the vertex where the route enters ``dest_edge``.

        The vertex is ``-1`` when the destination lies on the base edge (walk
        directly). The predecessor array is overwritten by the next query.
        """
        if dest_edge == base_edge:
            return self._pred, -1
        S = self.S
        u, w = (int(x) for x in S.edges[base_edge])
        a, b = (int(x) for x in S.edges[dest_edge])
        Lb = float(S.lengths[base_edge])
        self._tag += 1
        end = _route_search(
            self._indptr, self._indices, self._data, self._vx, self._vy,
            u, w, base_offset, Lb - base_offset,
            a, b, dest_offset, float(S.lengths[dest_edge]) - dest_offset,
            self._dist, self._pred, self._stamp, self._tag, self._hk, self._hv,
        )
        if end < 0:
            raise UnreachableDestinationError(
                f"unreachable destination: edge {dest_edge} from edge {base_edge}"
            )
        return self._pred, end

    def vertex_route(self, base_edge: int, base_offset: float, dest_edge: int,
                     dest_offset: float) -> tuple[int, ...]:
        """Vertices crossed on the shortest path; empty when the destination is on the base edge."""
        pred, x = self.resolve(base_edge, base_offset, dest_edge, dest_offset)
        if x < 0:
            return ()
        seq = [x]
        while True:
            x = int(pred[x])
            if x == self._virtual:
                break
            seq.append(x)
        seq.reverse()
        return tuple(seq)


@njit(cache=True)
def _connecting_edge(x, y, edges, lengths, inc_ptr, inc_ids):
    best = -1
    for k in range(inc_ptr[x], inc_ptr[x + 1]):
        e = inc_ids[k]
        if edges[e, 0] + edges[e, 1] - x == y and (best < 0 or lengths[e] < lengths[best]):
            best = e
    return best


@njit(cache=True)
def _trip_kernel(pred, virtual, end_vertex, base_edge, base_off, dest_edge, dest_off,
                 edges, lengths, inc_ptr, inc_ids, t0, speed):
    """Round-trip legs as (edge, t_in, t_out, offset_in, nu) arrays; compiled twin of trip_legs."""
    n_route = 0
    if end_vertex >= 0:
        x = end_vertex
        while x != virtual:
            n_route += 1
            x = pred[x]
    route = np.empty(n_route, np.int64)
    x = end_vertex
    for k in range(n_route - 1, -1, -1):
        route[k] = x
        x = pred[x]
    n_out = 1 if n_route == 0 else n_route + 1
    le = np.empty(n_out, np.int64)
    lf = np.empty(n_out)
    lt = np.empty(n_out)
    if n_route == 0:
        le[0] = base_edge
        lf[0] = base_off
        lt[0] = dest_off
    else:
        le[0] = base_edge
        lf[0] = base_off
        lt[0] = 0.0 if edges[base_edge, 0] == route[0] else lengths[base_edge]
        for k in range(n_route - 1):
            e = _connecting_edge(route[k], route[k + 1], edges, lengths, inc_ptr, inc_ids)
            le[k + 1] = e
            if edges[e, 0] == route[k]:
                lf[k + 1] = 0.0
                lt[k + 1] = lengths[e]
            else:
                lf[k + 1] = lengths[e]
                lt[k + 1] = 0.0
        le[n_out - 1] = dest_edge
        lf[n_out - 1] = 0.0 if edges[dest_edge, 0] == route[n_route - 1] else lengths[dest_edge]
        lt[n_out - 1] = dest_off
    keep = 0
    for k in range(n_out):
        if lf[k] != lt[k]:
            keep += 1
    m = 2 * keep
    edge = np.empty(m, np.int64)
    off = np.empty(m)
    t_in = np.empty(m)
    t_out = np.empty(m)
    nu = np.empty(m)
    j = 0
    for k in range(n_out):
        if lf[k] != lt[k]:
            edge[j] = le[k]
            off[j] = lf[k]
            nu[j] = speed if lt[k] > lf[k] else -speed
            edge[m - 1 - j] = le[k]
            off[m - 1 - j] = lt[k]
            nu[m - 1 - j] = -nu[j]
            t_out[j] = abs(lt[k] - lf[k])
            t_out[m - 1 - j] = t_out[j]
            j += 1
    acc = 0.0
    for k in range(m):
        t_in[k] = t0 + acc / speed
        acc += t_out[k]
        t_out[k] = t0 + acc / speed
    return edge, t_in, t_out, off, nu


def trip_legs(
    S: StreetSystem,
    base_edge: int,
    base_offset: float,
    dest_edge: int,
    dest_offset: float,
    route: tuple[int, ...],
) -> list[tuple[int, float, float]]:
    """Legs ``(edge, from_offset, to_offset)`` of an out-and-back trip.

    The return half is the outbound half reversed; a destination inside an
    edge therefore yields two opposite-direction legs on that edge.
    """
    E = S.edges
    if not route:
        out = [(base_edge, base_offset, dest_offset)]
    else:
        first, last = route[0], route[-1]
        out = [(base_edge, base_offset, 0.0 if E[base_edge, 0] == first else float(S.lengths[base_edge]))]
        lookup = S.edge_lookup
        for x, y in zip(route, route[1:]):
            e = lookup[(x, y) if x < y else (y, x)]
            L = float(S.lengths[e])
            out.append((e, 0.0, L) if E[e, 0] == x else (e, L, 0.0))
        out.append((dest_edge, 0.0 if E[dest_edge, 0] == last else float(S.lengths[dest_edge]), dest_offset))
    out = [leg for leg in out if leg[1] != leg[2]]
    back = [(e, b, a) for e, a, b in reversed(out)]
    return out + back


@dataclass(frozen=True)
class Leg:
    edge: int
    t_in: float  # s
    t_out: float  # s
    offset_in: float  # km from the edge's first vertex at t_in
    nu: float  # signed speed along the edge, km/s

    @property
    def direction(self) -> int:
        return int(np.sign(self.nu))

    def offset_at(self, t: float) -> float:
        return self.offset_in + self.nu * (t - self.t_in)


class Fleet:
    """Positions of all agents, advanced jointly in time.

    ``speeds_kmh`` may be a scalar or one speed per agent. Each agent owns an
    independent random stream, so trajectories do not depend on the step size
    used to sample them. With ``record=True`` the full itinerary of every
    agent is retained for :meth:`position_at` and :meth:`itinerary`.
    """

    def __init__(
        self,
        S: StreetSystem,
        edges,
        offsets,
        speeds_kmh,
        seed: int | np.random.SeedSequence = 0,
        *,
        record: bool = False,
        max_retries: int = MAX_RETRIES,
        destination_fn: Callable[["Fleet", int], tuple[int, float]] | None = None,
    ):
        self.S = S
        self.base_edge = np.asarray(edges, dtype=np.int64)
        self.base_offset = np.asarray(offsets, dtype=float)
        self.n = len(self.base_edge)
        self.base_xy = S.xy(self.base_edge, self.base_offset).reshape(self.n, 2)
        self.speed_kmh = np.broadcast_to(np.asarray(speeds_kmh, dtype=float), (self.n,)).copy()
        if np.any(self.speed_kmh <= 0):
            raise ValueError("speeds must be positive")
        self.speed = self.speed_kmh / 3600.0
        self.sigma = waypoint_sigma(self.speed_kmh)
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        self.rngs = [np.random.default_rng(s) for s in seed.spawn(self.n)]
        self.record = record
        self.max_retries = max_retries
        self.destination_fn = destination_fn
        self.router = Router(S)
        self.isolation_events = 0
        self.trips = 0

        cap = max(1024, 8 * self.n)
        self._edge = np.empty(cap, dtype=np.int64)
        self._tin = np.empty(cap)
        self._tout = np.empty(cap)
        self._off = np.empty(cap)
        self._nu = np.empty(cap)
        self._size = 0
        self._compacted_size = 0
        self.cur = np.zeros(self.n, dtype=np.int64)
        self.last = np.zeros(self.n, dtype=np.int64)
        self._blocks: list[list[tuple[int, int]]] | None = [[] for _ in range(self.n)] if record else None
        self.time = 0.0
        if self.n:
            self._start_trips(np.arange(self.n), np.zeros(self.n))

    # -- trip planning -------------------------------------------------------

    def _plan(self, i: int, t0: float, first: tuple[int, float] | None):
        """Leg arrays of agent ``i``'s next trip starting at ``t0``, or ``None`` if isolated.

        Draws landing on another component, or producing a zero-length trip,
        are redrawn up to ``max_retries`` times.
        """
        S = self.S
        comp = S.edge_component
        be, bo = int(self.base_edge[i]), float(self.base_offset[i])
        indptr, inc = S.incidence
        for attempt in range(self.max_retries):
            if self.destination_fn is not None:
                e, off = self.destination_fn(self, i)
            elif attempt == 0 and first is not None:
                e, off = first
            else:
                p = self.base_xy[i] + self.sigma[i] * self.rngs[i].standard_normal(2)
                ee, oo = nearest_street_points(S, p)
                e, off = int(ee[0]), float(oo[0])
            if comp[e] != comp[be]:
                continue
            pred, end = self.router.resolve(be, bo, e, off)
            legs = _trip_kernel(pred, self.router._virtual, end, be, bo, e, off,
                                S.edges, S.lengths, indptr, inc, t0, self.speed[i])
            if len(legs[0]):
                return legs
        return None

    def _start_trips(self, agents: np.ndarray, t0s: np.ndarray) -> None:
        first = None
        if self.destination_fn is None:
            pts = np.empty((len(agents), 2))
            for k, i in enumerate(agents.tolist()):
                pts[k] = self.rngs[i].standard_normal(2)
            pts = self.base_xy[agents] + self.sigma[agents, None] * pts
            ee, oo = nearest_street_points(self.S, pts)
            first = list(zip(ee.tolist(), oo.tolist()))
        parts = []
        for k, i in enumerate(agents.tolist()):
            t0 = float(t0s[k])
            legs = self._plan(i, t0, None if first is None else first[k])
            if legs is None:
                self.isolation_events += 1
                log.info("agent %d isolated at t=%.1fs; stationary for %.0fs", i, t0, ISOLATION_DWELL_S)
                legs = (
                    np.array([self.base_edge[i]]), np.array([t0]),
                    np.array([t0 + ISOLATION_DWELL_S]), np.array([self.base_offset[i]]), np.zeros(1),
                )
            parts.append(legs)
        self.trips += len(parts)
        counts = np.array([len(p[0]) for p in parts], dtype=np.int64)
        total = int(counts.sum())
        self._reserve(total)
        s = self._size
        for name, col in zip(("_edge", "_tin", "_tout", "_off", "_nu"), zip(*parts)):
            getattr(self, name)[s:s + total] = np.concatenate(col)
        starts = s + np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.cur[agents] = starts
        self.last[agents] = starts + counts - 1
        self._size = s + total
        if self._blocks is not None:
            for i, a, c in zip(agents.tolist(), starts.tolist(), counts.tolist()):
                self._blocks[i].append((a, a + c))

    def _reserve(self, extra: int) -> None:
        need = self._size + extra
        cap = len(self._tin)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_edge", "_tin", "_tout", "_off", "_nu"):
            old = getattr(self, name)
            arr = np.empty(new, dtype=old.dtype)
            arr[: self._size] = old[: self._size]
            setattr(self, name, arr)

    def _compact(self) -> None:
        counts = self.last - self.cur + 1
        total = int(counts.sum())
        base = np.concatenate([[0], np.cumsum(counts)[:-1]])
        idx = np.repeat(self.cur - base, counts) + np.arange(total)
        for name in ("_edge", "_tin", "_tout", "_off", "_nu"):
            arr = getattr(self, name)
            arr[:total] = arr[idx]
        self.cur = base.astype(np.int64)
        self.last = base + counts - 1
        self._size = total
        self._compacted_size = total

    # -- time evolution --------------------------------------------------------

    def advance_to(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Move every agent to time ``t`` (s).

        Returns ``(agents, legs)``: the legs left during this advance, in
        traversal order per agent. Leg indices stay valid until the next call.
        An agent exactly at a leg boundary stays on the leg it is finishing.
        """
        if t < self.time:
            raise ValueError(f"cannot move back in time ({t} < {self.time})")
        if not self.record and self._size > 2 * self._compacted_size + 8 * self.n + 4096:
            self._compact()
        exit_agents, exit_legs = [], []
        idx = np.arange(self.n)
        while len(idx):
            lag = idx[self._tout[self.cur[idx]] < t]
            if not len(lag):
                break
            exit_agents.append(lag)
            exit_legs.append(self.cur[lag].copy())
            at_end = self.cur[lag] == self.last[lag]
            self.cur[lag[~at_end]] += 1
            done = lag[at_end]
            if len(done):
                self._start_trips(done, self._tout[self.cur[done]])
            idx = lag
        self.time = t
        if not exit_agents:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        agents = np.concatenate(exit_agents)
        legs = np.concatenate(exit_legs)
        order = np.argsort(agents, kind="stable")
        return agents[order], legs[order]

    def leg_arrays(self, legs: np.ndarray):
        """``(edge, t_in, t_out, offset_in, nu)`` for leg indices ``legs``."""
        return self._edge[legs], self._tin[legs], self._tout[legs], self._off[legs], self._nu[legs]

    def offsets_on_legs(self, legs: np.ndarray, t) -> np.ndarray:
        edge = self._edge[legs]
        off = self._off[legs] + self._nu[legs] * (t - self._tin[legs])
        return np.clip(off, 0.0, self.S.lengths[edge])

    def current(self):
        """Arrays ``(edge, offset, nu, t_in, t_out)`` at the current time."""
        legs = self.cur
        return (
            self._edge[legs],
            self.offsets_on_legs(legs, self.time),
            self._nu[legs],
            self._tin[legs],
            self._tout[legs],
        )

    def positions(self) -> np.ndarray:
        edge, off, *_ = self.current()
        return self.S.xy(edge, off).reshape(self.n, 2)

    def current_leg(self, i: int) -> Leg:
        j = self.cur[i]
        return Leg(int(self._edge[j]), float(self._tin[j]), float(self._tout[j]),
                   float(self._off[j]), float(self._nu[j]))

    # -- history ---------------------------------------------------------------

    def itinerary(self, i: int) -> list[Leg]:
        """All legs of agent ``i`` started so far (requires ``record=True``)."""
        if self._blocks is None:
            raise RuntimeError("itineraries are only kept with record=True")
        out = []
        for a, b in self._blocks[i]:
            for j in range(a, b):
                if self._tin[j] > self.time:
                    return out
                out.append(Leg(int(self._edge[j]), float(self._tin[j]), float(self._tout[j]),
                               float(self._off[j]), float(self._nu[j])))
        return out

    def position_at(self, i: int, t: float) -> StreetPoint:
        """Exact street position of agent ``i`` at time ``t`` within the simulated horizon."""
        if t < 0 or t > self.time:
            raise ValueError(f"t={t} outside simulated horizon [0, {self.time}]")
        if self._blocks is None:
            leg = self.current_leg(i)
            if t < leg.t_in:
                raise RuntimeError("history before the current leg needs record=True")
            legs = [leg]
        else:
            legs = self.itinerary(i)
        for leg in legs:
            if leg.t_out >= t:
                L = float(self.S.lengths[leg.edge])
                return self.S.point(leg.edge, min(max(leg.offset_at(t), 0.0), L))
        raise RuntimeError("no leg covers t")  # unreachable: the current leg covers self.time
