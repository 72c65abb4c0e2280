"""Poisson-Voronoi street systems.

A street system is the edge set of a planar Voronoi tessellation generated by a
homogeneous Poisson process of seeds, clipped to the square window ``[0, H]^2``.
Lengths are in km, intensities in km^-2.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from os import PathLike
from typing import IO, Iterable

import numpy as np
import shapely
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Voronoi

from .errors import (
    DegenerateTessellationError,
    InstanceTooLargeError,
    UnreachableDestinationError,
)

GEOM_TOL = 1e-9
DEFAULT_MAX_EDGES = 3_000_000
# the padded window extends this many mean seed spacings beyond [0, H]^2
PAD_SPACINGS = 3.0
L0_GRID = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)


@dataclass(frozen=True)
class StreetPoint:
    """A position on the street system: an edge and the offset from its first vertex."""

    edge: int
    offset: float
    xy: tuple[float, float]


@dataclass(frozen=True)
class Path:
    """Ordered traversal along the streets.

    ``legs`` holds ``(edge, from_offset, to_offset)`` triples; ``vertices`` the
    street vertices crossed, in order.
    """

    legs: tuple[tuple[int, float, float], ...]
    vertices: tuple[int, ...]
    length: float


@dataclass(frozen=True, eq=False)
class StreetSystem:
    lam: float
    H: float
    seed: int | None
    vertices: np.ndarray  # (V, 2) km
    edges: np.ndarray  # (E, 2) vertex ids; canonical direction edges[e, 0] -> edges[e, 1]
    lengths: np.ndarray  # (E,) km
    clipped: np.ndarray  # (E,) True where the window cut the Voronoi edge

    def __post_init__(self):
        for arr in (self.vertices, self.edges, self.lengths, self.clipped):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def csgraph(self) -> csr_matrix:
        """Symmetric weighted adjacency matrix (vertex x vertex)."""
        n = self.n_vertices
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.concatenate([self.lengths, self.lengths])
        return csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR-style ``(indptr, edge_ids)``: edges incident to each vertex, ascending id."""
        n = self.n_vertices
        ends = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        ids = np.concatenate([np.arange(self.n_edges), np.arange(self.n_edges)])
        order = np.lexsort((ids, ends))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, ends + 1, 1)
        return np.cumsum(indptr), ids[order]

    def incident_edges(self, vertex: int) -> np.ndarray:
        indptr, ids = self.incidence
        return ids[indptr[vertex]:indptr[vertex + 1]]

    @cached_property
    def edge_lookup(self) -> dict[tuple[int, int], int]:
        table: dict[tuple[int, int], int] = {}
        for e, (a, b) in enumerate(self.edges.tolist()):
            key = (a, b) if a < b else (b, a)
            if key not in table or self.lengths[e] < self.lengths[table[key]]:
                table[key] = e
        return table

    @cached_property
    def _components(self) -> tuple[np.ndarray, int]:
        _, labels = connected_components(self.csgraph, directed=False)
        edge_labels = labels[self.edges[:, 0]]
        totals = np.bincount(edge_labels, weights=self.lengths)
        return labels, int(np.argmax(totals))

    @property
    def vertex_component(self) -> np.ndarray:
        return self._components[0]

    @cached_property
    def edge_component(self) -> np.ndarray:
        return self._components[0][self.edges[:, 0]]

    @property
    def main_component(self) -> int:
        """Label of the component carrying the most street length."""
        return self._components[1]

    @property
    def fragment_edges(self) -> np.ndarray:
        """Boolean mask of edges outside the main component (clipping debris)."""
        return self.edge_component != self.main_component

    @cached_property
    def _tree(self) -> shapely.STRtree:
        coords = self.vertices[self.edges]
        return shapely.STRtree(shapely.linestrings(coords))

    def xy(self, edges, offsets) -> np.ndarray:
        """Planar coordinates of ``(edge, offset)`` pairs (vectorised)."""
        edges = np.asarray(edges)
        offsets = np.asarray(offsets, dtype=float)
        a = self.vertices[self.edges[edges, 0]]
        b = self.vertices[self.edges[edges, 1]]
        frac = (offsets / self.lengths[edges])[..., None]
        return a + frac * (b - a)

    def point(self, edge: int, offset: float) -> StreetPoint:
        x, y = self.xy(edge, offset)
        return StreetPoint(int(edge), float(offset), (float(x), float(y)))

    def total_length(self) -> float:
        return float(self.lengths.sum())


def _clip_segments(p: np.ndarray, q: np.ndarray, H: float):
    """Liang-Barsky clipping of segments ``p -> q`` to ``[0, H]^2``."""
    d = q - p
    t0 = np.zeros(len(p))
    t1 = np.ones(len(p))
    keep = np.ones(len(p), dtype=bool)
    for P, Q in (
        (-d[:, 0], p[:, 0]),
        (d[:, 0], H - p[:, 0]),
        (-d[:, 1], p[:, 1]),
        (d[:, 1], H - p[:, 1]),
    ):
        parallel = P == 0
        keep &= ~(parallel & (Q < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = Q / P
        t0 = np.where(~parallel & (P < 0), np.maximum(t0, ratio), t0)
        t1 = np.where(~parallel & (P > 0), np.minimum(t1, ratio), t1)
    keep &= t0 <= t1
    cut0 = t0 > 0
    cut1 = t1 < 1
    new_p = np.where(cut0[:, None], p + t0[:, None] * d, p)
    new_q = np.where(cut1[:, None], p + t1[:, None] * d, q)
    return keep, new_p, new_q, cut0, cut1


def _snap_to_window(pts: np.ndarray, H: float) -> np.ndarray:
    pts = np.clip(pts, 0.0, H)
    pts[np.abs(pts) <= GEOM_TOL] = 0.0
    pts[np.abs(pts - H) <= GEOM_TOL] = H
    return pts


def generate_street_system(
    lam: float,
    H: float,
    rng: np.random.Generator | int,
    *,
    max_edges: int = DEFAULT_MAX_EDGES,
) -> StreetSystem:
    """Sample a Poisson-Voronoi street system of seed intensity ``lam`` on ``[0, H]^2``.

    Seeds are drawn on a window padded by ``3/sqrt(lam)`` so that the cells
    meeting ``[0, H]^2`` are not distorted by the sampling boundary; Voronoi
    edges are then clipped to the window. Passing an integer seed records it
    in the result for serialisation.
    """
    if not (lam > 0 and H > 0):
        raise ValueError(f"lambda and H must be positive, got {lam}, {H}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if seed is not None:
        rng = np.random.default_rng(int(seed))
    pad = PAD_SPACINGS / math.sqrt(lam)
    side = H + 2 * pad
    # a PVT has on average 3 edges per seed
    if 3 * lam * side * side > max_edges:
        raise InstanceTooLargeError(
            f"instance too large: ~{3 * lam * side * side:.0f} edges exceeds cap {max_edges}"
        )
    n_seeds = rng.poisson(lam * side * side)
    seeds = rng.uniform(-pad, H + pad, size=(n_seeds, 2))
    if n_seeds < 3:
        raise DegenerateTessellationError(f"degenerate tessellation: {n_seeds} seed points")
    try:
        vor = Voronoi(seeds)
    except Exception as exc:  # qhull failures on collinear/duplicate input
        raise DegenerateTessellationError(f"degenerate tessellation: {exc}") from exc

    ridges = np.asarray(vor.ridge_vertices, dtype=np.int64)
    ridges = ridges[(ridges >= 0).all(axis=1)]
    p = vor.vertices[ridges[:, 0]]
    q = vor.vertices[ridges[:, 1]]
    keep, p, q, cut0, cut1 = _clip_segments(p, q, H)
    ridges, p, q, cut0, cut1 = ridges[keep], p[keep], q[keep], cut0[keep], cut1[keep]
    p[cut0] = _snap_to_window(p[cut0], H)
    q[cut1] = _snap_to_window(q[cut1], H)
    length = np.hypot(*(q - p).T)
    ok = length > GEOM_TOL
    ridges, p, q, cut0, cut1 = ridges[ok], p[ok], q[ok], cut0[ok], cut1[ok]
    if len(ridges) > max_edges:
        raise InstanceTooLargeError(
            f"instance too large: {len(ridges)} edges exceeds cap {max_edges}"
        )
    if len(ridges) == 0:
        raise DegenerateTessellationError("degenerate tessellation: no edge meets the window")

    # Voronoi vertices inside the window keep a shared id; every clipped end
    # point is a fresh degree-one vertex on the window boundary.
    inner_ids = np.concatenate([ridges[~cut0, 0], ridges[~cut1, 1]])
    used = np.unique(inner_ids)
    remap = np.full(len(vor.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    n_inner = len(used)
    v0 = np.where(cut0, -1, remap[ridges[:, 0]])
    v1 = np.where(cut1, -1, remap[ridges[:, 1]])
    n0 = int(cut0.sum())
    v0[cut0] = n_inner + np.arange(n0)
    v1[cut1] = n_inner + n0 + np.arange(int(cut1.sum()))
    vertices = np.concatenate([vor.vertices[used], p[cut0], q[cut1]])
    edges = np.stack([v0, v1], axis=1)
    lengths = np.hypot(*(vertices[edges[:, 1]] - vertices[edges[:, 0]]).T)
    return StreetSystem(
        lam=float(lam),
        H=float(H),
        seed=None if seed is None else int(seed),
        vertices=vertices,
        edges=edges,
        lengths=lengths,
        clipped=cut0 | cut1,
    )


def _project(S: StreetSystem, edge_ids: np.ndarray, pts: np.ndarray):
    """Project each point onto the matching edge; returns (offset, distance)."""
    a = S.vertices[S.edges[edge_ids, 0]]
    b = S.vertices[S.edges[edge_ids, 1]]
    d = b - a
    L = S.lengths[edge_ids]
    t = np.clip(np.einsum("ij,ij->i", pts - a, d) / (L * L), 0.0, 1.0)
    proj = a + t[:, None] * d
    return t * L, np.hypot(*(pts - proj).T)


def nearest_street_points(S: StreetSystem, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`nearest_street_point`: returns ``(edges, offsets)`` arrays."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    geoms = shapely.points(pts)
    qi, ti = S._tree.query_nearest(geoms, all_matches=True)
    # GEOS reports exact ties; decide among them with our own projection
    offs, dists = _project(S, ti, pts[qi])
    dmin = np.full(len(pts), np.inf)
    np.minimum.at(dmin, qi, dists)
    tied = dists <= dmin[qi] + 1e-12
    qi, ti, offs = qi[tied], ti[tied], offs[tied]
    order = np.lexsort((offs, ti, qi))
    qi, ti, offs = qi[order], ti[order], offs[order]
    first = np.r_[True, qi[1:] != qi[:-1]]
    return ti[first].astype(np.int64), offs[first]


def nearest_street_point(S: StreetSystem, p) -> StreetPoint:
    """Closest point of the street system to planar point ``p``.

    Ties are broken by lowest edge id, then lowest offset.
    """
    if S.n_edges == 0:
        raise ValueError("empty street system")
    e, off = nearest_street_points(S, [p])
    return S.point(int(e[0]), float(off[0]))


def _path_from_vertices(
    S: StreetSystem, a: StreetPoint, b: StreetPoint, seq: tuple[int, ...], length: float
) -> Path:
    E = S.edges
    legs = []
    first = seq[0]
    legs.append((a.edge, a.offset, 0.0 if E[a.edge, 0] == first else float(S.lengths[a.edge])))
    lookup = S.edge_lookup
    for x, y in zip(seq, seq[1:]):
        e = lookup[(x, y) if x < y else (y, x)]
        L = float(S.lengths[e])
        legs.append((e, 0.0, L) if E[e, 0] == x else (e, L, 0.0))
    last = seq[-1]
    legs.append((b.edge, 0.0 if E[b.edge, 0] == last else float(S.lengths[b.edge]), b.offset))
    legs = [leg for leg in legs if abs(leg[2] - leg[1]) > 0.0]
    return Path(tuple(legs), seq, length)


def shortest_path(S: StreetSystem, a: StreetPoint, b: StreetPoint) -> Path:
    """Minimal-length street path from ``a`` to ``b``.

    Equal-length alternatives are resolved by the lexicographically smallest
    vertex sequence.
    """
    comp = S.edge_component
    if comp[a.edge] != comp[b.edge]:
        raise UnreachableDestinationError(
            f"unreachable destination: edges {a.edge} and {b.edge} are disconnected"
        )
    if a.edge == b.edge:
        if a.offset == b.offset:
            return Path((), (), 0.0)
        return Path(((a.edge, a.offset, b.offset),), (), abs(a.offset - b.offset))

    E, Ls = S.edges, S.lengths
    la = float(Ls[a.edge])
    lb = float(Ls[b.edge])
    ua, wa = int(E[a.edge, 0]), int(E[a.edge, 1])
    ub, wb = int(E[b.edge, 0]), int(E[b.edge, 1])
    tail = {ub: b.offset, wb: lb - b.offset}

    labels: dict[int, tuple[float, tuple[int, ...]]] = {}
    heap: list[tuple[float, tuple[int, ...], int]] = []
    for v, d in ((ua, a.offset), (wa, la - a.offset)):
        lab = (d, (v,))
        if v not in labels or lab < labels[v]:
            labels[v] = lab
            heapq.heappush(heap, (d, (v,), v))
    done: set[int] = set()
    best: tuple[float, tuple[int, ...]] | None = None
    indptr, inc = S.incidence
    while heap:
        d, seq, v = heapq.heappop(heap)
        if v in done or (d, seq) != labels[v]:
            continue
        if best is not None and d > best[0]:
            break
        done.add(v)
        if v in tail:
            cand = (d + tail[v], seq)
            if best is None or cand < best:
                best = cand
        for e in inc[indptr[v]:indptr[v + 1]]:
            x, y = int(E[e, 0]), int(E[e, 1])
            n = y if x == v else x
            if n in done:
                continue
            lab = (d + float(Ls[e]), seq + (n,))
            if n not in labels or lab < labels[n]:
                labels[n] = lab
                heapq.heappush(heap, (lab[0], lab[1], n))
    if best is None:
        raise UnreachableDestinationError("unreachable destination")
    return _path_from_vertices(S, a, b, best[1], best[0])


@dataclass(frozen=True)
class EdgeLengthStats:
    n: int
    mean: float
    variance: float
    histogram: np.ndarray  # probability density per bin
    bin_edges: np.ndarray
    reliable: bool


def interior_lengths(S: StreetSystem) -> np.ndarray:
    return S.lengths[~S.clipped]


def edge_length_statistics(S: StreetSystem, bins: int = 40) -> EdgeLengthStats:
    """Moments and normalised histogram of interior (unclipped) edge lengths."""
    lengths = interior_lengths(S)
    if len(lengths) == 0:
        return EdgeLengthStats(0, math.nan, math.nan, np.zeros(0), np.zeros(1), False)
    if len(lengths) == 1 or np.ptp(lengths) == 0:
        hist, bin_edges = np.array([1.0]), np.array([lengths[0], lengths[0]])
    else:
        hist, bin_edges = np.histogram(lengths, bins=bins, density=True)
    return EdgeLengthStats(
        n=len(lengths),
        mean=float(lengths.mean()),
        variance=float(lengths.var()),
        histogram=hist,
        bin_edges=bin_edges,
        reliable=len(lengths) >= 100,
    )


def length_density(S: StreetSystem) -> float:
    """Street length per unit area inside the window (km^-1)."""
    return S.total_length() / (S.H * S.H)


def calibrate_l0(lengths_unit: np.ndarray, grid: Iterable[float] = L0_GRID) -> float:
    """Smallest grid value ``l0`` with ``P[L >= x] <= exp(-x^2)`` for every ``x >= l0``.

    ``lengths_unit`` are edge lengths of a unit-intensity tessellation. The
    empirical survival function is a step function, so checking at ``l0`` and
    at each sample point above it is exhaustive.
    """
    srt = np.sort(np.asarray(lengths_unit, dtype=float))
    n = len(srt)
    for l0 in grid:
        xs = np.concatenate([[l0], srt[srt >= l0]])
        surv = (n - np.searchsorted(srt, xs, side="left")) / n
        if np.all(surv <= np.exp(-xs * xs)):
            return float(l0)
    raise ValueError("no l0 in the calibration grid satisfies the tail bound")


@lru_cache(maxsize=4)
def unit_length_pool(min_edges: int = 100_000, seed: int = 20220401) -> np.ndarray:
    """Interior edge lengths of a unit-intensity tessellation with at least ``min_edges`` edges."""
    H = math.sqrt(min_edges / 3.0) * 1.08
    while True:
        lengths = interior_lengths(generate_street_system(1.0, H, seed))
        if len(lengths) >= min_edges:
            lengths.setflags(write=False)
            return lengths
        H *= 1.05


# ---------------------------------------------------------------------------
# text serialisation


def write_street_system(S: StreetSystem, dest: str | PathLike | IO[str]) -> None:
    """Write ``S`` as ``PVT`` header, ``V id x y`` lines, then ``E id v1 v2 length`` lines."""
    if hasattr(dest, "write"):
        _write(S, dest)
    else:
        with open(dest, "w", encoding="ascii") as fh:
            _write(S, fh)


def _write(S: StreetSystem, fh: IO[str]) -> None:
    seed = "none" if S.seed is None else str(S.seed)
    fh.write(f"PVT lambda={S.lam!r} H={S.H!r} seed={seed}\n")
    for i, (x, y) in enumerate(S.vertices.tolist()):
        fh.write(f"V {i} {x!r} {y!r}\n")
    for e, ((a, b), L) in enumerate(zip(S.edges.tolist(), S.lengths.tolist())):
        fh.write(f"E {e} {a} {b} {L!r}\n")


def read_street_system(src: str | PathLike | IO[str]) -> StreetSystem:
    if hasattr(src, "read"):
        lines = src.read().splitlines()
    else:
        with open(src, encoding="ascii") as fh:
            lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != "PVT":
        raise ValueError("not a street system file")
    meta = dict(tok.split("=", 1) for tok in head[1:])
    verts, edges, lengths = [], [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        tag, *rest = line.split()
        if tag == "V":
            verts.append((float(rest[1]), float(rest[2])))
        elif tag == "E":
            edges.append((int(rest[1]), int(rest[2])))
            lengths.append(float(rest[3]))
        else:
            raise ValueError(f"unknown record {tag!r}")
    H = float(meta["H"])
    vertices = np.array(verts, dtype=float).reshape(-1, 2)
    edges_arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    lengths_arr = np.array(lengths, dtype=float)
    geo = np.hypot(*(vertices[edges_arr[:, 1]] - vertices[edges_arr[:, 0]]).T)
    if np.any(np.abs(geo - lengths_arr) > GEOM_TOL):
        raise ValueError("edge lengths disagree with vertex coordinates")
    on_border = np.any((vertices == 0.0) | (vertices == H), axis=1)
    return StreetSystem(
        lam=float(meta["lambda"]),
        H=H,
        seed=None if meta.get("seed", "none") == "none" else int(meta["seed"]),
        vertices=vertices,
        edges=edges_arr,
        lengths=lengths_arr,
        clipped=on_border[edges_arr].any(axis=1),
    )


def from_segments(
    vertices, edges, *, H: float | None = None, lam: float = 1.0
) -> StreetSystem:
    """Build a street system from explicit vertices and edges (tests, hand-made maps)."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lengths = np.hypot(*(vertices[edges[:, 1]] - vertices[edges[:, 0]]).T)
    if np.any(lengths <= GEOM_TOL):
        raise ValueError("zero-length edge")
    if H is None:
        H = float(max(vertices.max(), 0.0))
    return StreetSystem(
        lam=lam,
        H=float(H),
        seed=None,
        vertices=vertices,
        edges=edges,
        lengths=lengths,
        clipped=np.zeros(len(edges), dtype=bool),
    )
