"""Street generation, geometric queries, statistics and serialisation."""

from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2d_malware.errors import (
    DegenerateTessellationError,
    InstanceTooLargeError,
    UnreachableDestinationError,
)
from d2d_malware.street_system import (
    GEOM_TOL,
    StreetPoint,
    calibrate_l0,
    edge_length_statistics,
    from_segments,
    generate_street_system,
    interior_lengths,
    length_density,
    nearest_street_point,
    read_street_system,
    shortest_path,
    write_street_system,
)

# six edges, two routes of equal length between the corners
HOUSE_VERTS = [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]
HOUSE_EDGES = [[0, 1], [1, 2], [0, 3], [2, 5], [3, 4], [4, 5]]


def brute_nearest(S, p):
    best = None
    for e in range(S.n_edges):
        a, b = S.vertices[S.edges[e]]
        d = b - a
        t = min(max(np.dot(p - a, d) / np.dot(d, d), 0.0), 1.0)
        dist = float(np.hypot(*(p - (a + t * d))))
        cand = (dist, e, t * S.lengths[e])
        if best is None or cand[0] < best[0] - 1e-12:
            best = cand
    return best


def simple_paths(S, src, dst):
    """Every simple vertex path from ``src`` to ``dst`` with its length."""
    adj = {v: [] for v in range(S.n_vertices)}
    for e, (a, b) in enumerate(S.edges.tolist()):
        adj[a].append((b, S.lengths[e]))
        adj[b].append((a, S.lengths[e]))
    out = []

    def walk(v, seq, length):
        if v == dst:
            out.append((length, tuple(seq)))
            return
        for n, L in adj[v]:
            if n not in seq:
                walk(n, seq + [n], length + L)

    walk(src, [src], 0.0)
    return out


class TestGeneration:
    def test_invariants(self, small_map):
        S = small_map
        geo = np.hypot(*(S.vertices[S.edges[:, 1]] - S.vertices[S.edges[:, 0]]).T)
        assert np.all(np.abs(geo - S.lengths) <= GEOM_TOL)
        assert np.all(S.vertices >= -GEOM_TOL) and np.all(S.vertices <= S.H + GEOM_TOL)
        assert np.all(S.lengths > GEOM_TOL)
        assert S.fragment_edges.sum() < S.n_edges / 10

    def test_deterministic(self):
        a = generate_street_system(50, 3.0, 123)
        b = generate_street_system(50, 3.0, 123)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.edges, b.edges)
        c = generate_street_system(50, 3.0, 124)
        assert a.n_edges != c.n_edges or not np.array_equal(a.vertices, c.vertices)

    @pytest.mark.slow
    def test_total_length_lambda50(self):
        totals = [generate_street_system(50, 10.0, s).total_length() for s in range(20)]
        expected = 2 * math.sqrt(50) * 100
        assert abs(np.mean(totals) / expected - 1) < 0.03

    def test_mean_edge_length_lambda1(self):
        S = generate_street_system(1.0, 40.0, 5)
        assert abs(S.lengths.mean() / (2 / 3) - 1) < 0.05

    def test_clipped_edges_touch_border(self, small_map):
        S = small_map
        ends = S.vertices[S.edges[S.clipped]]
        on_border = np.isclose(ends, 0.0) | np.isclose(ends, S.H)
        assert np.all(on_border.any(axis=(1, 2)))

    def test_degenerate(self):
        with pytest.raises(DegenerateTessellationError, match="degenerate tessellation"):
            generate_street_system(1e-4, 0.1, 0)

    def test_too_large(self):
        with pytest.raises(InstanceTooLargeError, match="instance too large"):
            generate_street_system(1000, 100.0, 0, max_edges=10_000)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            generate_street_system(0, 1.0, 0)


class TestNearestPoint:
    def test_point_on_edge(self, small_map):
        S = small_map
        e = 17
        off = 0.4 * S.lengths[e]
        sp = nearest_street_point(S, S.xy(e, off))
        assert sp.edge == e or np.hypot(*(np.array(sp.xy) - S.xy(e, off))) < 1e-12
        if sp.edge == e:
            assert sp.offset == pytest.approx(off, abs=1e-12)

    def test_tie_lowest_edge(self):
        S = from_segments([[0, 0], [2, 0], [0, 2], [2, 2]], [[2, 3], [0, 1]], H=2.0)
        sp = nearest_street_point(S, (1.0, 1.0))
        assert sp.edge == 0 and sp.offset == pytest.approx(1.0)

    def test_tie_lowest_offset(self):
        # a vertex shared by two edges: both are at distance 0, take the lower id
        S = from_segments([[0, 0], [1, 0], [2, 0]], [[1, 2], [0, 1]], H=2.0)
        sp = nearest_street_point(S, (1.0, 0.5))
        assert sp.edge == 0 and sp.offset == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-0.5, 2.5), st.floats(-0.5, 2.5))
    def test_matches_brute_force(self, small_map, x, y):
        S = small_map
        p = np.array([x, y])
        sp = nearest_street_point(S, p)
        dist, e, off = brute_nearest(S, p)
        assert np.hypot(*(np.array(sp.xy) - p)) == pytest.approx(dist, abs=1e-12)
        assert sp.edge == e and sp.offset == pytest.approx(off, abs=1e-9)

    def test_streetpoint_interpolation(self, small_map):
        S = small_map
        for e in (0, 5, 9):
            sp = S.point(e, S.lengths[e] / 3)
            a, b = S.vertices[S.edges[e]]
            assert np.allclose(sp.xy, a + (b - a) / 3, atol=1e-9)


class TestShortestPath:
    def test_same_point(self, small_map):
        a = small_map.point(3, 0.01)
        path = shortest_path(small_map, a, a)
        assert path.length == 0 and path.legs == ()

    def test_same_edge(self, small_map):
        S = small_map
        a, b = S.point(3, 0.0), S.point(3, S.lengths[3] * 0.7)
        path = shortest_path(S, a, b)
        assert path.length == pytest.approx(S.lengths[3] * 0.7)
        assert len(path.legs) == 1

    def test_matches_enumeration_on_six_edge_graph(self):
        S = from_segments(np.array(HOUSE_VERTS, float) * [1.0, 1.3], HOUSE_EDGES)
        for ea, oa, eb, ob in [(0, 0.2, 5, 0.5), (2, 0.9, 3, 0.1), (1, 0.4, 4, 0.3)]:
            a, b = S.point(ea, oa), S.point(eb, ob)
            path = shortest_path(S, a, b)
            best = math.inf
            for ua in S.edges[ea]:
                for ub in S.edges[eb]:
                    head = oa if ua == S.edges[ea, 0] else S.lengths[ea] - oa
                    tail = ob if ub == S.edges[eb, 0] else S.lengths[eb] - ob
                    for length, _ in simple_paths(S, int(ua), int(ub)):
                        best = min(best, head + length + tail)
            assert path.length == pytest.approx(best, abs=1e-12)
            assert sum(abs(t - f) for _, f, t in path.legs) == pytest.approx(path.length)

    def test_lexicographic_tie_break(self):
        S = from_segments(HOUSE_VERTS, HOUSE_EDGES)
        # vertex 0 to vertex 5 (the far end of edge 3): via 0-1-2 and via 0-3-4-5,
        # both of length 3; the smaller vertex sequence wins
        path = shortest_path(S, S.point(0, 0.0), S.point(3, 1.0))
        assert path.length == pytest.approx(3.0)
        assert path.vertices == (0, 1, 2)

    def test_unreachable(self):
        S = from_segments([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 1], [2, 3]])
        with pytest.raises(UnreachableDestinationError, match="unreachable destination"):
            shortest_path(S, S.point(0, 0.5), S.point(1, 0.5))

    def test_brute_force_on_small_maps(self):
        rng = np.random.default_rng(3)
        for seed in range(8):
            S = generate_street_system(30.0, 0.6, seed)
            assert S.n_edges <= 50
            main = np.flatnonzero(~S.fragment_edges)
            for _ in range(5):
                ea, eb = (int(x) for x in rng.choice(main, 2))
                oa, ob = rng.uniform(0, 1, 2) * S.lengths[[ea, eb]]
                path = shortest_path(S, S.point(ea, oa), S.point(eb, ob))
                if ea == eb:
                    continue
                best = math.inf
                for ua in S.edges[ea]:
                    for ub in S.edges[eb]:
                        head = oa if ua == S.edges[ea, 0] else S.lengths[ea] - oa
                        tail = ob if ub == S.edges[eb, 0] else S.lengths[eb] - ob
                        for length, _ in simple_paths(S, int(ua), int(ub)):
                            best = min(best, head + length + tail)
                assert path.length == pytest.approx(min(best, math.inf), abs=1e-9)


class TestStatistics:
    def test_single_edge(self):
        S = from_segments([[0, 0], [0.5, 0]], [[0, 1]])
        st_ = edge_length_statistics(S)
        assert st_.mean == 0.5 and st_.variance == 0.0 and len(st_.histogram) == 1
        assert not st_.reliable

    def test_excludes_clipped(self, medium_map):
        st_ = edge_length_statistics(medium_map)
        assert st_.n == int((~medium_map.clipped).sum())
        assert st_.reliable
        widths = np.diff(st_.bin_edges)
        assert float(st_.histogram @ widths) == pytest.approx(1.0)

    def test_lambda4_mean(self):
        lengths = interior_lengths(generate_street_system(4.0, 30.0, 2))
        assert abs(lengths.mean() / (1 / 3) - 1) < 0.03

    def test_length_density(self, medium_map):
        assert length_density(medium_map) == pytest.approx(2 * math.sqrt(50), rel=0.06)

    def test_calibrate_l0_on_synthetic_tail(self):
        # survival exp(-2x^2) is below exp(-x^2) everywhere: the first grid value wins
        rng = np.random.default_rng(0)
        x = np.sqrt(rng.exponential(0.5, 50_000))
        assert calibrate_l0(x) == 1.0
        # a heavy tail breaks the bound for every grid value
        with pytest.raises(ValueError):
            calibrate_l0(rng.exponential(1.0, 50_000))

    def test_tail_bound_lambda_scaled(self):
        lam = 4.0
        L = interior_lengths(generate_street_system(lam, 30.0, 9))
        xs = np.linspace(1.0 / math.sqrt(lam), L.max(), 50)
        surv = np.array([(L >= x).mean() for x in xs])
        assert np.all(surv <= np.exp(-lam * xs**2) + 3 / math.sqrt(len(L)))


class TestSerialisation:
    def test_round_trip(self, small_map, tmp_path):
        path = tmp_path / "map.txt"
        write_street_system(small_map, path)
        S = read_street_system(path)
        assert S.lam == small_map.lam and S.H == small_map.H and S.seed == small_map.seed
        assert np.array_equal(S.vertices, small_map.vertices)
        assert np.array_equal(S.edges, small_map.edges)
        assert np.array_equal(S.lengths, small_map.lengths)
        assert np.array_equal(S.clipped, small_map.clipped)

    def test_format(self, line_map):
        buf = io.StringIO()
        write_street_system(line_map, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0].startswith("PVT lambda=")
        assert lines[1] == "V 0 0.0 0.0"
        assert lines[-1] == "E 0 0 1 2.0"

    def test_rejects_inconsistent_lengths(self):
        text = "PVT lambda=1.0 H=1.0 seed=none\nV 0 0 0\nV 1 1 0\nE 0 0 1 0.5\n"
        with pytest.raises(ValueError):
            read_street_system(io.StringIO(text))


def test_streetpoint_is_value_type():
    assert StreetPoint(1, 0.5, (0.0, 0.0)) == StreetPoint(1, 0.5, (0.0, 0.0))
