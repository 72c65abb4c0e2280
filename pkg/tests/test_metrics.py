"""Propagation speed, infection rate and the detection of tau_u."""

from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import line_state

from d2d_malware.harness import ParameterSet, RunSeeds, run_simulation
from d2d_malware.infection import step
from d2d_malware.metrics import (
    RunResult,
    TauTracker,
    _segment_crossing,
    infection_rate,
    propagation_speed,
    tau_u_from_trace,
)


def result(tau, infected=1, in_ball=1, infected_in_ball=1, u=3.5):
    return RunResult(tau, infected, in_ball, infected_in_ball, u, 0)


class TestPropagationSpeed:
    def test_single_run(self):
        assert propagation_speed([result(1800.0)]) == (pytest.approx(7.0), 0)

    def test_mean_of_reciprocals(self):
        assert propagation_speed([result(3600.0), result(7200.0)])[0] == pytest.approx(2.625)

    def test_not_reached(self):
        assert propagation_speed([result(None), result(None)]) == (0.0, 2)
        speed, missed = propagation_speed([result(3600.0), result(None)])
        assert speed == pytest.approx(1.75) and missed == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            propagation_speed([])

    def test_order_and_scale(self):
        rs = [result(t) for t in (900.0, 4000.0, 12000.0)]
        a, _ = propagation_speed(rs)
        assert propagation_speed(rs[::-1])[0] == a
        assert propagation_speed(rs, u=7.0)[0] == pytest.approx(2 * a)


class TestInfectionRate:
    def test_not_reached(self):
        rate = infection_rate(result(None))
        assert rate.no_propagation and rate.raw == 0.0

    def test_all_in_ball_infected(self):
        rate = infection_rate(result(100.0, infected=12, in_ball=12, infected_in_ball=12))
        assert rate.raw == 1.0 and rate.in_ball == 1.0 and not rate.no_propagation

    def test_outside_agent_counts_in_raw_only(self):
        # the origin plus the far agent that reached distance u; only the origin is inside the ball
        res = result(100.0, infected=2, in_ball=5, infected_in_ball=1)
        rate = infection_rate(res)
        assert rate.raw == pytest.approx(2 / 5) and rate.in_ball == pytest.approx(1 / 5)
        assert res.infected_outside_ball == 1


class TestTau:
    def test_segment_crossing(self):
        p0 = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 0.5]])
        w = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        s = _segment_crossing(p0, w, np.zeros(2), 1.0, np.array([3.0, 3.0, 0.1]))
        assert s[0] == pytest.approx(1.0) and s[1] == 0.0 and s[2] == math.inf

    def test_origin_alone(self):
        res = run_simulation(ParameterSet(lam=50, H=2.0, theta=0.0, u=0.8, k_max=500), 3)
        assert not res.reached and res.steps == 500 and res.n_agents == 1
        assert infection_rate(res).no_propagation

    def test_infection_beyond_u(self):
        # agent 1 sits 0.1 km from the origin and is infected at 20 s; u = 0.05
        s = line_state([1.0, 1.1], [3.0, 3.1])
        tracker = TauTracker(s, 0.05)
        for _ in range(3):
            tau = tracker.update(step(s))
        assert tau == pytest.approx(20.0) and tracker.agent == 1

    def test_origin_displacement(self):
        s = line_state([1.0, 5.0], [3.0, 6.0])
        ignore, count = TauTracker(s, 0.5), TauTracker(s, 0.5, count_origin=True)
        for _ in range(40):
            rep = step(s)
            ignore.update(rep)
            count.update(rep)
        assert ignore.tau is None
        assert count.tau == pytest.approx(0.5 / (5 / 3600))

    def test_bad_u(self):
        with pytest.raises(ValueError):
            TauTracker(line_state([1.0], [2.0]), 0.0)


@pytest.fixture(scope="module")
def recorded_run():
    p = ParameterSet(lam=50, H=2.5, theta=12, v=5, u=0.9)
    res = run_simulation(p, RunSeeds(3, 4, 5), record=True, keep_state=True)
    assert res.reached
    return p, res


class TestAgainstTrace:
    def test_matches_exact_trace(self, recorded_run):
        _, res = recorded_run
        s = res.state
        assert tau_u_from_trace(s.fleet, s.T, s.origin, res.u) == pytest.approx(res.tau_u, abs=1e-9)

    def test_matches_fine_scan(self, recorded_run):
        p, res = recorded_run
        s = res.state
        fine = p.resolved().dt / 10
        center = np.array(s.fleet.position_at(s.origin, 0.0).xy)
        hit = None
        for t in np.arange(0.0, s.time + fine, fine):
            t = min(t, s.time)
            for i in np.flatnonzero(s.T <= t):
                if i == s.origin:
                    continue
                if np.hypot(*(np.array(s.fleet.position_at(int(i), t).xy) - center)) >= res.u:
                    hit = t
                    break
            if hit is not None:
                break
        assert hit is not None
        assert res.tau_u <= hit + 1e-9 and hit - res.tau_u <= fine

    def test_recount(self, recorded_run):
        _, res = recorded_run
        s = res.state
        center = np.array(s.fleet.position_at(s.origin, 0.0).xy)
        xy = np.array([s.fleet.position_at(i, res.tau_u).xy for i in range(s.n)])
        d = np.hypot(*(xy - center).T)
        infected = s.T <= res.tau_u
        assert res.infected_at_tau == int(infected.sum())
        assert res.in_ball_at_tau == int((d < res.u).sum())
        assert res.infected_in_ball_at_tau == int((infected & (d < res.u)).sum())
        assert res.in_ball_at_tau >= 1
