"""Parameter handling, seeding, single runs, sweeps and threshold curves."""

from __future__ import annotations

import io
import logging
import math
import random

import numpy as np
import pytest

from d2d_malware.errors import DiscretizationContractError, InvalidParametersError
from d2d_malware.harness import (
    GRID_COLUMNS,
    RUN_COLUMNS,
    ParameterSet,
    SweepSpec,
    _aggregate,
    derive_seeds,
    load_parameters,
    parse_config,
    run_row,
    run_simulation,
    run_sweep,
    scaled_window,
    seeds_from_int,
    threshold_overlay,
    threshold_speed,
    write_csv,
    write_grid_csv,
)

SMALL = ParameterSet(lam=50, H=2.0, theta=6, v=5, u=0.8)


def csv_text(res, seeds):
    buf = io.StringIO()
    write_csv([run_row(res, seeds)], RUN_COLUMNS, buf)
    return buf.getvalue()


class TestParameters:
    def test_defaults(self):
        p = ParameterSet().validate()
        assert (p.lam, p.theta, p.v, p.rho, p.r, p.H, p.u) == (50, 3, 5, 20, 0.2, 10, 3.5)
        assert p.dt == pytest.approx(18.0)
        assert p.k_max == math.ceil(86400 / 18.0)

    @pytest.mark.parametrize("field,value", [("lam", 0), ("v", -1), ("r", math.nan), ("theta", -0.1),
                                             ("reps", 0), ("placement", "somewhere"), ("k_max", 0),
                                             ("v_range", (5.0, 2.0))])
    def test_invalid(self, field, value):
        with pytest.raises(InvalidParametersError):
            ParameterSet(**{field: value}).validate()

    def test_contract(self):
        with pytest.raises(DiscretizationContractError):
            ParameterSet(dt=20.0).validate()

    def test_window_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            ParameterSet(H=5.0, u=3.0).validate()
        assert "0.45*H" in caplog.text

    def test_parse_config(self):
        text = "# defaults\nlambda = 10\ntheta=2.5  # per km\nv1 = 3\nv2 = 9\ncount_origin = yes\nk_max=100\n"
        cfg = parse_config(text)
        assert cfg == {"lam": 10.0, "theta": 2.5, "v_range": (3.0, 9.0), "count_origin": True, "k_max": 100}

    @pytest.mark.parametrize("text", ["bogus = 1", "lambda = fast", "lambda 10", "v1 = 3"])
    def test_parse_errors(self, text):
        with pytest.raises(InvalidParametersError):
            parse_config(text)

    def test_overrides(self):
        p = load_parameters("lambda = 10\ntheta = 2", {"theta": 4.0, "v": None})
        assert p.lam == 10 and p.theta == 4.0 and p.v == 5.0


class TestSeeds:
    def test_shared_map_seeds(self):
        a = derive_seeds(7, {"v": 3.0}, 0, True)
        b = derive_seeds(7, {"v": 6.0}, 0, True)
        c = derive_seeds(7, {"v": 3.0}, 1, True)
        assert a.map == b.map != c.map
        assert a.devices != b.devices and a.mobility != b.mobility

    def test_independent_maps(self):
        a = derive_seeds(7, {"v": 3.0}, 0, False)
        b = derive_seeds(7, {"v": 6.0}, 0, False)
        assert a.map != b.map

    def test_no_reuse_across_cells(self):
        seen = set()
        for v in (1.0, 2.0, 3.0):
            for rep in range(5):
                s = derive_seeds(1, {"v": v}, rep, True)
                seen.add((s.devices, s.mobility))
        assert len(seen) == 15

    def test_stable(self):
        assert seeds_from_int(3) == seeds_from_int(3) != seeds_from_int(4)


class TestRuns:
    def test_default_run(self):
        res = run_simulation(ParameterSet(), 1)
        assert res.steps >= 1 and res.n_agents > 3000
        if res.reached:
            assert res.tau_u > 0 and res.in_ball_at_tau >= 1

    def test_deterministic_csv(self):
        seeds = seeds_from_int(11)
        a = csv_text(run_simulation(SMALL, seeds), seeds)
        b = csv_text(run_simulation(SMALL, seeds), seeds)
        assert a == b

    def test_theta_zero(self):
        res = run_simulation(ParameterSet(theta=0.0), 5)
        assert not res.reached and res.steps == ParameterSet().validate().k_max
        row = run_row(res, seeds_from_int(5))
        assert row["reached"] == 0 and row["R_u"] == 0.0 and row["tau_u_s"] == ""

    def test_speed_interval(self):
        res = run_simulation(ParameterSet(lam=50, H=2.0, theta=6, v_range=(3.0, 9.0), u=0.8), 2,
                             keep_state=True)
        speeds = res.state.fleet.speed_kmh
        assert speeds.min() >= 3.0 and speeds.max() <= 9.0 and speeds.std() > 0.5

    def test_invalid_rejected_before_work(self):
        with pytest.raises(InvalidParametersError):
            run_simulation(ParameterSet(H=-1.0), 0)


class TestSweep:
    def test_single_cell_equals_run(self):
        spec = SweepSpec(("v", (5.0,)))
        base = SMALL
        out = run_sweep(spec, base, reps=1)
        seeds = derive_seeds(base.seed, {"v": 5.0}, 0, True)
        res = run_simulation(base, seeds)
        row = run_row(res, seeds)
        run = {k: out.runs[0][k] for k in RUN_COLUMNS}
        assert run == row
        assert out.complete and out.rows[0].seed_count == 1

    def test_lambda_scaled_windows(self):
        assert scaled_window(10) == pytest.approx(20 / 10**0.25)
        assert scaled_window(10) == pytest.approx(11.25, abs=0.005)
        assert scaled_window(200) == pytest.approx(5.32, abs=0.005)
        spec = SweepSpec(("lambda", (10.0, 200.0)), scaling="lambda-scaled-H")
        cells = spec.cells(ParameterSet())
        assert [round(p.H, 2) for _, p in cells] == [11.25, 5.32]
        assert all(p.u == pytest.approx(0.45 * p.H) for _, p in cells)

    def test_spec_validation(self):
        with pytest.raises(InvalidParametersError):
            SweepSpec(("v", (1.0,)), ("v", (2.0,)))
        with pytest.raises(InvalidParametersError):
            SweepSpec(("speed", (1.0,)))
        with pytest.raises(InvalidParametersError):
            SweepSpec(("H", (1.0,)), scaling="lambda-scaled-H")

    def test_resume(self):
        spec = SweepSpec(("theta", (4.0, 8.0)))
        full = run_sweep(spec, SMALL, reps=2)
        part = run_sweep(spec, SMALL, reps=2, max_runs=3)
        assert not part.complete and part.resume_token and len(part.runs) == 3
        rest = run_sweep(spec, SMALL, reps=2, resume_token=part.resume_token)
        assert rest.complete and rest.runs == full.runs
        a, b = io.StringIO(), io.StringIO()
        write_grid_csv(full.rows, a)
        write_grid_csv(rest.rows, b)
        assert a.getvalue() == b.getvalue()
        with pytest.raises(InvalidParametersError):
            run_sweep(SweepSpec(("theta", (4.0,))), SMALL, reps=2, resume_token=part.resume_token)
        with pytest.raises(InvalidParametersError):
            run_sweep(spec, SMALL, reps=2, resume_token="not-a-token")

    def test_aggregation_order_independent(self):
        spec = SweepSpec(("theta", (4.0, 8.0)))
        out = run_sweep(spec, SMALL, reps=3)
        runs = list(out.runs)
        random.Random(0).shuffle(runs)
        rows = _aggregate(spec.cells(SMALL.validate()), runs)
        a, b = io.StringIO(), io.StringIO()
        write_grid_csv(out.rows, a)
        write_grid_csv(rows, b)
        assert a.getvalue() == b.getvalue()
        assert a.getvalue().splitlines()[0] == ",".join(GRID_COLUMNS)


class TestThresholds:
    def test_v0(self):
        assert threshold_speed(50, 20, 2 / 3) == pytest.approx(16.97, abs=0.005)
        assert threshold_speed(50, 20, 0.0) == 0.0

    def test_overlay(self):
        spec = SweepSpec(("lambda", (20.0, 60.0)), ("v", (5.0,)), scaling="lambda-scaled-H")
        out = run_sweep(spec, ParameterSet(theta=0.5, k_max=50), reps=1)
        ov = threshold_overlay(out, (0.0, 2 / 3, 1.5))
        assert ov.curves[0.0] == [(20.0, 0.0), (60.0, 0.0)]
        for c in (2 / 3, 1.5):
            for lam, v in ov.curves[c]:
                assert v == pytest.approx(c * 3600 / (20 * np.sqrt(lam)), rel=1e-12)
        assert ov.products == pytest.approx([np.sqrt(20) * 20 / 3600 * 5, np.sqrt(60) * 20 / 3600 * 5])

    def test_overlay_needs_lambda_and_v(self):
        out = run_sweep(SweepSpec(("theta", (0.5,))), ParameterSet(k_max=5, H=2.0, u=0.8), reps=1)
        with pytest.raises(InvalidParametersError):
            threshold_overlay(out)
