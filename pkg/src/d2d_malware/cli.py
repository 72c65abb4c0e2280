"""Command-line entry point: ``d2d-sim {run,sweep,meanfield,validate,map}``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .errors import SimulationError
from .harness import (
    ParameterSet,
    SweepSpec,
    load_parameters,
    run_row,
    run_simulation,
    run_sweep,
    seeds_from_int,
    threshold_overlay,
    write_csv,
    write_grid_csv,
    write_runs_csv,
    RUN_COLUMNS,
)
from .infection import write_event_log

log = logging.getLogger("d2d_malware")

PARAM_FLAGS = {
    "lambda": ("lam", float, "seed intensity of the street tessellation (km^-2)"),
    "theta": ("theta", float, "device intensity along streets (km^-1)"),
    "v": ("v", float, "device speed (km/h)"),
    "rho": ("rho", float, "connection time needed to infect (s)"),
    "r": ("r", float, "radio range (km)"),
    "H": ("H", float, "window side (km)"),
    "u": ("u", float, "distance at which propagation is measured (km)"),
    "dt": ("dt", float, "step length (s); must be < rho"),
    "k-max": ("k_max", int, "maximum number of steps"),
    "seed": ("seed", int, "master seed"),
    "reps": ("reps", int, "replications per sweep cell"),
    "placement": ("placement", str, "initial infected placement: nearest-street or nearest-device"),
}


class CliError(SimulationError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_param_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value parameter file; flags override it")
    for flag, (dest, typ, help_) in PARAM_FLAGS.items():
        p.add_argument(f"--{flag}", dest=dest, type=typ, help=help_)
    p.add_argument("--v-range", nargs=2, type=float, metavar=("V1", "V2"), dest="v_range",
                   help="draw each agent's speed uniformly in [V1, V2] km/h")
    p.add_argument("--count-origin", action="store_true", default=None, dest="count_origin",
                   help="let the initially infected device's own displacement reach u")


def _params(args) -> ParameterSet:
    text = args.config.read_text() if args.config else ""
    overrides = {dest: getattr(args, dest) for dest, _, _ in PARAM_FLAGS.values()}
    overrides["v_range"] = tuple(args.v_range) if args.v_range else None
    overrides["count_origin"] = args.count_origin
    return load_parameters(text, overrides)


@contextlib.contextmanager
def _out(path: Path | None):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _values(text: str) -> tuple[str, tuple[float, ...]]:
    if "=" not in text:
        raise CliError(f"axis must look like name=v1,v2,...; got {text!r}")
    name, vals = text.split("=", 1)
    try:
        return name.strip(), tuple(float(x) for x in vals.split(",") if x.strip())
    except ValueError:
        raise CliError(f"bad axis values in {text!r}") from None


# -- subcommands ----------------------------------------------------------------------


def cmd_run(args) -> int:
    params = _params(args).validate()
    seeds = seeds_from_int(params.seed)
    res = run_simulation(params, seeds, record=args.dump_itinerary is not None,
                         keep_state=args.dump_itinerary is not None)
    with _out(args.out) as fh:
        write_csv([run_row(res, seeds)], RUN_COLUMNS, fh)
    if args.events:
        with _out(args.events) as fh:
            write_event_log(res.events, fh)
    if args.dump_itinerary is not None:
        fleet = res.state.fleet
        with _out(args.itinerary_out) as fh:
            fh.write("edge,t_in_s,t_out_s,offset_in_km,nu_kmh\n")
            for leg in fleet.itinerary(args.dump_itinerary):
                fh.write(f"{leg.edge},{leg.t_in!r},{leg.t_out!r},{leg.offset_in!r},{leg.nu * 3600.0!r}\n")
    return 0


def cmd_sweep(args) -> int:
    base = _params(args)
    spec = SweepSpec(_values(args.axis1), _values(args.axis2) if args.axis2 else None,
                     scaling=args.scaling, shared_maps=not args.independent_maps)
    token = args.resume.read_text().strip() if args.resume else None

    def progress(done, total):
        log.info("sweep progress %d/%d", done, total)

    out = run_sweep(spec, base, None, max_runs=args.max_runs,
                    time_budget_s=args.time_budget, resume_token=token, workers=args.workers,
                    progress=progress)
    with _out(args.out) as fh:
        write_grid_csv(out.rows, fh)
    if args.runs_out:
        with _out(args.runs_out) as fh:
            write_runs_csv(out.runs, fh)
    if args.overlay:
        cs = [float(c) for c in args.overlay.split(",")]
        ov = threshold_overlay(out, cs)
        with _out(args.overlay_out) as fh:
            fh.write("c,lambda,v_kmh\n")
            for c, pts in ov.curves.items():
                for lam, v in pts:
                    fh.write(f"{c!r},{lam!r},{v!r}\n")
    if not out.complete:
        dest = args.token_out or Path("sweep.resume")
        dest.write_text(out.resume_token + "\n")
        print(f"PARTIAL runs={len(out.runs)} resume_token_file={dest}", file=sys.stderr)
        return 3
    return 0


def cmd_meanfield(args) -> int:
    from .meanfield import MeanFieldParams, bound_report, write_report_csv

    base = _params(args)
    thetas = [float(x) for x in args.thetas.split(",")] if args.thetas else [base.theta]
    rng = np.random.default_rng(base.seed)
    reports = []
    for th in thetas:
        mp = MeanFieldParams(base.lam, th, base.v, base.rho, base.r)
        reports.append(bound_report(mp, rng, n_p=args.samples_p, n_tau=args.samples_tau))
    with _out(args.out) as fh:
        write_report_csv(reports, fh)
    return 0


def cmd_validate(args) -> int:
    from . import validation

    suites = validation.SUITES if args.suite == "all" else {args.suite: validation.SUITES[args.suite]}
    ok = True
    for name, fn in suites.items():
        for line, passed in fn(seed=args.seed, quick=args.quick):
            print(f"{'PASS' if passed else 'FAIL'} {name}: {line}")
            ok &= passed
    return 0 if ok else 4


def cmd_map(args) -> int:
    from .street_system import (
        edge_length_statistics,
        generate_street_system,
        length_density,
        read_street_system,
        write_street_system,
    )

    if args.read:
        S = read_street_system(args.read)
    else:
        base = _params(args)
        S = generate_street_system(base.lam, base.H, base.seed, max_edges=base.max_edges)
        if args.out:
            write_street_system(S, args.out)
    st = edge_length_statistics(S)
    summary = {
        "lambda": S.lam, "H": S.H, "seed": S.seed, "vertices": S.n_vertices, "edges": S.n_edges,
        "interior_edges": st.n, "mean_length_km": st.mean, "var_length_km2": st.variance,
        "length_density_per_km": length_density(S), "expected_density": 2 * math.sqrt(S.lam),
        "fragment_edges": int(len(S.fragment_edges)),
    }
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="d2d-sim", description="Malware propagation over device-to-device contacts on random street maps.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="one simulation; writes a one-row result CSV")
    _add_param_flags(p)
    p.add_argument("--out", type=Path, help="result CSV (default stdout)")
    p.add_argument("--events", type=Path, help="infection event log CSV")
    p.add_argument("--dump-itinerary", type=int, metavar="AGENT", help="write one agent's legs (debug)")
    p.add_argument("--itinerary-out", type=Path)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid of runs aggregated per cell")
    _add_param_flags(p)
    p.add_argument("--axis1", required=True, help="name=v1,v2,... (e.g. v=3,6,17)")
    p.add_argument("--axis2", help="second axis, same syntax")
    p.add_argument("--scaling", choices=("fixed-H", "lambda-scaled-H"), default="fixed-H")
    p.add_argument("--independent-maps", action="store_true", help="fresh maps per cell instead of shared")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-runs", type=int, help="stop after this many runs and emit a resume token")
    p.add_argument("--time-budget", type=float, help="stop after this many seconds and emit a resume token")
    p.add_argument("--resume", type=Path, help="file holding a resume token")
    p.add_argument("--token-out", type=Path, help="where to write the resume token (default sweep.resume)")
    p.add_argument("--out", type=Path, help="grid CSV (default stdout)")
    p.add_argument("--runs-out", type=Path, help="per-run CSV")
    p.add_argument("--overlay", help="comma-separated c values for v = c/(rho sqrt(lambda)) curves")
    p.add_argument("--overlay-out", type=Path)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("meanfield", help="bound report of the street-succession model")
    _add_param_flags(p)
    p.add_argument("--thetas", help="comma-separated theta values (default: --theta)")
    p.add_argument("--samples-p", type=int, default=100_000)
    p.add_argument("--samples-tau", type=int, default=10_000)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_meanfield)

    p = sub.add_parser("validate", help="geometry, statistics and engine self-checks")
    p.add_argument("--suite", default="all", choices=("all", "geometry", "scaling", "contacts", "neighbors", "discretization"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="smaller instances")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("map", help="generate, save or inspect a street system")
    _add_param_flags(p)
    p.add_argument("--out", type=Path, help="write the street system text file")
    p.add_argument("--read", type=Path, help="read a street system file instead of generating")
    p.set_defaults(func=cmd_map)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SimulationError as exc:
        msg = str(exc).replace('"', "'")
        print(f'ERROR code={exc.code} message="{msg}"', file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        code = "io_error" if isinstance(exc, OSError) else "invalid_input"
        msg = str(exc).replace('"', "'")
        print(f'ERROR code={code} message="{msg}"', file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
