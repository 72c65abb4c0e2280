"""Experiment driver: parameter sets, seeding, single runs, sweeps and CSV output."""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DiscretizationContractError, InvalidParametersError
from .infection import SimState, event_log, step
from .metrics import RunResult, TauTracker, infection_rate, propagation_speed
from .point_process import PLACEMENT_MODES, place_agents
from .street_system import DEFAULT_MAX_EDGES, StreetSystem, generate_street_system

log = logging.getLogger(__name__)

HORIZON_S = 24 * 3600.0
SCALINGS = ("fixed-H", "lambda-scaled-H")


@dataclass(frozen=True)
class ParameterSet:
    """Model and protocol parameters.

    Units: ``lam`` km^-2, ``theta`` km^-1, ``v`` km/h, ``rho`` and ``dt`` s,
    ``r``, ``H`` and ``u`` km. ``dt`` defaults to ``0.9 rho`` and ``k_max`` to a
    24 h horizon. ``v_range`` draws each agent's speed uniformly from an interval
    instead of using the common ``v``.
    """

    lam: float = 50.0
    theta: float = 3.0
    v: float = 5.0
    rho: float = 20.0
    r: float = 0.2
    H: float = 10.0
    u: float = 3.5
    dt: float | None = None
    k_max: int | None = None
    v_range: tuple[float, float] | None = None
    seed: int = 0
    reps: int = 20
    placement: str = "nearest-street"
    count_origin: bool = False
    max_edges: int = DEFAULT_MAX_EDGES

    def resolved(self) -> "ParameterSet":
        dt = 0.9 * self.rho if self.dt is None else self.dt
        k_max = self.k_max
        if k_max is None and dt > 0:
            k_max = math.ceil(HORIZON_S / dt)
        return replace(self, dt=dt, k_max=k_max)

    def validate(self) -> "ParameterSet":
        p = self.resolved()
        for name in ("lam", "v", "rho", "r", "H", "u", "dt"):
            val = getattr(p, name)
            if not (isinstance(val, (int, float)) and val > 0 and math.isfinite(val)):
                raise InvalidParametersError(f"{name} must be a positive finite number, got {val!r}")
        if not p.theta >= 0:
            raise InvalidParametersError(f"theta must be non-negative, got {p.theta!r}")
        if not p.dt < p.rho:
            raise DiscretizationContractError(
                f"discretization contract violated: dt={p.dt} must be < rho={p.rho}"
            )
        if p.k_max is None or p.k_max < 1:
            raise InvalidParametersError(f"k_max must be >= 1, got {p.k_max!r}")
        if p.reps < 1:
            raise InvalidParametersError(f"reps must be >= 1, got {p.reps}")
        if p.placement not in PLACEMENT_MODES:
            raise InvalidParametersError(f"placement must be one of {PLACEMENT_MODES}, got {p.placement!r}")
        if p.v_range is not None:
            lo, hi = p.v_range
            if not 0 < lo <= hi:
                raise InvalidParametersError(f"v_range must satisfy 0 < v1 <= v2, got {p.v_range}")
        if p.u > 0.45 * p.H:
            log.warning("u=%.3g exceeds 0.45*H=%.3g; border effects may bias tau_u", p.u, 0.45 * p.H)
        return p

    def describe(self) -> dict:
        d = asdict(self)
        d["v_range"] = list(self.v_range) if self.v_range else None
        return d


# -- configuration ------------------------------------------------------------------

CONFIG_KEYS: dict[str, tuple[str, Callable]] = {
    "lambda": ("lam", float),
    "theta": ("theta", float),
    "v": ("v", float),
    "rho": ("rho", float),
    "r": ("r", float),
    "H": ("H", float),
    "u": ("u", float),
    "dt": ("dt", float),
    "k_max": ("k_max", int),
    "seed": ("seed", int),
    "reps": ("reps", int),
    "placement": ("placement", str),
    "count_origin": ("count_origin", lambda s: s.strip().lower() in ("1", "true", "yes", "on")),
    "max_edges": ("max_edges", int),
}


def parse_config(text: str) -> dict[str, object]:
    """Parse flat ``key = value`` lines (``#`` starts a comment) into ParameterSet fields."""
    out: dict[str, object] = {}
    v1 = v2 = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParametersError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = (x.strip() for x in line.split("=", 1))
        if key in ("v1", "v2"):
            try:
                num = float(val)
            except ValueError:
                raise InvalidParametersError(f"config line {lineno}: bad value for {key}: {val!r}") from None
            v1, v2 = (num, v2) if key == "v1" else (v1, num)
            continue
        if key not in CONFIG_KEYS:
            raise InvalidParametersError(f"config line {lineno}: unknown key {key!r}")
        name, conv = CONFIG_KEYS[key]
        try:
            out[name] = conv(val)
        except ValueError:
            raise InvalidParametersError(f"config line {lineno}: bad value for {key}: {val!r}") from None
    if (v1 is None) != (v2 is None):
        raise InvalidParametersError("v1 and v2 must be given together")
    if v1 is not None:
        out["v_range"] = (v1, v2)
    return out


def load_parameters(text: str = "", overrides: dict | None = None) -> ParameterSet:
    values = parse_config(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ParameterSet(**values)


# -- seeding ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSeeds:
    map: int
    devices: int
    mobility: int


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(2, np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64))


def _cell_hash(cell: dict) -> int:
    blob = json.dumps({k: repr(v) for k, v in sorted(cell.items())}, sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


def seeds_from_int(seed: int) -> RunSeeds:
    m, d, k = np.random.SeedSequence(seed).spawn(3)
    return RunSeeds(_seed_int(m), _seed_int(d), _seed_int(k))


def derive_seeds(master: int, cell: dict, rep: int, shared_map: bool) -> RunSeeds:
    """Seeds of one run of a sweep cell.

    Device and mobility seeds depend on (master, cell, rep). With
    ``shared_map`` the map seed depends on (master, rep) only.
    """
    h = _cell_hash(cell)
    mk = (0, rep) if shared_map else (1, h, rep)
    return RunSeeds(
        _seed_int(np.random.SeedSequence(master, spawn_key=mk)),
        _seed_int(np.random.SeedSequence(master, spawn_key=(2, h, rep))),
        _seed_int(np.random.SeedSequence(master, spawn_key=(3, h, rep))),
    )


# -- single run ------------------------------------------------------------------------


def build_state(params: ParameterSet, seeds: RunSeeds, S: StreetSystem | None = None,
                record: bool = False) -> SimState:
    p = params.validate()
    if S is None:
        S = generate_street_system(p.lam, p.H, seeds.map, max_edges=p.max_edges)
    rng = np.random.default_rng(seeds.devices)
    placement = place_agents(S, p.theta, rng, p.placement)
    if p.v_range is None:
        speeds = p.v
    else:
        speeds = rng.uniform(p.v_range[0], p.v_range[1], size=placement.n_agents)
    return SimState.from_placement(S, placement, speeds, np.random.SeedSequence(seeds.mobility),
                                   dt=p.dt, rho=p.rho, r=p.r, record=record)


def run_simulation(params: ParameterSet, seed: int | RunSeeds | None = None, *,
                   street_system: StreetSystem | None = None, record: bool = False,
                   keep_state: bool = False) -> RunResult:
    """Generate a map and agents, then step until ``tau_u`` is reached or ``k_max`` steps have run."""
    p = params.validate()
    seeds = seeds_from_int(p.seed if seed is None else seed) if not isinstance(seed, RunSeeds) else seed
    state = build_state(p, seeds, street_system, record)
    tracker = TauTracker(state, p.u, count_origin=p.count_origin)
    counts = (0, 0, 0)
    for _ in range(p.k_max):
        report = step(state)
        if tracker.update(report) is not None:
            counts = tracker.counts_at_tau(report)
            log.debug("tau_u reached at %.1fs after %d steps; stopping early", tracker.tau, state.k)
            break
    result = RunResult(
        tau_u=tracker.tau,
        infected_at_tau=counts[0],
        in_ball_at_tau=counts[1],
        infected_in_ball_at_tau=counts[2],
        u=p.u,
        seed=seeds.mobility,
        params=p.describe(),
        events=event_log(state),
        n_agents=state.n,
        steps=state.k,
        isolation_events=state.fleet.isolation_events,
    )
    if keep_state:
        result.state = state  # type: ignore[attr-defined]
    return result


RUN_COLUMNS = ("lambda", "theta", "v", "rho", "r", "u", "H", "dt", "k_max", "rep", "map_seed",
               "device_seed", "mobility_seed", "n_agents", "steps", "reached", "tau_u_s",
               "infected_at_tau", "in_ball_at_tau", "infected_in_ball_at_tau", "V_u_kmh", "R_u",
               "R_u_in_ball")


def run_row(res: RunResult, seeds: RunSeeds, rep: int = 0) -> dict:
    p = res.params
    rate = infection_rate(res)
    speed, _ = propagation_speed([res])
    return {
        "lambda": p["lam"], "theta": p["theta"], "v": p["v"], "rho": p["rho"], "r": p["r"],
        "u": p["u"], "H": p["H"], "dt": p["dt"], "k_max": p["k_max"], "rep": rep,
        "map_seed": seeds.map, "device_seed": seeds.devices, "mobility_seed": seeds.mobility,
        "n_agents": res.n_agents, "steps": res.steps, "reached": int(res.reached),
        "tau_u_s": res.tau_u if res.reached else "", "infected_at_tau": res.infected_at_tau,
        "in_ball_at_tau": res.in_ball_at_tau, "infected_in_ball_at_tau": res.infected_in_ball_at_tau,
        "V_u_kmh": speed, "R_u": rate.raw, "R_u_in_ball": rate.in_ball,
    }


def write_csv(rows: Iterable[dict], columns: Sequence[str], fh) -> None:
    fh.write(",".join(columns) + "\n")
    for row in rows:
        fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# -- sweeps -------------------------------------------------------------------------------

AXIS_NAMES = {"lambda": "lam", "lam": "lam", "theta": "theta", "v": "v", "rho": "rho", "r": "r",
              "H": "H", "u": "u", "dt": "dt"}


@dataclass(frozen=True)
class SweepSpec:
    axis1: tuple[str, tuple[float, ...]]
    axis2: tuple[str, tuple[float, ...]] | None = None
    scaling: str = "fixed-H"
    shared_maps: bool = True

    def __post_init__(self):
        axes = [self.axis1] + ([self.axis2] if self.axis2 else [])
        names = []
        for name, values in axes:
            if name not in AXIS_NAMES:
                raise InvalidParametersError(f"unknown sweep axis {name!r}")
            if not len(values):
                raise InvalidParametersError(f"axis {name!r} has no values")
            names.append(AXIS_NAMES[name])
        if len(set(names)) != len(names):
            raise InvalidParametersError("sweep axes must name distinct parameters")
        if self.scaling not in SCALINGS:
            raise InvalidParametersError(f"scaling must be one of {SCALINGS}")
        if self.scaling == "lambda-scaled-H" and any(n in ("H", "u") for n in names):
            raise InvalidParametersError("lambda-scaled-H sets H and u; they cannot be sweep axes")

    @property
    def axis_fields(self) -> list[str]:
        axes = [self.axis1] + ([self.axis2] if self.axis2 else [])
        return [AXIS_NAMES[n] for n, _ in axes]

    def cells(self, base: ParameterSet) -> list[tuple[dict, ParameterSet]]:
        axes = [self.axis1] + ([self.axis2] if self.axis2 else [])
        out = []
        for combo in itertools.product(*[values for _, values in axes]):
            cell = {AXIS_NAMES[n]: float(x) for (n, _), x in zip(axes, combo)}
            p = replace(base, **cell)
            if self.scaling == "lambda-scaled-H":
                H = scaled_window(p.lam)
                p = replace(p, H=H, u=0.45 * H)
            out.append((cell, p))
        return out


def scaled_window(lam: float) -> float:
    """Window side ``20 lam^(-1/4)`` km, keeping the expected number of agents per cell comparable."""
    return 20.0 * lam ** -0.25


@dataclass
class SweepRow:
    cell: dict
    params: ParameterSet
    seed_count: int
    V_u: float
    V_u_se: float
    R_u: float
    R_u_se: float
    R_u_in_ball: float
    not_reached: int

    def csv_row(self) -> dict:
        p = self.params
        return {"lambda": p.lam, "theta": p.theta, "v": p.v, "rho": p.rho, "r": p.r, "u": p.u,
                "H": p.H, "seed_count": self.seed_count, "V_u_kmh": self.V_u, "R_u": self.R_u,
                "not_reached_count": self.not_reached}


GRID_COLUMNS = ("lambda", "theta", "v", "rho", "r", "u", "H", "seed_count", "V_u_kmh", "R_u",
                "not_reached_count")


@dataclass
class SweepOutcome:
    spec: SweepSpec
    rows: list[SweepRow]
    runs: list[dict]
    complete: bool
    resume_token: str | None = None


@dataclass(frozen=True)
class _Unit:
    cell_index: int
    rep: int
    params: ParameterSet
    seeds: RunSeeds


_MAP_CACHE: dict[tuple, StreetSystem] = {}


def _shared_map(p: ParameterSet, seed: int) -> StreetSystem:
    key = (p.lam, p.H, seed, p.max_edges)
    S = _MAP_CACHE.get(key)
    if S is None:
        if len(_MAP_CACHE) >= 64:
            _MAP_CACHE.clear()
        S = generate_street_system(p.lam, p.H, seed, max_edges=p.max_edges)
        _MAP_CACHE[key] = S
    return S


def _run_unit(unit: _Unit) -> dict:
    S = _shared_map(unit.params, unit.seeds.map)
    res = run_simulation(unit.params, unit.seeds, street_system=S)
    row = run_row(res, unit.seeds, unit.rep)
    row["cell_index"] = unit.cell_index
    return row


def _spec_digest(spec: SweepSpec, base: ParameterSet, reps: int) -> str:
    blob = json.dumps([repr(spec), repr(base), reps]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _encode_token(digest: str, runs: list[dict]) -> str:
    payload = json.dumps({"digest": digest, "runs": runs}, sort_keys=True).encode()
    return base64.urlsafe_b64encode(zlib.compress(payload, 9)).decode()


def _decode_token(token: str) -> dict:
    try:
        return json.loads(zlib.decompress(base64.urlsafe_b64decode(token.encode())))
    except Exception as exc:
        raise InvalidParametersError(f"malformed resume token: {exc}") from None


def run_sweep(spec: SweepSpec, base: ParameterSet, reps: int | None = None, *,
              max_runs: int | None = None, time_budget_s: float | None = None,
              resume_token: str | None = None, workers: int = 1,
              progress: Callable[[int, int], None] | None = None) -> SweepOutcome:
    """Run ``reps`` simulations per grid cell and aggregate them per cell.

    ``max_runs`` and ``time_budget_s`` cap the work done in this call; when a cap
    is hit the outcome is partial and carries a token that resumes the sweep.
    """
    base = base.validate()
    reps = base.reps if reps is None else reps
    if reps < 1:
        raise InvalidParametersError("reps must be >= 1")
    cells = spec.cells(base)
    shared = spec.shared_maps
    units = []
    for ci, (cell, p) in enumerate(cells):
        p.validate()
        for rep in range(reps):
            units.append(_Unit(ci, rep, p, derive_seeds(base.seed, cell, rep, shared)))
    digest = _spec_digest(spec, base, reps)
    done: dict[tuple[int, int], dict] = {}
    if resume_token:
        tok = _decode_token(resume_token)
        if tok.get("digest") != digest:
            raise InvalidParametersError("resume token belongs to a different sweep")
        for row in tok["runs"]:
            done[(row["cell_index"], row["rep"])] = row
    todo = [u for u in units if (u.cell_index, u.rep) not in done]
    if max_runs is not None:
        todo = todo[:max_runs]
    t0 = time.monotonic()
    finished = len(done)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_unit, todo):
                done[(row["cell_index"], row["rep"])] = row
                finished += 1
                if progress:
                    progress(finished, len(units))
    else:
        for u in todo:
            if time_budget_s is not None and time.monotonic() - t0 > time_budget_s:
                break
            row = _run_unit(u)
            done[(u.cell_index, u.rep)] = row
            finished += 1
            if progress:
                progress(finished, len(units))
    runs = [done[k] for k in sorted(done)]
    complete = len(done) == len(units)
    rows = _aggregate(cells, runs) if complete else _aggregate(cells, runs, partial=True)
    token = None if complete else _encode_token(digest, runs)
    return SweepOutcome(spec, rows, runs, complete, token)


def _aggregate(cells, runs: list[dict], partial: bool = False) -> list[SweepRow]:
    by_cell: dict[int, list[dict]] = {}
    for row in runs:
        by_cell.setdefault(row["cell_index"], []).append(row)
    out = []
    for ci, (cell, p) in enumerate(cells):
        rs = sorted(by_cell.get(ci, []), key=lambda r: r["rep"])
        if not rs:
            continue
        speeds = np.array([r["V_u_kmh"] for r in rs], dtype=float)
        rates = np.array([r["R_u"] for r in rs], dtype=float)
        inball = np.array([r["R_u_in_ball"] for r in rs], dtype=float)
        n = len(rs)
        se = (lambda x: float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan)
        out.append(SweepRow(
            cell=cell, params=p, seed_count=n,
            V_u=float(speeds.mean()), V_u_se=se(speeds),
            R_u=float(rates.mean()), R_u_se=se(rates),
            R_u_in_ball=float(inball.mean()),
            not_reached=int(sum(1 for r in rs if not r["reached"])),
        ))
    return out


def write_grid_csv(rows: Sequence[SweepRow], fh) -> None:
    write_csv([r.csv_row() for r in rows], GRID_COLUMNS, fh)


def write_runs_csv(runs: Sequence[dict], fh) -> None:
    write_csv(runs, RUN_COLUMNS, fh)


# -- threshold curves ---------------------------------------------------------------------


def threshold_speed(lam, rho_s: float, c: float):
    """Speed (km/h) with ``sqrt(lam) * rho * v = c``."""
    return c / (rho_s / 3600.0 * np.sqrt(lam))


def threshold_product(lam: float, rho_s: float, v: float) -> float:
    """The dimensionless ``sqrt(lam) * rho * v`` (``rho`` in hours, ``v`` in km/h)."""
    return math.sqrt(lam) * rho_s / 3600.0 * v


@dataclass
class Overlay:
    curves: dict[float, list[tuple[float, float]]]
    products: list[float] = field(default_factory=list)


def threshold_overlay(outcome: SweepOutcome, cs: Sequence[float] = (2 / 3, 3 / 2)) -> Overlay:
    """Threshold curves ``v(lam) = c / (rho sqrt(lam))`` over the sweep's ``lam`` values."""
    if set(outcome.spec.axis_fields) != {"lam", "v"}:
        raise InvalidParametersError("threshold overlay needs a sweep over lambda and v")
    lams = sorted({r.params.lam for r in outcome.rows})
    rhos = {r.params.rho for r in outcome.rows}
    if len(rhos) != 1:
        raise InvalidParametersError("threshold overlay needs a single rho")
    rho = rhos.pop()
    curves = {c: [(lam, float(threshold_speed(lam, rho, c))) for lam in lams] for c in cs}
    products = [threshold_product(r.params.lam, r.params.rho, r.params.v) for r in outcome.rows]
    return Overlay(curves, products)
