"""Simplified street-succession model and its analytic bounds on the first infection time.

The infected agent walks through an i.i.d. sequence of streets whose lengths
follow the typical edge-length law of the tessellation. On every street the
other agents form a Poisson process of intensity ``theta`` and move at the
same speed in either direction. This is a heuristic benchmark for the full
simulator, not a limit of it.

Units: ``lam`` km^-2, ``theta`` km^-1, ``v`` km/h, ``rho`` s, ``r`` km; all
returned times are in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .street_system import calibrate_l0, unit_length_pool

CENSOR_FACTOR = 200.0
P_FLOOR = 1e-4


@dataclass(frozen=True)
class MeanFieldParams:
    lam: float
    theta: float
    v: float
    rho: float
    r: float
    lengths: np.ndarray | None = None  # edge lengths at intensity ``lam``; default: scaled unit pool

    def __post_init__(self):
        for name in ("lam", "v", "rho", "r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.theta < 0:
            raise ValueError(f"theta must be non-negative, got {self.theta}")
        if self.lengths is not None and len(self.lengths) == 0:
            raise ValueError("empty edge-length pool")

    @property
    def pool(self) -> np.ndarray:
        if self.lengths is not None:
            return np.asarray(self.lengths, dtype=float)
        return unit_length_pool() / math.sqrt(self.lam)

    @property
    def speed(self) -> float:
        """Speed in km/s."""
        return self.v / 3600.0


def mean_street_time(lam: float, v: float) -> float:
    """Expected time (s) spent on one street: ``E[L] / v`` with ``E[L] = 2/(3 sqrt(lam))``."""
    return 2.0 / (3.0 * math.sqrt(lam) * v) * 3600.0


# -- one street ----------------------------------------------------------------


def street_episodes(params: MeanFieldParams, n: int, rng: np.random.Generator,
                    directions: tuple[str, ...] = ("same", "opposite")):
    """Simulate ``n`` independent street traversals.

    Returns ``(L, first)``: street lengths (km) and the time (s, from entering
    the street) of the first infection on it, ``inf`` when nobody is infected.

    Agents moving the same way keep their distance ``|x|`` to the infected
    agent and overlap on the street for ``(L - |x|)/v``; their virtual
    positions at entry cover ``[-L, L]`` (those behind enter later). Agents
    moving the other way cover ``[0, 2L]`` and meet it head-on at closing
    speed ``2v``. ``directions`` restricts which group may be infected
    (both groups are always drawn, so random streams do not depend on it).
    """
    L = rng.choice(params.pool, size=n)
    first = np.full(n, np.inf)
    if params.theta == 0 or n == 0:
        return L, first
    v, rho, r = params.speed, params.rho, params.r
    half = params.theta / 2.0

    k = rng.poisson(half * 2 * L)
    owner = np.repeat(np.arange(n), k)
    x = (rng.uniform(size=len(owner)) * 2 - 1) * L[owner]
    ax = np.abs(x)
    ok = (ax <= r) & ((L[owner] - ax) / v >= rho) & ("same" in directions)
    t = np.maximum(0.0, -x / v) + rho
    np.minimum.at(first, owner[ok], t[ok])

    k = rng.poisson(half * 2 * L)
    owner = np.repeat(np.arange(n), k)
    Lo = L[owner]
    x = rng.uniform(size=len(owner)) * 2 * Lo
    start = np.maximum.reduce([np.zeros_like(x), (x - Lo) / v, (x - r) / (2 * v)])
    end = np.minimum.reduce([Lo / v, x / v, (x + r) / (2 * v)])
    ok = (end - start >= rho) & ("opposite" in directions)
    np.minimum.at(first, owner[ok], start[ok] + rho)
    return L, first


@dataclass(frozen=True)
class PEstimate:
    p_hat: float
    ci_lo: float
    ci_hi: float
    n: int
    successes: int


def wilson(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(successes), int(n)).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def estimate_p(params: MeanFieldParams, n: int, rng: np.random.Generator,
               confidence: float = 0.95) -> PEstimate:
    """Monte-Carlo probability of at least one infection on a single street, with a Wilson interval."""
    if n < 100:
        raise ValueError("estimate_p needs n >= 100")
    s = 0
    for chunk in _chunks(n):
        _, first = street_episodes(params, chunk, rng)
        s += int(np.isfinite(first).sum())
    lo, hi = wilson(s, n, confidence)
    return PEstimate(s / n, lo, hi, n, s)


def _chunks(n: int, size: int = 200_000):
    while n > 0:
        yield min(n, size)
        n -= size


# -- the walk --------------------------------------------------------------------


@dataclass(frozen=True)
class TauSamples:
    """First-infection times; censored entries hold the horizon (a lower bound on tau)."""

    tau: np.ndarray
    censored: np.ndarray
    streets_failed: np.ndarray  # streets crossed without infecting before the first success
    horizon: float

    @property
    def n(self) -> int:
        return len(self.tau)


def censor_horizon(params: MeanFieldParams, p_hat: float) -> float:
    return CENSOR_FACTOR * mean_street_time(params.lam, params.v) / max(p_hat, P_FLOOR)


def simulate_simplified(params: MeanFieldParams, rng: np.random.Generator, n: int = 1,
                        horizon: float | None = None, pilot: int = 20_000) -> TauSamples:
    """Draw ``n`` first-infection times of the street-succession walk.

    Streets are simulated as one i.i.d. stream and cut after every street with
    an infection; each piece is one sample. A sample whose failed streets
    already exceed ``horizon`` is censored at the horizon. The default horizon
    uses a pilot estimate of ``p``.
    """
    if horizon is None:
        horizon = censor_horizon(params, estimate_p(params, pilot, rng).p_hat)
    v = params.speed
    taus, cens, fails = [], [], []
    have = 0
    if params.theta == 0:
        return TauSamples(np.full(n, horizon), np.ones(n, bool), np.zeros(n, np.int64), horizon)
    carry_time, carry_streets = 0.0, 0
    guess = max(P_FLOOR, estimate_p(params, 1000, rng).p_hat) if n else 1.0
    while have < n:
        batch = int(min(2_000_000, max(10_000, 1.5 * (n - have) / guess)))
        L, first = street_episodes(params, batch, rng)
        dur = L / v
        hit = np.flatnonzero(np.isfinite(first))
        if len(hit):
            before = np.concatenate([[0.0], np.cumsum(dur)])
            prev = np.concatenate([[-1], hit[:-1]])
            t_fail = before[hit] - before[prev + 1]
            t_fail[0] += carry_time
            m = hit - prev - 1
            m[0] += carry_streets
            c = t_fail >= horizon
            taus.append(np.where(c, horizon, t_fail + first[hit]))
            cens.append(c)
            fails.append(m)
            have += len(hit)
            carry_time, carry_streets = 0.0, 0
        last = hit[-1] if len(hit) else -1
        carry_time += float(dur[last + 1:].sum())
        carry_streets += batch - last - 1
        if carry_time >= horizon:
            # the open sample is already beyond the horizon
            taus.append(np.array([horizon]))
            cens.append(np.array([True]))
            fails.append(np.array([carry_streets]))
            have += 1
            carry_time, carry_streets = 0.0, 0
    tau = np.concatenate(taus)[:n]
    return TauSamples(tau, np.concatenate(cens)[:n], np.concatenate(fails)[:n].astype(np.int64), horizon)


# -- analytic bounds -------------------------------------------------------------


def etau_bounds(p: float, lam: float, v: float) -> tuple[float, float]:
    """Lower and upper bounds (s) on the expected first-infection time given per-street probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if p == 0:
        return math.inf, math.inf
    unit = mean_street_time(lam, v)
    return unit * (1.0 / p - 1.0), unit / p


def tau_tail_point(p: float, lam: float, v: float) -> float:
    """Time ``t0 = 1/(3 sqrt(p lam) v)`` (s) beyond which tau lies with high probability for small ``p``."""
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    return 3600.0 / (3.0 * math.sqrt(p * lam) * v)


def tail_constant_fit(ps, tails) -> float:
    """Least-squares ``C`` in ``1 - Pr[tau >= t0] ~ C p^(1/4)``; a descriptive fit, not a proven constant."""
    x = np.asarray(ps, dtype=float) ** 0.25
    y = 1.0 - np.asarray(tails, dtype=float)
    return float(x @ y / (x @ x))


@dataclass(frozen=True)
class RegimeBounds:
    """Lower bounds (s) on E[tau] in three regimes, each with whether its condition holds."""

    long_streets_needed: float  # requires sqrt(lam) rho v >= l0
    few_in_range: float  # requires r < rho v
    sparse_streets: float  # unconditional
    long_streets_applies: bool
    few_in_range_applies: bool
    l0: float

    @property
    def guards(self) -> str:
        flag = {True: "on", False: "off"}
        vac = "vacuous" if self.few_in_range <= 0 else flag[self.few_in_range_applies]
        return f"c5={flag[self.long_streets_applies]};c6={vac};c7=on"

    def applicable(self) -> dict[str, float]:
        out = {"c7": self.sparse_streets}
        if self.long_streets_applies:
            out["c5"] = self.long_streets_needed
        if self.few_in_range_applies:
            out["c6"] = self.few_in_range
        return out


def corollary_lower_bounds(params: MeanFieldParams, l0: float | None = None) -> RegimeBounds:
    """Regime lower bounds on E[tau] derived from per-street upper bounds on ``p``."""
    lam, theta, v, r = params.lam, params.theta, params.v, params.r
    rho_h = params.rho / 3600.0
    if l0 is None:
        l0 = calibrate_l0(unit_length_pool())
    unit = mean_street_time(lam, v)
    with np.errstate(over="ignore"):
        c5 = unit * float(np.expm1(lam * rho_h**2 * v**2))
    c6 = unit * (1.0 / (theta * r) - 1.0) if theta > 0 else math.inf
    c7 = (math.sqrt(lam) / theta - 4.0 / 3.0) / (2.0 * math.sqrt(lam) * v) * 3600.0 if theta > 0 else math.inf
    return RegimeBounds(
        long_streets_needed=c5,
        few_in_range=c6,
        sparse_streets=c7,
        long_streets_applies=math.sqrt(lam) * rho_h * v >= l0,
        few_in_range_applies=r < rho_h * v,
        l0=l0,
    )


def p_upper_bounds(params: MeanFieldParams) -> dict[str, float]:
    """The per-street probability bounds behind the regime corollaries."""
    rho_h = params.rho / 3600.0
    return {
        "c5": math.exp(-params.lam * rho_h**2 * params.v**2),
        "c6": params.theta * params.r,
        "c7": 4.0 * params.theta / (3.0 * math.sqrt(params.lam)),
    }


@dataclass(frozen=True)
class BoundReport:
    p: PEstimate
    etau_mc: float
    etau_se: float
    censored: int
    etau_lb: float
    etau_ub: float
    t0: float
    emp_tail: float
    regimes: RegimeBounds

    def row(self) -> dict[str, object]:
        def opt(x, on):
            return x if on else None

        return {
            "p_hat": self.p.p_hat,
            "ci_lo": self.p.ci_lo,
            "ci_hi": self.p.ci_hi,
            "etau_mc": self.etau_mc,
            "etau_lb": self.etau_lb,
            "etau_ub": self.etau_ub,
            "t0": self.t0,
            "emp_tail": self.emp_tail,
            "c5": opt(self.regimes.long_streets_needed, self.regimes.long_streets_applies),
            "c6": opt(self.regimes.few_in_range, self.regimes.few_in_range_applies),
            "c7": self.regimes.sparse_streets,
            "guards": self.regimes.guards,
        }


REPORT_COLUMNS = ("p_hat", "ci_lo", "ci_hi", "etau_mc", "etau_lb", "etau_ub", "t0", "emp_tail",
                  "c5", "c6", "c7", "guards")


def bound_report(params: MeanFieldParams, rng: np.random.Generator, n_p: int = 100_000,
                 n_tau: int = 10_000) -> BoundReport:
    """Estimate ``p`` and the first-infection time law, and evaluate every bound."""
    pe = estimate_p(params, n_p, rng)
    samples = simulate_simplified(params, rng, n_tau, horizon=censor_horizon(params, pe.p_hat))
    mean = float(samples.tau.mean())
    se = float(samples.tau.std(ddof=1) / math.sqrt(samples.n)) if samples.n > 1 else math.nan
    lb, ub = etau_bounds(pe.p_hat, params.lam, params.v)
    t0 = tau_tail_point(pe.p_hat, params.lam, params.v) if pe.p_hat > 0 else math.inf
    tail = float(np.mean(samples.tau >= t0))
    return BoundReport(pe, mean, se, int(samples.censored.sum()), lb, ub, t0, tail,
                       corollary_lower_bounds(params))


def write_report_csv(reports, fh) -> None:
    fh.write(",".join(REPORT_COLUMNS) + "\n")
    for rep in reports:
        row = rep.row()
        fh.write(",".join(_fmt(row[c]) for c in REPORT_COLUMNS) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)
