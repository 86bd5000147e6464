"""Synthetic trial generator: staggered entry, two-window unblinding with
covariate-driven requests, crossover agreement, and piecewise-constant
potential infection hazards sampled by inverse transform.

Draw order per dataset (one Philox stream, fixed-length array draws, so a
given seed is reproducible regardless of how replications are scheduled):
arm, x1, x2, entry, request-gap exponential, visit time, agreement uniform,
frailty, placebo inverse-transform uniform, vaccine inverse-transform
uniform, declined-crossover exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TrialData
from .logistic import expit
from .model import PIECEWISE, ParticipantRecord, Theta, TrialTimeline, WaningModelSpec, g_value

CALENDAR = "calendar"
PATIENT_LITERAL = "patient-literal"


@dataclass(frozen=True)
class ScenarioConfig:
    """Generative model settings; defaults are the no-confounding scenario."""

    n: int = 30000
    timeline: TrialTimeline = field(default_factory=TrialTimeline)
    waning: WaningModelSpec = field(default_factory=lambda: WaningModelSpec(PIECEWISE, (20.0,)))
    theta_true: Theta = field(default_factory=lambda: Theta(math.log(0.05), np.array([math.log(7.0)])))
    beta_r1: tuple = (math.log(0.036), 0.0, 0.0, 0.0, 0.0)
    gamma_psi: tuple = (1.4, 0.0, 0.0, -0.1)
    delta: tuple = (math.log(0.0006), 0.4, 0.04)
    frailty_var: float = 0.04
    lambda_u_multiplier: float = 1.25
    lambda_u_lag_multiplier: float = 1.0
    p_x1: float = 0.5
    mu_x2: float = 45.0
    sd_x2: float = 10.0
    crossover_compare: str = CALENDAR
    seed: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if len(self.beta_r1) != 5:
            raise ValueError("beta_r1 needs 5 entries: intercept + 4 covariate effects")
        if len(self.gamma_psi) != 4:
            raise ValueError("gamma_psi needs 4 entries")
        if len(self.delta) != 3:
            raise ValueError("delta needs 3 entries")
        if self.frailty_var < 0:
            raise ValueError("frailty_var must be nonnegative")
        if self.lambda_u_multiplier <= 0 or self.lambda_u_lag_multiplier <= 0:
            raise ValueError("hazard multipliers must be positive")
        if self.crossover_compare not in (CALENDAR, PATIENT_LITERAL):
            raise ValueError(f"unknown crossover_compare {self.crossover_compare!r}")
        if self.theta_true.theta1.size != self.waning.dim_theta1:
            raise ValueError("theta_true dimension does not match the waning model")
        if self.waning.kind != PIECEWISE:
            raise ValueError(
                "inverse-transform sampling needs piecewise-constant hazards; "
                "use a piecewise waning model"
            )


def _scenario(confounded: bool, wanes: bool, strong: bool = False, **kw) -> ScenarioConfig:
    beta_conf = (-0.8, -0.08, 0.8, 0.08) if confounded else (0.0, 0.0, 0.0, 0.0)
    if strong:
        gamma = (1.4, -1.0, -0.1, -0.1)
        delta = (math.log(0.0006), 0.7, 0.07)
    elif confounded:
        gamma = (1.4, -0.8, -0.08, -0.1)
        delta = (math.log(0.0006), 0.4, 0.04)
    else:
        gamma = (1.4, 0.0, 0.0, -0.1)
        delta = (math.log(0.0006), 0.4, 0.04)
    theta1 = math.log(7.0) if wanes else 0.0
    return ScenarioConfig(
        theta_true=Theta(math.log(0.05), np.array([theta1])),
        beta_r1=(math.log(0.036),) + beta_conf,
        gamma_psi=gamma,
        delta=delta,
        **kw,
    )


PRESETS = {
    "i-a": dict(confounded=False, wanes=True),
    "i-b": dict(confounded=False, wanes=False),
    "ii-a": dict(confounded=True, wanes=True),
    "ii-b": dict(confounded=True, wanes=False),
    "ii-a-strong": dict(confounded=True, wanes=True, strong=True),
    "ii-b-strong": dict(confounded=True, wanes=False, strong=True),
}


def preset(name: str, **overrides) -> ScenarioConfig:
    """Scenario by name: i/ii = no confounding/confounding, a/b = waning/none,
    -strong = stronger covariate effects on infection and agreement."""
    try:
        args = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return _scenario(**args, **overrides)


@dataclass
class SimulationTruth:
    """Latent generative quantities kept alongside a simulated dataset."""

    t0_star: np.ndarray      # potential infection times, patient scale
    t1_star: np.ndarray
    r_tilde: np.ndarray      # unblinding time before infection masking
    gamma_tilde: np.ndarray
    psi_all: np.ndarray      # agreement draw for every subject
    t_declined: np.ndarray   # calendar infection time used for decliners (nan elsewhere)
    frailty: np.ndarray
    base_rate: np.ndarray    # per-subject blinded infection hazard


@dataclass
class SimulatedTrial:
    data: TrialData
    truth: SimulationTruth
    config: ScenarioConfig


def invert_piecewise_hazard(segments, u: float) -> float:
    """Smallest t with cumulative hazard >= -log(u), for contiguous
    piecewise-constant segments [(start, end, rate), ...] starting at 0.

    Returns +inf when the total bounded hazard is exhausted and no unbounded
    segment remains.
    """
    if not 0.0 < u <= 1.0:
        raise ValueError("u must be in (0, 1]")
    prev_end = 0.0
    for start, end, rate in segments:
        if start != prev_end:
            raise ValueError("segments must be contiguous and start at 0")
        if rate < 0:
            raise ValueError("rates must be nonnegative")
        if end < start:
            raise ValueError("segment end before start")
        prev_end = end
    target = -math.log(u)
    cum = 0.0
    for start, end, rate in segments:
        if rate > 0.0:
            seg = rate * (end - start)
            if cum + seg >= target:
                return start + (target - cum) / rate
            cum += seg
    return math.inf


def potential_hazard(cfg: ScenarioConfig, arm: int, e: float, r: float, t: float,
                     base_rate: float = 1.0) -> float:
    """Infection hazard at calendar time t for entry e and crossover/unblinding
    at r, scaled by the subject's blinded base rate."""
    if t <= e:
        raise ValueError(f"hazard defined for t > e only (t={t}, e={e})")
    out = _hazard_batch(
        cfg, np.asarray([arm]), np.asarray([float(e)]), np.asarray([float(r)]),
        np.asarray([float(t)]), np.asarray([float(base_rate)]),
    )
    return float(out[0])


def _hazard_batch(cfg: ScenarioConfig, arm, e, r, t, base) -> np.ndarray:
    """Vectorized potential-outcome hazard; pre-efficacy behavior offsets are
    identically zero in all scenarios.

    The unblinded full-efficacy rate is multiplier * exp(theta0) * base: the
    multiplier is a behavior factor relative to the blinded fully-vaccinated
    rate, so post-unblinding infections stay rare in proportion to efficacy.
    """
    lag = cfg.timeline.lag
    spec, th = cfg.waning, cfg.theta_true
    rate_lag = cfg.lambda_u_lag_multiplier * base
    rate_u = cfg.lambda_u_multiplier * np.exp(th.theta0) * base

    blinded = t < r

    # placebo: base while blinded, lag rate then waning-adjusted after crossover
    # (t - r is nan when both are inf; that branch is masked out by `blinded`)
    with np.errstate(invalid="ignore"):
        since_r = np.asarray(t, dtype=float) - np.asarray(r, dtype=float)
    since_r = np.where(np.isnan(since_r), -np.inf, since_r)
    out_pl = np.where(
        blinded, base,
        np.where(since_r < lag, rate_lag,
                 rate_u * np.exp(g_value(spec, th.theta1, np.maximum(since_r - lag, 0.0)))),
    )

    # vaccine: lagged then waning-adjusted while blinded, boosted base after unblinding
    since_e = t - e
    g_e = g_value(spec, th.theta1, np.maximum(since_e - lag, 0.0))
    out_vx = np.where(
        blinded,
        np.where(since_e >= lag, base * np.exp(th.theta0 + g_e), base),
        rate_u * np.exp(g_e),
    )
    return np.where(np.asarray(arm) == 1, out_vx, out_pl)


def _invert_batch(breakpoints: np.ndarray, rates: np.ndarray, unif: np.ndarray) -> np.ndarray:
    """Vectorized inverse-transform sampling on per-row piecewise-constant
    hazards; segment j spans [bp[j-1], bp[j]) with bp[-1]=0, last unbounded."""
    n, nb = breakpoints.shape
    # -log(1-u): finite for u in [0,1); floor keeps event times strictly positive
    target = np.maximum(-np.log1p(-unif), 1e-300)
    seg_len = np.diff(breakpoints, axis=1, prepend=0.0)
    cums = np.cumsum(rates[:, :nb] * seg_len, axis=1)
    seg_idx = (cums < target[:, None]).sum(axis=1)
    rows = np.arange(n)
    start = np.where(seg_idx == 0, 0.0, breakpoints[rows, np.maximum(seg_idx - 1, 0)])
    cum_before = np.where(seg_idx == 0, 0.0, cums[rows, np.maximum(seg_idx - 1, 0)])
    rate = rates[rows, seg_idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = start + (target - cum_before) / rate
    return np.where(rate > 0.0, t, np.inf)


def _potential_time_batch(cfg: ScenarioConfig, arm_value: int, e, r_cal, base, unif):
    """Patient-scale potential infection times for one arm's hazard shape,
    with crossover/unblinding at calendar r_cal."""
    tl = cfg.timeline
    lag = tl.lag
    knots = np.asarray(cfg.waning.knots)
    n = e.shape[0]
    s_r = r_cal - e
    if arm_value == 0:
        cols = [s_r, s_r + lag] + [s_r + lag + v for v in knots]
        bp = np.column_stack(cols)
    else:
        cols = [np.full(n, lag)] + [np.full(n, lag + v) for v in knots] + [s_r]
        bp = np.sort(np.column_stack(cols), axis=1)
    reps = np.empty((n, bp.shape[1] + 1))
    reps[:, 0] = bp[:, 0] / 2.0
    reps[:, 1:-1] = (bp[:, :-1] + bp[:, 1:]) / 2.0
    reps[:, -1] = bp[:, -1] + 1.0
    arm_col = np.full(n, arm_value)
    rates = np.empty_like(reps)
    for j in range(reps.shape[1]):
        rates[:, j] = _hazard_batch(cfg, arm_col, e, r_cal, e + reps[:, j], base)
    return _invert_batch(bp, rates, unif)


def _draw_fields(cfg: ScenarioConfig, rng: np.random.Generator, n: int) -> dict:
    tl = cfg.timeline
    raw = {}
    raw["arm"] = (rng.random(n) < tl.p_assign).astype(np.int64)
    raw["x1"] = (rng.random(n) < cfg.p_x1).astype(float)
    raw["x2"] = cfg.mu_x2 + cfg.sd_x2 * rng.standard_normal(n)
    raw["entry"] = tl.t_accrual * rng.random(n)
    raw["g1_exp"] = rng.standard_exponential(n)
    raw["r2"] = tl.t_pdcv_start + (tl.t_pdcv_end - tl.t_pdcv_start) * rng.random(n)
    raw["psi_u"] = rng.random(n)
    raw["frailty"] = math.sqrt(cfg.frailty_var) * rng.standard_normal(n)
    raw["u0"] = rng.random(n)
    raw["u1"] = rng.random(n)
    raw["g2_exp"] = rng.standard_exponential(n)
    return raw


def _assemble(cfg: ScenarioConfig, raw: dict) -> SimulatedTrial:
    tl = cfg.timeline
    n = raw["arm"].shape[0]
    arm, x1, x2, entry = raw["arm"], raw["x1"], raw["x2"], raw["entry"]
    x1c = x1 - cfg.p_x1
    x2c = x2 - cfg.mu_x2

    b10, b11, b12, b13, b14 = cfg.beta_r1
    rate_r1 = np.exp(b10 + (b11 * x1c + b12 * x2c) * (1 - arm) + (b13 * x1c + b14 * x2c) * arm)
    r1 = tl.t_pfizer + raw["g1_exp"] / rate_r1
    gamma_tilde = 1 + (r1 >= tl.t_pdcv_start).astype(np.int64)
    r_tilde = np.where(gamma_tilde == 1, r1, raw["r2"])

    g0, g1, g2, g3 = cfg.gamma_psi
    p_psi = expit(g0 + g1 * x1c + g2 * x2c + g3 * gamma_tilde)
    psi_all = (raw["psi_u"] < p_psi).astype(np.int64)

    d0, d1, d2 = cfg.delta
    base = np.exp(d0 + d1 * x1c + d2 * x2c + raw["frailty"])

    t0 = _potential_time_batch(cfg, 0, entry, r_tilde, base, raw["u0"])
    t1 = _potential_time_batch(cfg, 1, entry, r_tilde, base, raw["u1"])
    t_declined = r_tilde + raw["g2_exp"] / base

    if cfg.crossover_compare == CALENDAR:
        before_crossover = entry + t0 < r_tilde
    else:
        before_crossover = t0 < r_tilde
    placebo_u = np.where(
        before_crossover | (psi_all == 1), entry + t0, t_declined
    )
    u = np.where(arm == 1, entry + t1, placebo_u)

    delta = (u <= tl.t_analysis).astype(np.int64)
    r_obs = np.where(u <= r_tilde, u, r_tilde)
    gamma_obs = np.where(u > r_obs, gamma_tilde, 0).astype(np.int64)

    data = TrialData(
        entry=entry,
        x=np.column_stack([x1, x2]),
        arm=arm,
        u=u,
        infected=delta,
        r_time=r_obs,
        gamma=gamma_obs,
        psi=psi_all,
        psi_valid=np.ones(n, dtype=bool),
    )
    truth = SimulationTruth(
        t0_star=t0, t1_star=t1, r_tilde=r_tilde, gamma_tilde=gamma_tilde,
        psi_all=psi_all,
        t_declined=np.where((arm == 0) & ~before_crossover & (psi_all == 0),
                            t_declined, np.nan),
        frailty=raw["frailty"], base_rate=base,
    )
    return SimulatedTrial(data=data, truth=truth, config=cfg)


def generate_dataset(cfg: ScenarioConfig, n: int | None = None,
                     seed=None) -> SimulatedTrial:
    """n iid participants; deterministic for a given seed (int or SeedSequence)."""
    if n is None:
        n = cfg.n
    if seed is None:
        seed = cfg.seed
    if seed is None:
        raise ValueError("a seed is required for reproducible generation")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(ss))
    return _assemble(cfg, _draw_fields(cfg, rng, n))


def generate_participant(cfg: ScenarioConfig, rng: np.random.Generator) -> ParticipantRecord:
    """One participant drawn from the supplied stream (same field order as
    generate_dataset)."""
    sim = _assemble(cfg, _draw_fields(cfg, rng, 1))
    return sim.data.record(0)
