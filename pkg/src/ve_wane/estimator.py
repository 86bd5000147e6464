"""Weighted counting-process estimating equations for the waning parameters.

Every time integral reduces to a finite sum over observed infection times
because the counting processes are pure jump; at-risk sums are evaluated
lazily at those jump times only. For piecewise-constant waning models the
at-risk aggregates are precomputed per jump time by waning window, so Newton
iterations cost almost nothing on top of one sweep over the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .cox import StepFunction
from .data import TrialData
from .errors import ConvergenceError, DegenerateRiskSetError, IdentifiabilityError
from .model import (
    PIECEWISE,
    Theta,
    TrialTimeline,
    WaningModelSpec,
    g_grad,
    g_value,
    waning_bucket,
)
from .weights import NuisanceFit, StabilizedWeightCalculator


@dataclass
class WeightedProcesses:
    """Per-participant jump activity, weights, and at-risk descriptors."""

    data: TrialData
    timeline: TrialTimeline
    spec: WaningModelSpec
    blinded_active: np.ndarray
    unblinded_active: np.ndarray
    unblinded_eligible: np.ndarray
    w_blinded_jump: np.ndarray
    w_unblinded: np.ndarray
    sw: StabilizedWeightCalculator | None
    weight_mode: str
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def dim(self) -> int:
        return 1 + self.spec.dim_theta1

    def blinded_jump_times(self):
        return np.sort(self.data.u[self.blinded_active])

    def unblinded_jump_times(self):
        return np.sort(self.data.u[self.unblinded_active])


def build_processes(data: TrialData, tl: TrialTimeline, spec: WaningModelSpec,
                    weights="unit") -> WeightedProcesses:
    """Assemble jump activity and weights for both phases.

    ``weights`` is "unit" or a NuisanceFit; with a fit, blinded-phase jump
    weights are the time-varying stabilized weights evaluated at the jump and
    unblinded weights are the constant per-participant ratios.
    """
    ent, u, r = data.entry, data.u, data.r_time
    arm, gam, psi, delta = data.arm, data.gamma, data.psi, data.infected
    lag = tl.lag

    blinded_active = (delta == 1) & (u < tl.t_pdcv_end) & (
        ((arm == 0) & (r >= u)) | ((arm == 1) & (ent + lag <= u) & (u <= r))
    )
    unblinded_eligible = (gam >= 1) & (((arm == 0) & (psi == 1)) | (arm == 1))
    unblinded_active = (delta == 1) & unblinded_eligible & (
        ((arm == 0) & (u - r >= lag)) | ((arm == 1) & (u > r))
    )

    if weights == "unit":
        sw = None
        mode = "unit"
        w_b = np.ones(data.n)
        w_u = np.ones(data.n)
    else:
        fit = weights
        if isinstance(fit, NuisanceFit):
            sw = StabilizedWeightCalculator(fit, data)
        else:
            sw = fit
        mode = "estimated"
        w_b = np.ones(data.n)
        for i in np.nonzero(blinded_active)[0]:
            w_b[i] = sw.blinded_at(float(u[i]))[i]
        w_u = sw.unblinded()
        w_u = np.where(unblinded_eligible, w_u, 1.0)

    return WeightedProcesses(
        data=data, timeline=tl, spec=spec,
        blinded_active=blinded_active, unblinded_active=unblinded_active,
        unblinded_eligible=unblinded_eligible,
        w_blinded_jump=w_b, w_unblinded=w_u, sw=sw, weight_mode=mode,
    )


# ---------------------------------------------------------------------------
# reference (per-time) at-risk evaluation


def _blinded_masks(proc: WeightedProcesses, t: float):
    d = proc.data
    lag = proc.timeline.lag
    y = (d.entry < t) & (t <= d.u)
    pl = y & (d.arm == 0) & (d.r_time >= t)
    vx = y & (d.arm == 1) & (d.entry + lag <= t) & (t <= d.r_time)
    return pl, vx


def _unblinded_masks(proc: WeightedProcesses, t: float):
    d = proc.data
    lag = proc.timeline.lag
    y = (d.entry < t) & (t <= d.u)
    pl = y & (d.arm == 0) & proc.unblinded_eligible & (t - d.r_time >= lag)
    vx = y & (d.arm == 1) & proc.unblinded_eligible & (t > d.r_time)
    return pl, vx


def at_risk_b(proc: WeightedProcesses, t: float, theta: Theta):
    """Weighted blinded-phase at-risk sums at time t: (S0, sum Z*Y, sum Z Z' Y)."""
    tl = proc.timeline
    if not 0.0 <= t < tl.t_pdcv_end:
        raise ValueError(f"blinded at-risk requires 0 <= t < {tl.t_pdcv_end}, got {t}")
    pl, vx = _blinded_masks(proc, t)
    sw_t = proc.sw.blinded_at(t) if proc.sw is not None else None
    dim = proc.dim
    s0 = 0.0
    s1 = np.zeros(dim)
    s2 = np.zeros((dim, dim))
    s0 += float(np.sum(sw_t[pl])) if sw_t is not None else float(np.count_nonzero(pl))
    if np.any(vx):
        uv = t - proc.data.entry[vx] - tl.lag
        wv = np.exp(theta.theta0 + g_value(proc.spec, theta.theta1, uv))
        if sw_t is not None:
            wv = wv * sw_t[vx]
        gg = g_grad(proc.spec, theta.theta1, uv)
        z = np.hstack([np.ones((wv.size, 1)), gg])
        s0 += float(wv.sum())
        s1 += wv @ z
        s2 += np.einsum("i,ij,ik->jk", wv, z, z)
    return s0, s1, s2


def at_risk_u(proc: WeightedProcesses, t: float, theta: Theta):
    """Weighted post-unblinding at-risk sums at time t: (S0, sum Z*Y, sum Z Z' Y)."""
    tl = proc.timeline
    if t < tl.t_pfizer:
        raise ValueError(f"unblinded at-risk requires t >= {tl.t_pfizer}, got {t}")
    pl, vx = _unblinded_masks(proc, t)
    dim = proc.dim
    s0 = 0.0
    s1 = np.zeros(dim)
    s2 = np.zeros((dim, dim))
    for mask, origin in ((pl, proc.data.r_time), (vx, proc.data.entry)):
        if not np.any(mask):
            continue
        uv = t - origin[mask] - tl.lag
        w = proc.w_unblinded[mask] * np.exp(g_value(proc.spec, theta.theta1, uv))
        gg = g_grad(proc.spec, theta.theta1, uv)
        z = np.hstack([np.zeros((w.size, 1)), gg])
        s0 += float(w.sum())
        s1 += w @ z
        s2 += np.einsum("i,ij,ik->jk", w, z, z)
    return s0, s1, s2


def _jump_groups(times: np.ndarray, idx: np.ndarray):
    """Unique jump times with the participant indices jumping at each."""
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    idx_sorted = idx[order]
    uniq, starts = np.unique(t_sorted, return_index=True)
    groups = np.split(idx_sorted, starts[1:])
    return uniq, groups


def _jumper_z(proc: WeightedProcesses, i: int, t: float, theta: Theta, phase: str):
    lag = proc.timeline.lag
    d = proc.data
    if phase == "b":
        if d.arm[i] == 0:
            return np.zeros(proc.dim)
        gg = g_grad(proc.spec, theta.theta1, t - d.entry[i] - lag)
        return np.concatenate(([1.0], np.atleast_1d(gg)))
    origin = d.entry[i] if d.arm[i] == 1 else d.r_time[i]
    gg = g_grad(proc.spec, theta.theta1, t - origin - lag)
    return np.concatenate(([0.0], np.atleast_1d(gg)))


def estimating_function(proc: WeightedProcesses, theta: Theta) -> np.ndarray:
    """Sum over participants of the centered jump contributions (both phases)."""
    ef = np.zeros(proc.dim)
    for phase, active, at_risk in (
        ("b", proc.blinded_active, at_risk_b),
        ("u", proc.unblinded_active, at_risk_u),
    ):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        times, groups = _jump_groups(proc.data.u[idx], idx)
        for t, grp in zip(times, groups):
            s0, s1, _ = at_risk(proc, float(t), theta)
            if s0 <= 0.0:
                raise DegenerateRiskSetError(
                    f"zero weighted at-risk mass at {phase}-phase jump time {t}"
                )
            zbar = s1 / s0
            for i in grp:
                w = proc.w_blinded_jump[i] if phase == "b" else proc.w_unblinded[i]
                ef += w * (_jumper_z(proc, i, float(t), theta, phase) - zbar)
    return ef


def estimating_jacobian(proc: WeightedProcesses, theta: Theta) -> np.ndarray:
    """Exact derivative of the estimating function with respect to theta."""
    dim = proc.dim
    jac = np.zeros((dim, dim))
    for phase, active, at_risk in (
        ("b", proc.blinded_active, at_risk_b),
        ("u", proc.unblinded_active, at_risk_u),
    ):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        times, groups = _jump_groups(proc.data.u[idx], idx)
        for t, grp in zip(times, groups):
            s0, s1, s2 = at_risk(proc, float(t), theta)
            if s0 <= 0.0:
                raise DegenerateRiskSetError(
                    f"zero weighted at-risk mass at {phase}-phase jump time {t}"
                )
            zbar = s1 / s0
            v = s2 / s0 - np.outer(zbar, zbar)
            wsum = sum(
                proc.w_blinded_jump[i] if phase == "b" else proc.w_unblinded[i]
                for i in grp
            )
            jac -= wsum * v
    return jac


# ---------------------------------------------------------------------------
# fast path: per-jump-time aggregates bucketed by waning window


@dataclass
class _PhaseCache:
    times: np.ndarray          # unique jump times
    wsum: np.ndarray           # total jump weight per time
    jz: np.ndarray             # (m, dim) sum of w * Z over jumpers, waning part split by window
    p0: np.ndarray             # (m,) placebo at-risk weight (blinded) -- zeros for unblinded phase
    bucket_sums: np.ndarray    # (m, K+1) at-risk weight by waning window (vaccinees for blinded)
    bucket_sums_pl: np.ndarray # (m, K+1) placebo crossover at-risk by window (unblinded phase only)


def _build_phase_cache(proc: WeightedProcesses, phase: str) -> _PhaseCache:
    spec = proc.spec
    knots = np.asarray(spec.knots)
    nk = spec.dim_theta1
    lag = proc.timeline.lag
    d = proc.data
    active = proc.blinded_active if phase == "b" else proc.unblinded_active
    idx = np.nonzero(active)[0]
    times, groups = _jump_groups(d.u[idx], idx)
    m = times.size
    wsum = np.zeros(m)
    jz = np.zeros((m, 1 + nk))
    p0 = np.zeros(m)
    bsum = np.zeros((m, nk + 1))
    bsum_pl = np.zeros((m, nk + 1))
    for j, (t, grp) in enumerate(zip(times, groups)):
        t = float(t)
        if phase == "b":
            pl, vx = _blinded_masks(proc, t)
            sw_t = proc.sw.blinded_at(t) if proc.sw is not None else None
            p0[j] = float(np.sum(sw_t[pl])) if sw_t is not None else float(np.count_nonzero(pl))
            if np.any(vx):
                bk = waning_bucket(spec, t - d.entry[vx] - lag)
                w = sw_t[vx] if sw_t is not None else np.ones(int(np.count_nonzero(vx)))
                bsum[j] = np.bincount(bk, weights=w, minlength=nk + 1)
            for i in grp:
                w = proc.w_blinded_jump[i]
                wsum[j] += w
                if d.arm[i] == 1:
                    jz[j, 0] += w
                    b = int(waning_bucket(spec, d.u[i] - d.entry[i] - lag))
                    if b > 0:
                        jz[j, b] += w
        else:
            pl, vx = _unblinded_masks(proc, t)
            if np.any(pl):
                bk = waning_bucket(spec, t - d.r_time[pl] - lag)
                bsum_pl[j] = np.bincount(bk, weights=proc.w_unblinded[pl], minlength=nk + 1)
            if np.any(vx):
                bk = waning_bucket(spec, t - d.entry[vx] - lag)
                bsum[j] = np.bincount(bk, weights=proc.w_unblinded[vx], minlength=nk + 1)
            for i in grp:
                w = proc.w_unblinded[i]
                wsum[j] += w
                origin = d.entry[i] if d.arm[i] == 1 else d.r_time[i]
                b = int(waning_bucket(spec, d.u[i] - origin - lag))
                if b > 0:
                    jz[j, b] += w
    return _PhaseCache(times=times, wsum=wsum, jz=jz, p0=p0,
                       bucket_sums=bsum, bucket_sums_pl=bsum_pl)


def _get_caches(proc: WeightedProcesses):
    if "b" not in proc._cache:
        proc._cache["b"] = _build_phase_cache(proc, "b")
        proc._cache["u"] = _build_phase_cache(proc, "u")
    return proc._cache["b"], proc._cache["u"]


def _phase_sums(cache: _PhaseCache, theta: Theta, phase: str):
    """S0 (m,), Zbar (m,dim), V (m,dim,dim) for all cached jump times."""
    nk = theta.theta1.size
    dim = 1 + nk
    cb = np.concatenate(([1.0], np.exp(theta.theta1)))  # per-window multiplier
    if phase == "b":
        scaled = np.exp(theta.theta0) * cache.bucket_sums * cb
        s0 = cache.p0 + scaled.sum(axis=1)
        s1 = np.zeros((cache.times.size, dim))
        s1[:, 0] = scaled.sum(axis=1)
        if nk:
            s1[:, 1:] = scaled[:, 1:]
        s2 = np.zeros((cache.times.size, dim, dim))
        s2[:, 0, 0] = s1[:, 0]
        if nk:
            s2[:, 0, 1:] = scaled[:, 1:]
            s2[:, 1:, 0] = scaled[:, 1:]
            rows = np.arange(1, dim)
            s2[:, rows, rows] = scaled[:, 1:]
    else:
        scaled = (cache.bucket_sums + cache.bucket_sums_pl) * cb
        s0 = scaled.sum(axis=1)
        s1 = np.zeros((cache.times.size, dim))
        s2 = np.zeros((cache.times.size, dim, dim))
        if nk:
            s1[:, 1:] = scaled[:, 1:]
            rows = np.arange(1, dim)
            s2[:, rows, rows] = scaled[:, 1:]
    if np.any(s0 <= 0.0):
        t_bad = cache.times[np.argmax(s0 <= 0.0)]
        raise DegenerateRiskSetError(
            f"zero weighted at-risk mass at {phase}-phase jump time {t_bad}"
        )
    zbar = s1 / s0[:, None]
    v = s2 / s0[:, None, None] - np.einsum("mj,mk->mjk", zbar, zbar)
    return s0, zbar, v


def _ef_fast(proc: WeightedProcesses, theta: Theta) -> np.ndarray:
    cb_cache, cu_cache = _get_caches(proc)
    ef = np.zeros(proc.dim)
    for cache, phase in ((cb_cache, "b"), (cu_cache, "u")):
        if cache.times.size == 0:
            continue
        _, zbar, _ = _phase_sums(cache, theta, phase)
        ef += cache.jz.sum(axis=0) - (cache.wsum[:, None] * zbar).sum(axis=0)
    return ef


def _jac_fast(proc: WeightedProcesses, theta: Theta) -> np.ndarray:
    cb_cache, cu_cache = _get_caches(proc)
    jac = np.zeros((proc.dim, proc.dim))
    for cache, phase in ((cb_cache, "b"), (cu_cache, "u")):
        if cache.times.size == 0:
            continue
        _, _, v = _phase_sums(cache, theta, phase)
        jac -= np.einsum("m,mjk->jk", cache.wsum, v)
    return jac


# ---------------------------------------------------------------------------
# sandwich covariance


def _psi_matrix(proc: WeightedProcesses, theta: Theta) -> np.ndarray:
    """Per-participant estimating-function contributions at theta, (n, dim).

    Compensator integrals run over the pooled jump-time grid with the
    profiled hazard increments plugged in.
    """
    d = proc.data
    lag = proc.timeline.lag
    dim = proc.dim
    psi = np.zeros((proc.n, dim))
    for phase, active in (("b", proc.blinded_active), ("u", proc.unblinded_active)):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        times, groups = _jump_groups(d.u[idx], idx)
        for t, grp in zip(times, groups):
            t = float(t)
            if phase == "b":
                wj = proc.w_blinded_jump
                pl, vx = _blinded_masks(proc, t)
                sw_t = proc.sw.blinded_at(t) if proc.sw is not None else None
                w_pl = (sw_t[pl] if sw_t is not None
                        else np.ones(int(np.count_nonzero(pl))))
                s0 = float(w_pl.sum())
                s1 = np.zeros(dim)
                wv = z = None
                if np.any(vx):
                    uv = t - d.entry[vx] - lag
                    wv = np.exp(theta.theta0 + g_value(proc.spec, theta.theta1, uv))
                    if sw_t is not None:
                        wv = wv * sw_t[vx]
                    gg = g_grad(proc.spec, theta.theta1, uv)
                    z = np.hstack([np.ones((wv.size, 1)), gg])
                    s0 += float(wv.sum())
                    s1 += wv @ z
                if s0 <= 0.0:
                    raise DegenerateRiskSetError(
                        f"zero weighted at-risk mass at blinded jump time {t}"
                    )
                zbar = s1 / s0
                dlam = sum(wj[i] for i in grp) / s0
                if w_pl.size:
                    psi[pl] += dlam * w_pl[:, None] * zbar[None, :]
                if wv is not None:
                    psi[vx] -= dlam * wv[:, None] * (z - zbar)
            else:
                wj = proc.w_unblinded
                pl, vx = _unblinded_masks(proc, t)
                parts = []
                s0 = 0.0
                s1 = np.zeros(dim)
                for mask, origin in ((pl, d.r_time), (vx, d.entry)):
                    if not np.any(mask):
                        continue
                    uv = t - origin[mask] - lag
                    w = proc.w_unblinded[mask] * np.exp(
                        g_value(proc.spec, theta.theta1, uv)
                    )
                    gg = g_grad(proc.spec, theta.theta1, uv)
                    z = np.hstack([np.zeros((w.size, 1)), gg])
                    s0 += float(w.sum())
                    s1 += w @ z
                    parts.append((mask, w, z))
                if s0 <= 0.0:
                    raise DegenerateRiskSetError(
                        f"zero weighted at-risk mass at unblinded jump time {t}"
                    )
                zbar = s1 / s0
                dlam = sum(wj[i] for i in grp) / s0
                for mask, w, z in parts:
                    psi[mask] -= dlam * w[:, None] * (z - zbar)
            for i in grp:
                psi[i] += wj[i] * (_jumper_z(proc, i, t, theta, phase) - zbar)
    return psi


def sandwich_cov(proc: WeightedProcesses, theta_hat: Theta) -> np.ndarray:
    """A^-1 B A^-T covariance of theta_hat, weights treated as known."""
    jac = _jac_fast(proc, theta_hat) if proc.spec.kind == PIECEWISE \
        else estimating_jacobian(proc, theta_hat)
    psi = _psi_matrix(proc, theta_hat)
    meat = psi.T @ psi
    try:
        jinv = np.linalg.inv(jac)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError("singular Jacobian in sandwich covariance") from None
    cov = jinv @ meat @ jinv.T
    return (cov + cov.T) / 2.0


# ---------------------------------------------------------------------------
# solving and reporting


@dataclass
class EstimationResult:
    theta_hat: Theta
    cov: np.ndarray
    ve_estimates: list
    wald_waning: dict
    iterations: int
    converged: bool
    cumhaz_b: StepFunction
    cumhaz_u: StepFunction | None
    spec: WaningModelSpec
    lag: float
    n: int
    weight_mode: str
    trace: list

    def theta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def to_dict(self) -> dict:
        return {
            "theta0": self.theta_hat.theta0,
            "theta1": self.theta_hat.theta1.tolist(),
            "cov": self.cov.tolist(),
            "se": self.theta_se().tolist(),
            "ve": self.ve_estimates,
            "wald_waning": self.wald_waning,
            "iterations": self.iterations,
            "converged": self.converged,
            "n": self.n,
            "weight_mode": self.weight_mode,
            "waning_model": {"kind": self.spec.kind, "knots": list(self.spec.knots)},
            "lag": self.lag,
            "cumhaz_blinded": {
                "times": self.cumhaz_b.times.tolist(),
                "values": self.cumhaz_b.values.tolist(),
            },
            "cumhaz_unblinded": None if self.cumhaz_u is None else {
                "times": self.cumhaz_u.times.tolist(),
                "values": self.cumhaz_u.values.tolist(),
            },
            "trace": [
                {"theta": list(th), "ef_norm": en} for th, en in self.trace
            ],
        }


def _check_identifiable(proc: WeightedProcesses):
    d = proc.data
    lag = proc.timeline.lag
    b_idx = np.nonzero(proc.blinded_active)[0]
    if not np.any(d.arm[b_idx] == 1) or not np.any(d.arm[b_idx] == 0):
        raise IdentifiabilityError(
            "theta0 unidentified: need at least one blinded-phase infection in "
            "each arm", coordinate="theta0",
        )
    nk = proc.spec.dim_theta1
    if nk == 0:
        return
    hits = np.zeros(max(nk, 1), dtype=bool)
    vx_j = b_idx[d.arm[b_idx] == 1]
    u_idx = np.nonzero(proc.unblinded_active)[0]
    if proc.spec.kind == PIECEWISE:
        for i in vx_j:
            b = int(waning_bucket(proc.spec, d.u[i] - d.entry[i] - lag))
            if b > 0:
                hits[b - 1] = True
        for i in u_idx:
            origin = d.entry[i] if d.arm[i] == 1 else d.r_time[i]
            b = int(waning_bucket(proc.spec, d.u[i] - origin - lag))
            if b > 0:
                hits[b - 1] = True
        for j in np.nonzero(~hits)[0]:
            raise IdentifiabilityError(
                f"theta1[{j}] unidentified: no infection falls in waning window "
                f"{j + 1}", coordinate=f"theta1[{j}]",
            )
    else:
        any_pos = any(d.u[i] - d.entry[i] - lag > 0 for i in vx_j)
        any_pos = any_pos or any(
            d.u[i] - (d.entry[i] if d.arm[i] == 1 else d.r_time[i]) - lag > 0
            for i in u_idx
        )
        if not any_pos:
            raise IdentifiabilityError(
                "theta1[0] unidentified: no infection at positive time since "
                "full efficacy", coordinate="theta1[0]",
            )


def _cumhaz(proc: WeightedProcesses, theta: Theta, phase: str) -> StepFunction | None:
    active = proc.blinded_active if phase == "b" else proc.unblinded_active
    idx = np.nonzero(active)[0]
    if idx.size == 0:
        return None
    if proc.spec.kind == PIECEWISE:
        cb_cache, cu_cache = _get_caches(proc)
        cache = cb_cache if phase == "b" else cu_cache
        s0, _, _ = _phase_sums(cache, theta, phase)
        return StepFunction(cache.times, np.cumsum(cache.wsum / s0))
    at_risk = at_risk_b if phase == "b" else at_risk_u
    wj = proc.w_blinded_jump if phase == "b" else proc.w_unblinded
    times, groups = _jump_groups(proc.data.u[idx], idx)
    incr = np.empty(times.size)
    for j, (t, grp) in enumerate(zip(times, groups)):
        s0, _, _ = at_risk(proc, float(t), theta)
        incr[j] = sum(wj[i] for i in grp) / s0
    return StepFunction(times, np.cumsum(incr))


def wald_waning_test(theta1: np.ndarray, cov1: np.ndarray, alpha: float = 0.05) -> dict:
    """One-sided Wald test of no waning (theta1 <= 0) against waning.

    Scalar theta1 is the standard z test; for vectors the maximum
    standardized coordinate is used with a Bonferroni-adjusted p-value.
    """
    theta1 = np.atleast_1d(theta1)
    if theta1.size == 0:
        return {"statistic": np.nan, "p_value": np.nan, "alpha": alpha, "reject": False}
    # tiny negative diagonals can appear numerically on near-singular toys
    se = np.sqrt(np.maximum(np.diag(np.atleast_2d(cov1)), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, theta1 / np.where(se > 0, se, 1.0),
                     np.where(theta1 > 0, np.inf, -np.inf))
    stat = float(np.max(z))
    p = float(min(1.0, theta1.size * (1.0 - norm.cdf(stat))))
    return {"statistic": stat, "p_value": p, "alpha": alpha, "reject": bool(p < alpha)}


def report_ve(result: EstimationResult, spec: WaningModelSpec, taus,
              alpha: float = 0.05) -> list:
    """Efficacy table at each requested time since vaccination.

    Confidence limits are Wald intervals on the log rate-ratio scale,
    transformed; the standard error is by the delta method.
    """
    if not result.converged:
        raise ValueError("cannot report efficacy from an unconverged fit")
    theta = result.theta_hat
    zq = float(norm.ppf(0.975))
    out = []
    for tau in taus:
        u = float(tau) - result.lag
        if u < 0:
            raise ValueError(f"tau={tau} is before full efficacy (lag {result.lag})")
        eta = theta.theta0 + float(g_value(spec, theta.theta1, u))
        grad = np.concatenate(([1.0], np.atleast_1d(g_grad(spec, theta.theta1, u))))
        var_eta = float(grad @ result.cov @ grad)
        se_eta = np.sqrt(max(var_eta, 0.0))
        ve = 1.0 - np.exp(eta)
        out.append({
            "tau": float(tau),
            "ve": float(ve),
            "se": float(np.exp(eta) * se_eta),
            "ci_low": float(1.0 - np.exp(eta + zq * se_eta)),
            "ci_high": float(1.0 - np.exp(eta - zq * se_eta)),
        })
    return out


def default_taus(spec: WaningModelSpec, lag: float) -> list:
    """One tau per waning window: the window's start (left ends at each knot)."""
    if spec.kind == PIECEWISE and spec.knots:
        taus = [lag + spec.knots[0]]
        taus += [lag + v + 1.0 for v in spec.knots]
        return taus
    return [lag]


def solve_theta(proc: WeightedProcesses, spec: WaningModelSpec | None = None,
                init: Theta | None = None, alpha: float = 0.05,
                taus=None, tol: float = 1e-8, max_iter: int = 100) -> EstimationResult:
    """Newton-Raphson solution of the estimating equation with step-halving."""
    if spec is not None and spec != proc.spec:
        raise ValueError("waning model differs from the one the processes were built with")
    spec = proc.spec
    _check_identifiable(proc)
    fast = spec.kind == PIECEWISE
    ef_fn = _ef_fast if fast else estimating_function
    jac_fn = _jac_fast if fast else estimating_jacobian

    theta = init if init is not None else Theta(0.0, np.zeros(spec.dim_theta1))
    if theta.theta1.size != spec.dim_theta1:
        raise ValueError("init theta1 dimension does not match the waning model")
    ef = ef_fn(proc, theta)
    norm_ef = float(np.max(np.abs(ef)))
    trace = [(theta.as_array().tolist(), norm_ef)]
    converged = norm_ef < tol
    iterations = 0
    while not converged and iterations < max_iter:
        iterations += 1
        jac = jac_fn(proc, theta)
        try:
            step = np.linalg.solve(jac, ef)
        except np.linalg.LinAlgError:
            bad = int(np.argmin(np.abs(np.diag(jac))))
            name = "theta0" if bad == 0 else f"theta1[{bad - 1}]"
            raise IdentifiabilityError(
                f"singular Jacobian: no curvature for {name}", coordinate=name
            ) from None
        factor = 1.0
        for _ in range(40):
            cand = Theta.from_array(theta.as_array() - factor * step)
            ef_new = ef_fn(proc, cand)
            norm_new = float(np.max(np.abs(ef_new)))
            if norm_new < norm_ef or norm_new < tol:
                theta, ef, norm_ef = cand, ef_new, norm_new
                break
            factor /= 2.0
        else:
            raise ConvergenceError(
                "Newton step-halving failed to reduce the estimating function",
                gradient_norm=norm_ef, trace=trace,
            )
        trace.append((theta.as_array().tolist(), norm_ef))
        if np.max(np.abs(theta.as_array())) > 50.0:
            raise IdentifiabilityError(
                "theta diverged; some coordinate is weakly identified "
                f"(|theta|_max={np.max(np.abs(theta.as_array())):.1f})"
            )
        converged = norm_ef < tol
    if not converged:
        raise ConvergenceError(
            f"estimating equation not solved in {max_iter} iterations "
            f"(|EF|_inf={norm_ef:.3g})",
            gradient_norm=norm_ef, trace=trace,
        )

    cov = sandwich_cov(proc, theta)
    lag = proc.timeline.lag
    if taus is None:
        taus = default_taus(spec, lag)
    wald = wald_waning_test(theta.theta1, cov[1:, 1:], alpha=alpha)
    result = EstimationResult(
        theta_hat=theta, cov=cov, ve_estimates=[], wald_waning=wald,
        iterations=iterations, converged=True,
        cumhaz_b=_cumhaz(proc, theta, "b"), cumhaz_u=_cumhaz(proc, theta, "u"),
        spec=spec, lag=lag, n=proc.n, weight_mode=proc.weight_mode, trace=trace,
    )
    result.ve_estimates = report_ve(result, spec, taus, alpha=alpha)
    return result
