"""Cox proportional hazards fitting with Breslow tie handling and baseline.

Supports an observation window [t_lo, t_hi): subjects whose time falls before
the window never enter a risk set, subjects surviving past it are censored at
t_hi. Used for the cause-specific unblinding hazards and the entry-time model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, SingularModelError


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous nondecreasing step function, zero before the first step."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError("times and values must be matching 1-d arrays")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate(([0.0], self.values))
        out = padded[idx]
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CoxFit:
    """Fitted proportional hazards model.

    ``baseline_cumhaz`` is the Breslow cumulative baseline hazard on the
    fitting window; it is flat outside the observed event times.
    """

    beta: np.ndarray
    baseline_cumhaz: StepFunction
    linear_predictor_spec: tuple[str, ...]
    window: tuple[float, float]
    score_norm: float
    iterations: int
    n_events: int
    loglik: float = field(default=np.nan)

    def linear_predictor(self, design):
        design = np.atleast_2d(np.asarray(design, dtype=float))
        return design @ self.beta

    def cumulative_hazard(self, t, design):
        """Lambda(t | row) = Lambda0(t) * exp(lp) for each design row."""
        lp = self.linear_predictor(design)
        base = self.baseline_cumhaz(t)
        return base * np.exp(lp)


def _suffix_sums(w, x):
    rev0 = np.cumsum(w[::-1])[::-1]
    rev1 = np.cumsum((x * w[:, None])[::-1], axis=0)[::-1]
    xxw = np.einsum("ij,ik,i->ijk", x, x, w)
    rev2 = np.cumsum(xxw[::-1], axis=0)[::-1]
    return rev0, rev1, rev2


def fit_cox(times, events, design, window=(0.0, np.inf), column_names=None,
            tol=1e-9, max_iter=50) -> CoxFit:
    """Maximize the Breslow partial likelihood by Newton-Raphson.

    ``times`` may include observations outside the window; they are dropped
    (before) or censored (after) as appropriate. Raises ConvergenceError when
    the likelihood is monotone (some coefficient diverges) or the iteration
    budget is exhausted, SingularModelError for a rank-deficient information
    matrix.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[0] != times.shape[0]:
        design = design.T
    t_lo, t_hi = window
    keep = times >= t_lo
    times = times[keep]
    events = events[keep]
    design = design[keep]
    censored_late = times >= t_hi
    events = events & ~censored_late & (times >= t_lo)
    times = np.minimum(times, t_hi)
    n, p = design.shape
    if column_names is None:
        column_names = tuple(f"z{j + 1}" for j in range(p))
    if not np.any(events):
        raise ValueError("no events inside the fitting window")

    order = np.argsort(times, kind="stable")
    t_s = times[order]
    e_s = events[order]
    x_raw = design[order]
    center = x_raw.mean(axis=0)
    x_s = x_raw - center

    ev_pos = np.nonzero(e_s)[0]
    uniq_times, d = np.unique(t_s[ev_pos], return_counts=True)
    start_idx = np.searchsorted(t_s, uniq_times, side="left")
    x_event_sum = x_s[ev_pos].sum(axis=0)

    def evaluate(beta):
        lp = x_s @ beta
        if np.max(np.abs(lp)) > 500.0:
            raise ConvergenceError(
                "monotone likelihood: linear predictor diverged during Cox fit",
                gradient_norm=np.inf,
            )
        w = np.exp(lp)
        rev0, rev1, rev2 = _suffix_sums(w, x_s)
        s0 = rev0[start_idx]
        s1 = rev1[start_idx]
        s2 = rev2[start_idx]
        if np.any(s0 <= 0):
            raise ConvergenceError("empty risk set at an event time", gradient_norm=np.inf)
        zbar = s1 / s0[:, None]
        ll = float(lp[ev_pos].sum() - (d * np.log(s0)).sum())
        score = x_event_sum - (d[:, None] * zbar).sum(axis=0)
        info = np.einsum("j,jkl->kl", d, s2 / s0[:, None, None]) \
            - np.einsum("j,jk,jl->kl", d, zbar, zbar)
        return ll, score, info, s0

    beta = np.zeros(p)
    ll, score, info, s0 = evaluate(beta)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularModelError("singular information matrix in Cox fit") from None
        # step-halving on the partial likelihood
        factor = 1.0
        for _ in range(30):
            cand = beta + factor * step
            try:
                ll_new, score_new, info_new, s0_new = evaluate(cand)
            except ConvergenceError:
                if factor <= 2.0 ** -29:
                    raise
                factor /= 2.0
                continue
            if ll_new >= ll - 1e-12 * abs(ll):
                beta, ll, score, info, s0 = cand, ll_new, score_new, info_new, s0_new
                break
            factor /= 2.0
        else:
            raise ConvergenceError(
                "Cox step-halving failed to improve the partial likelihood",
                gradient_norm=float(np.max(np.abs(score))),
            )
    grad_norm = float(np.max(np.abs(score)))
    # a monotone likelihood drives the gradient to ~exp(-|beta|), which can
    # pass the tolerance at a huge but finite beta; flag it by predictor range
    lp_span = float(np.max(np.abs(x_s @ beta))) if n else 0.0
    if lp_span > 8.0:
        raise ConvergenceError(
            "monotone likelihood: a Cox coefficient diverged "
            f"(centered linear predictor spans {lp_span:.1f})",
            gradient_norm=grad_norm,
        )
    if grad_norm >= tol:
        raise ConvergenceError(
            f"Cox fit did not converge in {max_iter} iterations",
            gradient_norm=grad_norm,
        )

    # Breslow baseline on the original (uncentered) covariate scale
    increments = d / s0 * np.exp(-center @ beta)
    baseline = StepFunction(uniq_times, np.cumsum(increments))
    return CoxFit(
        beta=beta,
        baseline_cumhaz=baseline,
        linear_predictor_spec=tuple(column_names),
        window=(float(t_lo), float(t_hi)),
        score_norm=grad_norm,
        iterations=iterations,
        n_events=int(d.sum()),
        loglik=ll,
    )
