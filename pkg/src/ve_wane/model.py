"""Domain types for the trial timeline, participant records, and the waning model.

All times are calendar weeks from trial start unless noted otherwise; the
waning function g acts on weeks since full vaccine efficacy was reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
PIECEWISE = "piecewise"


@dataclass(frozen=True)
class TrialTimeline:
    """Calendar milestones of the trial, in weeks.

    ``t_accrual``    : full accrual reached
    ``t_pfizer``     : unblinding requests become possible
    ``t_pdcv_start`` : scheduled unblinding visits begin
    ``t_pdcv_end``   : all scheduled unblinding visits completed
    ``t_analysis``   : analysis time; every subject has an endpoint or an
                       unblinding time by then
    ``lag``          : weeks from first dose to full efficacy
    ``p_assign``     : randomization probability of vaccine
    """

    t_accrual: float = 12.0
    t_pfizer: float = 19.0
    t_pdcv_start: float = 21.0
    t_pdcv_end: float = 31.0
    t_analysis: float = 52.0
    lag: float = 6.0
    p_assign: float = 0.5

    def __post_init__(self):
        problems = []
        if not 0.0 < self.t_accrual < self.t_pfizer < self.t_pdcv_start < self.t_pdcv_end <= self.t_analysis:
            problems.append(
                "milestones must satisfy 0 < t_accrual < t_pfizer < "
                "t_pdcv_start < t_pdcv_end <= t_analysis"
            )
        if not self.t_pfizer - self.t_accrual > self.lag:
            problems.append("t_pfizer - t_accrual must exceed the lag")
        if self.lag < 0:
            problems.append("lag must be nonnegative")
        if not 0.0 < self.p_assign < 1.0:
            problems.append("p_assign must be in (0, 1)")
        if problems:
            raise ValueError("invalid timeline: " + "; ".join(problems))


@dataclass(frozen=True)
class WaningModelSpec:
    """Shape of the waning function g(u; theta1).

    ``linear``    : g(u) = theta1 * u (one parameter).
    ``piecewise`` : g(u) = sum_j theta1[j] * I(v_{j} < u <= v_{j+1}) with the
                    last window unbounded; one parameter per knot. Zero knots
                    give g identically 0 (constant efficacy model).
    """

    kind: str = PIECEWISE
    knots: tuple[float, ...] = (20.0,)

    def __post_init__(self):
        if self.kind not in (LINEAR, PIECEWISE):
            raise ValueError(f"unknown waning model kind {self.kind!r}")
        if self.kind == LINEAR:
            if self.knots:
                raise ValueError("linear waning model takes no knots")
        else:
            ks = tuple(float(v) for v in self.knots)
            if any(v <= 0 for v in ks):
                raise ValueError("knots must be positive")
            if any(b <= a for a, b in zip(ks, ks[1:])):
                raise ValueError("knots must be strictly increasing")
            object.__setattr__(self, "knots", ks)

    @property
    def dim_theta1(self) -> int:
        return 1 if self.kind == LINEAR else len(self.knots)


@dataclass(frozen=True)
class Theta:
    """Model parameters: log rate ratio at full efficacy plus waning terms."""

    theta0: float
    theta1: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "theta1", np.atleast_1d(np.asarray(self.theta1, dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.theta0], self.theta1))

    @staticmethod
    def from_array(arr: np.ndarray) -> "Theta":
        arr = np.asarray(arr, dtype=float)
        return Theta(float(arr[0]), arr[1:].copy())

    @property
    def dim(self) -> int:
        return 1 + self.theta1.size


def _check_theta1(spec: WaningModelSpec, theta1) -> np.ndarray:
    theta1 = np.atleast_1d(np.asarray(theta1, dtype=float))
    if theta1.size != spec.dim_theta1:
        raise ValueError(
            f"theta1 has {theta1.size} component(s), waning model needs {spec.dim_theta1}"
        )
    return theta1


def g_value(spec: WaningModelSpec, theta1, u):
    """Waning log-rate offset g(u; theta1); u is weeks past full efficacy.

    Accepts scalar or array u and broadcasts.
    """
    theta1 = _check_theta1(spec, theta1)
    u = np.asarray(u, dtype=float)
    if spec.kind == LINEAR:
        out = theta1[0] * u
    else:
        if spec.dim_theta1 == 0:
            out = np.zeros_like(u)
        else:
            idx = np.searchsorted(np.asarray(spec.knots), u, side="left")
            padded = np.concatenate(([0.0], theta1))
            out = padded[idx]
    return float(out) if out.ndim == 0 else out


def g_grad(spec: WaningModelSpec, theta1, u):
    """Gradient of g with respect to theta1, shape (..., dim_theta1)."""
    theta1 = _check_theta1(spec, theta1)
    u = np.asarray(u, dtype=float)
    if spec.kind == LINEAR:
        return u[..., None] if u.ndim else np.array([float(u)])
    grad = np.zeros(u.shape + (spec.dim_theta1,))
    if spec.dim_theta1:
        idx = np.searchsorted(np.asarray(spec.knots), u, side="left")
        hot = idx > 0
        if u.ndim == 0:
            if hot:
                grad[int(idx) - 1] = 1.0
        else:
            rows = np.nonzero(hot)
            grad[rows + (idx[hot] - 1,)] = 1.0
    return grad


def waning_bucket(spec: WaningModelSpec, u):
    """Index of the waning window containing u: 0 for g=0, j for knot window j.

    Only defined for piecewise models; used to aggregate at-risk sums.
    """
    if spec.kind != PIECEWISE:
        raise ValueError("waning windows are only defined for piecewise models")
    return np.searchsorted(np.asarray(spec.knots), np.asarray(u, dtype=float), side="left")


def ve_from_theta(theta: Theta, spec: WaningModelSpec, tau, lag: float = 6.0):
    """Vaccine efficacy at tau weeks since vaccination: 1 - exp{theta0 + g(tau-lag)}.

    Only defined for tau >= lag; the pre-efficacy branch is not estimated.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < lag):
        raise ValueError(f"tau must be >= lag ({lag}); efficacy before the lag is not modeled")
    out = 1.0 - np.exp(theta.theta0 + g_value(spec, theta.theta1, tau - lag))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ParticipantRecord:
    """One subject's observed trial data.

    ``entry``  : study entry time E
    ``x``      : baseline covariate vector
    ``arm``    : 0 placebo, 1 vaccine
    ``u``      : time to infection (may exceed the analysis time)
    ``infected``: 1 if infected by the analysis time
    ``r_time`` : requested-unblinding / scheduled-visit / infection time,
                 whichever came first
    ``gamma``  : 0 infection first, 1 requested unblinding, 2 scheduled visit
    ``psi``    : placebo crossover agreement; meaningful only when arm=0 and
                 gamma >= 1
    ``psi_valid``: False when psi was missing in the source data
    """

    entry: float
    x: np.ndarray
    arm: int
    u: float
    infected: int
    r_time: float
    gamma: int
    psi: int
    psi_valid: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))


def validate_record(rec: ParticipantRecord, tl: TrialTimeline) -> list[str]:
    """Check every record invariant against the timeline.

    Returns all violations (empty list means the record is consistent);
    inconsistent records are data problems, not exceptions.
    """
    v = []
    if rec.arm not in (0, 1):
        v.append(f"arm must be 0 or 1, got {rec.arm}")
    if rec.gamma not in (0, 1, 2):
        v.append(f"gamma must be 0, 1, or 2, got {rec.gamma}")
    if rec.psi not in (0, 1):
        v.append(f"psi must be 0 or 1, got {rec.psi}")
    if rec.infected not in (0, 1):
        v.append(f"infected must be 0 or 1, got {rec.infected}")
    if not 0.0 <= rec.entry:
        v.append(f"entry must be nonnegative, got {rec.entry}")
    if rec.entry > tl.t_accrual:
        v.append(f"E <= T_A violated: entry {rec.entry} > accrual end {tl.t_accrual}")
    if rec.infected == 1 and not rec.u <= tl.t_analysis:
        v.append(f"infected=1 requires U <= L, got U={rec.u}, L={tl.t_analysis}")
    if rec.infected == 0 and rec.u <= tl.t_analysis:
        v.append(f"infected=0 requires U > L, got U={rec.u}, L={tl.t_analysis}")
    if not rec.entry < rec.u:
        v.append(f"E < U violated: entry {rec.entry}, infection time {rec.u}")
    if rec.gamma == 0:
        if rec.r_time != rec.u:
            v.append(f"gamma=0 requires R = U, got R={rec.r_time}, U={rec.u}")
    elif rec.gamma == 1:
        if not tl.t_pfizer <= rec.r_time:
            v.append(f"gamma=1 requires R >= T_P, got R={rec.r_time}")
        if not rec.r_time < tl.t_pdcv_start:
            v.append(f"gamma=1 requires R < T_U, got R={rec.r_time}")
    elif rec.gamma == 2:
        if not tl.t_pdcv_start <= rec.r_time:
            v.append(f"gamma=2 requires R >= T_U, got R={rec.r_time}")
        if not rec.r_time < tl.t_pdcv_end:
            v.append(f"gamma=2 requires R < T_C, got R={rec.r_time}")
    return v
