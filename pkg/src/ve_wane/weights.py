"""Nuisance models for unblinding, entry, and crossover agreement, and the
stabilized inverse-probability weights they induce.

Weight conventions: every weight is a ratio of the reference-covariate
quantity to the participant-specific one, so the randomization probability
cancels and all weights are exactly 1 when no coefficient depends on the
covariates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cox import CoxFit, StepFunction, fit_cox
from .data import TrialData
from .errors import PositivityError
from .logistic import LogisticFit, fit_logistic
from .model import ParticipantRecord, TrialTimeline

SERIALIZATION_VERSION = 1


def entry_design(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
    return x, names


def requested_unblinding_design(x, a):
    """Covariates, arm, and covariate-by-arm interactions."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.asarray(a, dtype=float).reshape(-1, 1)
    mat = np.hstack([x, a, x * a])
    k = x.shape[1]
    names = tuple(
        [f"x{j + 1}" for j in range(k)] + ["a"] + [f"x{j + 1}:a" for j in range(k)]
    )
    return mat, names


def scheduled_unblinding_design(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
    return x, names


def agreement_design(x, gamma):
    """Separate intercept and covariate slopes within each unblinding stratum."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    gamma = np.asarray(gamma, dtype=int)
    k = x.shape[1]
    cols = []
    names = []
    for g in (1, 2):
        ind = (gamma == g).astype(float).reshape(-1, 1)
        cols.append(ind)
        cols.append(ind * x)
        names.append(f"g{g}:const")
        names.extend(f"g{g}:x{j + 1}" for j in range(k))
    return np.hstack(cols), tuple(names)


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted nuisance models plus the reference covariate value."""

    cox_r1: CoxFit
    cox_r2: CoxFit
    cox_entry: CoxFit
    logit_psi: LogisticFit
    x_ref: np.ndarray
    timeline: TrialTimeline

    def __post_init__(self):
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float))

    @staticmethod
    def null(reference: "NuisanceFit") -> "NuisanceFit":
        """Copy of a fit with every coefficient forced to zero.

        Stabilized weights under the result are identically 1.
        """
        def zero_cox(fit: CoxFit) -> CoxFit:
            return CoxFit(
                beta=np.zeros_like(fit.beta),
                baseline_cumhaz=fit.baseline_cumhaz,
                linear_predictor_spec=fit.linear_predictor_spec,
                window=fit.window,
                score_norm=0.0,
                iterations=0,
                n_events=fit.n_events,
            )

        return NuisanceFit(
            cox_r1=zero_cox(reference.cox_r1),
            cox_r2=zero_cox(reference.cox_r2),
            cox_entry=zero_cox(reference.cox_entry),
            logit_psi=LogisticFit(
                gamma=np.zeros_like(reference.logit_psi.gamma),
                design_spec=reference.logit_psi.design_spec,
                score_norm=0.0,
                iterations=0,
                loglik=np.nan,
            ),
            x_ref=reference.x_ref,
            timeline=reference.timeline,
        )

    def to_dict(self) -> dict:
        def cox_dict(fit: CoxFit) -> dict:
            return {
                "beta": fit.beta.tolist(),
                "baseline_times": fit.baseline_cumhaz.times.tolist(),
                "baseline_cumhaz": fit.baseline_cumhaz.values.tolist(),
                "linear_predictor_spec": list(fit.linear_predictor_spec),
                "window": list(fit.window),
                "score_norm": fit.score_norm,
                "iterations": fit.iterations,
                "n_events": fit.n_events,
            }

        tl = self.timeline
        return {
            "version": SERIALIZATION_VERSION,
            "cox_r1": cox_dict(self.cox_r1),
            "cox_r2": cox_dict(self.cox_r2),
            "cox_entry": cox_dict(self.cox_entry),
            "logit_psi": {
                "gamma": self.logit_psi.gamma.tolist(),
                "design_spec": list(self.logit_psi.design_spec),
                "score_norm": self.logit_psi.score_norm,
                "iterations": self.logit_psi.iterations,
            },
            "x_ref": self.x_ref.tolist(),
            "timeline": {
                "t_accrual": tl.t_accrual, "t_pfizer": tl.t_pfizer,
                "t_pdcv_start": tl.t_pdcv_start, "t_pdcv_end": tl.t_pdcv_end,
                "t_analysis": tl.t_analysis, "lag": tl.lag, "p_assign": tl.p_assign,
            },
        }

    @staticmethod
    def from_dict(doc: dict) -> "NuisanceFit":
        if doc.get("version") != SERIALIZATION_VERSION:
            raise ValueError(f"unsupported nuisance-fit document version {doc.get('version')!r}")

        def cox_from(d: dict) -> CoxFit:
            return CoxFit(
                beta=np.asarray(d["beta"], dtype=float),
                baseline_cumhaz=StepFunction(d["baseline_times"], d["baseline_cumhaz"]),
                linear_predictor_spec=tuple(d["linear_predictor_spec"]),
                window=tuple(d["window"]),
                score_norm=d["score_norm"],
                iterations=d["iterations"],
                n_events=d["n_events"],
            )

        lp = doc["logit_psi"]
        return NuisanceFit(
            cox_r1=cox_from(doc["cox_r1"]),
            cox_r2=cox_from(doc["cox_r2"]),
            cox_entry=cox_from(doc["cox_entry"]),
            logit_psi=LogisticFit(
                gamma=np.asarray(lp["gamma"], dtype=float),
                design_spec=tuple(lp["design_spec"]),
                score_norm=lp["score_norm"],
                iterations=lp["iterations"],
                loglik=np.nan,
            ),
            x_ref=np.asarray(doc["x_ref"], dtype=float),
            timeline=TrialTimeline(**doc["timeline"]),
        )

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @staticmethod
    def from_json(path) -> "NuisanceFit":
        with open(path) as fh:
            return NuisanceFit.from_dict(json.load(fh))


def fit_nuisance(data: TrialData, tl: TrialTimeline, x_ref=None) -> NuisanceFit:
    """Fit all four nuisance models on one dataset.

    Unblinding fits censor infections (gamma=0) at their event time; subjects
    still blinded when scheduled visits start are censored in the
    requested-unblinding fit and enter the scheduled-visit risk set. Entry
    times are uncensored. Agreement rows with a missing psi are dropped.
    """
    if x_ref is None:
        x_ref = data.x.mean(axis=0)
    x_ref = np.asarray(x_ref, dtype=float)
    if x_ref.shape != (data.n_covariates,):
        raise ValueError(
            f"x_ref has shape {x_ref.shape}, expected ({data.n_covariates},)"
        )

    mat, names = entry_design(data.x)
    cox_entry = fit_cox(data.entry, np.ones(data.n, dtype=bool), mat,
                        window=(0.0, np.inf), column_names=names)

    mat, names = requested_unblinding_design(data.x, data.arm)
    cox_r1 = fit_cox(data.r_time, data.gamma == 1, mat,
                     window=(tl.t_pfizer, tl.t_pdcv_start), column_names=names)

    mat, names = scheduled_unblinding_design(data.x)
    cox_r2 = fit_cox(data.r_time, data.gamma == 2, mat,
                     window=(tl.t_pdcv_start, tl.t_pdcv_end), column_names=names)

    rows = (data.arm == 0) & (data.gamma >= 1) & data.psi_valid
    mat, names = agreement_design(data.x[rows], data.gamma[rows])
    logit_psi = fit_logistic(data.psi[rows], mat, column_names=names)

    return NuisanceFit(cox_r1=cox_r1, cox_r2=cox_r2, cox_entry=cox_entry,
                       logit_psi=logit_psi, x_ref=x_ref, timeline=tl)


def _lp_r1(fit: NuisanceFit, x, a):
    mat, _ = requested_unblinding_design(x, a)
    return mat @ fit.cox_r1.beta


def _lp_r2(fit: NuisanceFit, x):
    mat, _ = scheduled_unblinding_design(x)
    return mat @ fit.cox_r2.beta


def survival_KR(fit: NuisanceFit, t, x, a):
    """Probability of remaining blinded and unvisited through time t.

    Piecewise: 1 before requests open, the two cause-specific survivor
    factors inside the unblinding windows, 0 once all scheduled visits are
    done.
    """
    tl = fit.timeline
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    lam1 = fit.cox_r1.baseline_cumhaz(t) * np.exp(_lp_r1(fit, x, np.asarray([a]))[0])
    lam2 = fit.cox_r2.baseline_cumhaz(t) * np.exp(_lp_r2(fit, x)[0])
    out = np.where(t >= tl.t_pdcv_end, 0.0, np.exp(-(lam1 + lam2)))
    return float(out) if out.ndim == 0 else out


class StabilizedWeightCalculator:
    """Per-participant stabilized weight machinery for one dataset and fit.

    Blinded weights vary with calendar time through the unblinding survivor
    ratio; unblinded weights are constant scalars per participant.
    """

    def __init__(self, fit: NuisanceFit, data: TrialData):
        self.fit = fit
        self.data = data
        tl = fit.timeline
        x_ref_row = fit.x_ref.reshape(1, -1)

        # entry-density ratio: baseline hazard cancels, cumulative baseline does not
        lp_e = fit.cox_entry.linear_predictor(data.x)
        lp_e_ref = float(fit.cox_entry.linear_predictor(x_ref_row)[0])
        lam_e0 = fit.cox_entry.baseline_cumhaz(data.entry)
        self.entry_ratio = np.exp(
            (lp_e_ref - lp_e) - lam_e0 * (np.exp(lp_e_ref) - np.exp(lp_e))
        )

        # unblinding survivor ratio pieces: exp(lp) for subject and reference,
        # reference keeping each subject's own arm
        self.e1 = np.exp(_lp_r1(fit, data.x, data.arm))
        self.e1_ref = np.exp(_lp_r1(fit, np.tile(x_ref_row, (data.n, 1)), data.arm))
        self.e2 = np.exp(np.broadcast_to(_lp_r2(fit, data.x), (data.n,)))
        self.e2_ref = np.full(data.n, np.exp(float(_lp_r2(fit, x_ref_row)[0])))
        self._base1 = fit.cox_r1.baseline_cumhaz
        self._base2 = fit.cox_r2.baseline_cumhaz
        self._t_end = tl.t_pdcv_end

    def kr_ratio_at(self, t: float) -> np.ndarray:
        """K_R(t | x_ref, A_i) / K_R(t | X_i, A_i) for every participant."""
        if t >= self._t_end:
            raise PositivityError(
                f"unblinding survivor probability is 0 at t={t} (all visits done)"
            )
        b1 = float(self._base1(t))
        b2 = float(self._base2(t))
        log_ratio = -b1 * (self.e1_ref - self.e1) - b2 * (self.e2_ref - self.e2)
        return np.exp(log_ratio)

    def blinded_at(self, t: float) -> np.ndarray:
        return self.entry_ratio * self.kr_ratio_at(t)

    def unblinded(self) -> np.ndarray:
        """Constant stabilized weight for every crossover-eligible participant.

        Entries for ineligible participants (never unblinded, or placebo
        decliners) are NaN and must not be used.
        """
        data, fit = self.data, self.fit
        out = np.full(data.n, np.nan)
        eligible = (data.gamma >= 1) & ((data.arm == 1) | (data.psi == 1))
        if not np.any(eligible):
            return out
        idx = np.nonzero(eligible)[0]
        r = data.r_time[idx]
        b1 = self._base1(r)
        b2 = self._base2(r)
        kr_log = -b1 * (self.e1_ref[idx] - self.e1[idx]) - b2 * (self.e2_ref[idx] - self.e2[idx])
        cause1 = data.gamma[idx] == 1
        dens_log = np.where(
            cause1,
            np.log(self.e1_ref[idx]) - np.log(self.e1[idx]),
            np.log(self.e2_ref[idx]) - np.log(self.e2[idx]),
        )
        w = self.entry_ratio[idx] * np.exp(kr_log + dens_log)

        placebo = data.arm[idx] == 0
        if np.any(placebo):
            p_idx = idx[placebo]
            mat, _ = agreement_design(data.x[p_idx], data.gamma[p_idx])
            p_own = self.fit.logit_psi.probability(mat)
            mat_ref, _ = agreement_design(
                np.tile(fit.x_ref.reshape(1, -1), (p_idx.size, 1)), data.gamma[p_idx]
            )
            p_ref = self.fit.logit_psi.probability(mat_ref)
            if np.any(p_own <= 0.0):
                raise PositivityError("estimated agreement probability is 0 for a crossover")
            w[placebo] = w[placebo] * (p_ref / p_own)
        bad = ~np.isfinite(w) | (w <= 0.0)
        if np.any(bad):
            raise PositivityError(
                f"{int(bad.sum())} unblinded stabilized weight(s) are zero or non-finite"
            )
        out[idx] = w
        return out


def stabilized_weight_blinded(fit: NuisanceFit, rec: ParticipantRecord, t: float) -> float:
    """Stabilized weight for the blinded-phase process at calendar time t."""
    calc = StabilizedWeightCalculator(fit, TrialData.from_records([rec]))
    return float(calc.blinded_at(t)[0])


def stabilized_weight_unblinded(fit: NuisanceFit, rec: ParticipantRecord) -> float:
    """Stabilized weight for the post-unblinding process (constant in time)."""
    if rec.gamma < 1:
        raise ValueError("participant was never unblinded")
    if rec.arm == 0 and rec.psi != 1:
        raise ValueError("placebo participant declined crossover; weight undefined")
    calc = StabilizedWeightCalculator(fit, TrialData.from_records([rec]))
    return float(calc.unblinded()[0])
