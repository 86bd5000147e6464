"""Monte Carlo study driver and the single-dataset estimation pipeline."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import TrialData, read_csv, write_csv
from .errors import StudyError, VeWaneError
from .estimator import (
    EstimationResult,
    build_processes,
    default_taus,
    report_ve,
    solve_theta,
)
from .model import PIECEWISE, Theta, TrialTimeline, WaningModelSpec, g_value
from .simulate import ScenarioConfig, generate_dataset
from .weights import NuisanceFit, fit_nuisance

log = logging.getLogger("ve_wane")

FAILURE_LIMIT = 0.05


def estimand_labels(spec: WaningModelSpec) -> list:
    """Estimand names mirroring the waning windows: theta1 plus one VE per window."""
    names = []
    if spec.dim_theta1 == 1:
        names.append("theta1")
    else:
        names.extend(f"theta1[{j}]" for j in range(spec.dim_theta1))
    if spec.kind == PIECEWISE and spec.knots:
        names.append(f"VE<={spec.knots[0]:g}")
        for j, v in enumerate(spec.knots):
            hi = spec.knots[j + 1] if j + 1 < len(spec.knots) else None
            names.append(f"VE>{v:g}" if hi is None else f"VE({v:g},{hi:g}]")
    else:
        names.append("VE")
    return names


def true_values(cfg: ScenarioConfig) -> dict:
    """Map estimand labels to their generative-truth values."""
    spec = cfg.waning
    th = cfg.theta_true
    lag = cfg.timeline.lag
    out = {}
    labels = estimand_labels(spec)
    t1_labels = [x for x in labels if x.startswith("theta1")]
    for j, lab in enumerate(t1_labels):
        out[lab] = float(th.theta1[j])
    ve_labels = [x for x in labels if x.startswith("VE")]
    for tau, lab in zip(default_taus(spec, lag), ve_labels):
        out[lab] = float(1.0 - np.exp(th.theta0 + g_value(spec, th.theta1, tau - lag)))
    return out


def _estimates_row(result: EstimationResult, spec: WaningModelSpec) -> dict:
    """Point estimate, SE, and CI per estimand for one replication."""
    th = result.theta_hat
    se = result.theta_se()
    labels = estimand_labels(spec)
    row = {}
    t1_labels = [x for x in labels if x.startswith("theta1")]
    for j, lab in enumerate(t1_labels):
        est, s = float(th.theta1[j]), float(se[1 + j])
        row[lab] = {"est": est, "se": s, "lo": est - 1.96 * s, "hi": est + 1.96 * s}
    ve_labels = [x for x in labels if x.startswith("VE")]
    for ve, lab in zip(result.ve_estimates, ve_labels):
        row[lab] = {"est": ve["ve"], "se": ve["se"], "lo": ve["ci_low"], "hi": ve["ci_high"]}
    row["_wald_p"] = result.wald_waning["p_value"]
    return row


def _run_replication(args) -> dict:
    """One replication: generate, estimate under the requested weight modes."""
    scenario, rep, root_seed, modes, alpha = args
    seed_seq = np.random.SeedSequence(entropy=root_seed, spawn_key=(rep,))
    sim = generate_dataset(scenario, seed=seed_seq)
    tl, spec = scenario.timeline, scenario.waning
    out = {"rep": rep}
    fit = None
    for mode in modes:
        try:
            if mode == "unit":
                proc = build_processes(sim.data, tl, spec, weights="unit")
            else:
                if fit is None:
                    fit = fit_nuisance(sim.data, tl)
                proc = build_processes(sim.data, tl, spec, weights=fit)
            result = solve_theta(proc, alpha=alpha)
            out[mode] = _estimates_row(result, spec)
        except VeWaneError as exc:
            out[mode] = {"_failure": f"{type(exc).__name__}: {exc}"}
    return out


@dataclass
class MonteCarloSummary:
    """Per-estimand Monte Carlo operating characteristics, grouped by weight mode."""

    preset: str | None
    n: int
    replications: int
    seed: int
    alpha: float
    truth: dict
    waning_true: float | list
    modes: dict = field(default_factory=dict)
    # modes[mode] = {"rows": {label: {mean, median, sd, mean_se, coverage}},
    #                "waning_reject_rate": float, "is_type1": bool,
    #                "n_failed": int, "failures": [[rep, reason], ...]}

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "n": self.n,
            "replications": self.replications,
            "seed": self.seed,
            "alpha": self.alpha,
            "truth": self.truth,
            "waning_true": self.waning_true,
            "modes": self.modes,
        }


def _aggregate(rows: list, truth: dict, labels: list, alpha: float) -> dict:
    ok = [r for r in rows if "_failure" not in r]
    failures = [[i, r["_failure"]] for i, r in enumerate(rows) if "_failure" in r]
    agg = {"rows": {}, "n_failed": len(failures), "failures": failures,
           "n_used": len(ok)}
    for lab in labels:
        ests = np.array([r[lab]["est"] for r in ok])
        ses = np.array([r[lab]["se"] for r in ok])
        covered = np.array([r[lab]["lo"] <= truth[lab] <= r[lab]["hi"] for r in ok])
        agg["rows"][lab] = {
            "mean": float(ests.mean()) if ests.size else None,
            "median": float(np.median(ests)) if ests.size else None,
            "sd": float(ests.std(ddof=1)) if ests.size > 1 else None,
            "mean_se": float(ses.mean()) if ses.size else None,
            "coverage": float(covered.mean()) if ests.size else None,
        }
    pvals = np.array([r["_wald_p"] for r in ok])
    agg["waning_reject_rate"] = float((pvals < alpha).mean()) if pvals.size else None
    return agg


def run_mc_study(cfg: RunConfig) -> MonteCarloSummary:
    """Replicate generate/fit/estimate and aggregate operating characteristics.

    Replication r uses the stream spawned from (seed, r), so results are
    bit-identical for any worker count; failed replications are recorded and
    excluded, and more than 5% failures aborts the study.
    """
    scenario = cfg.resolve_scenario()
    if cfg.seed is None and scenario.seed is None:
        raise ValueError("mc-study needs a seed")
    root_seed = cfg.seed if cfg.seed is not None else scenario.seed
    modes = ["unit", "estimated"] if cfg.weights == "both" else [cfg.weights]
    reps = cfg.replications
    tasks = [(scenario, r, root_seed, modes, cfg.alpha) for r in range(reps)]

    results: dict[int, dict] = {}
    workers = max(1, cfg.threads)
    if workers == 1:
        for t in tasks:
            res = _run_replication(t)
            results[res["rep"]] = res
            if (res["rep"] + 1) % 25 == 0:
                log.info("replication %d/%d done", res["rep"] + 1, reps)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_replication, tasks, chunksize=1):
                results[res["rep"]] = res
                if (res["rep"] + 1) % 25 == 0:
                    log.info("replication %d/%d done", res["rep"] + 1, reps)

    spec = scenario.waning
    labels = estimand_labels(spec)
    truth = true_values(scenario)
    theta1_true = scenario.theta_true.theta1
    summary = MonteCarloSummary(
        preset=cfg.preset, n=scenario.n, replications=reps, seed=root_seed,
        alpha=cfg.alpha, truth=truth,
        waning_true=float(theta1_true[0]) if theta1_true.size == 1 else theta1_true.tolist(),
    )
    for mode in modes:
        rows = [results[r][mode] for r in range(reps)]
        agg = _aggregate(rows, truth, labels, cfg.alpha)
        agg["is_type1"] = bool(np.all(theta1_true <= 0.0))
        if agg["n_failed"] > FAILURE_LIMIT * reps:
            raise StudyError(
                f"{agg['n_failed']}/{reps} replications failed in {mode} mode; "
                f"first failure: {agg['failures'][0]}"
            )
        summary.modes[mode] = agg
    return summary


def weight_diagnostics(proc, top: int = 10) -> dict:
    """Largest contributing weights and effective sample sizes per process."""
    out = {"top_weights": [], "ess": {}}
    blinded = [("blinded-jump", int(i), float(proc.w_blinded_jump[i]))
               for i in np.nonzero(proc.blinded_active)[0]]
    unblinded = [("unblinded", int(i), float(proc.w_unblinded[i]))
                 for i in np.nonzero(proc.unblinded_eligible)[0]]
    for kind, entries in (("blinded-jump", blinded), ("unblinded", unblinded)):
        w = np.array([e[2] for e in entries])
        if w.size:
            out["ess"][kind] = float(w.sum() ** 2 / (w ** 2).sum())
        else:
            out["ess"][kind] = None
    ranked = sorted(blinded + unblinded, key=lambda e: e[2], reverse=True)[:top]
    out["top_weights"] = [{"kind": k, "row": i, "weight": w} for k, i, w in ranked]
    return out


def bootstrap_cov(data: TrialData, tl: TrialTimeline, spec: WaningModelSpec,
                  weights: str, n_boot: int, seed: int) -> np.ndarray:
    """Nonparametric-bootstrap covariance of theta_hat (refits weights per draw)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    draws = []
    for _ in range(n_boot):
        idx = rng.integers(0, data.n, size=data.n)
        boot = data.subset(idx)
        try:
            w = fit_nuisance(boot, tl) if weights == "estimated" else "unit"
            res = solve_theta(build_processes(boot, tl, spec, weights=w))
            draws.append(res.theta_hat.as_array())
        except VeWaneError:
            continue
    if len(draws) < 2:
        raise StudyError("bootstrap produced fewer than 2 successful fits")
    return np.cov(np.array(draws).T, ddof=1)


def run_estimate(cfg: RunConfig) -> tuple[EstimationResult, dict]:
    """Full pipeline on one dataset; returns the result and output payloads.

    Validation failures raise with itemized messages; estimation errors
    propagate.
    """
    tl = cfg.timeline
    spec = cfg.waning
    if cfg.data_path is not None:
        data = read_csv(cfg.data_path)
    else:
        scenario = cfg.resolve_scenario()
        tl, spec = scenario.timeline, scenario.waning
        data = generate_dataset(scenario, seed=cfg.seed).data
    problems = data.validate(tl)
    if problems:
        raise ValueError(
            f"dataset failed validation with {len(problems)} problem(s):\n  "
            + "\n  ".join(problems)
        )
    mode = cfg.weights
    if mode == "both":
        raise ValueError("estimate mode takes weights unit or estimated")
    if mode == "estimated":
        x_ref = np.asarray(cfg.x_ref, dtype=float) if cfg.x_ref is not None else None
        fit = fit_nuisance(data, tl, x_ref=x_ref)
        proc = build_processes(data, tl, spec, weights=fit)
    else:
        fit = None
        proc = build_processes(data, tl, spec, weights="unit")
    taus = cfg.taus if cfg.taus is not None else default_taus(spec, tl.lag)
    result = solve_theta(proc, alpha=cfg.alpha, taus=taus)
    payload = {
        "result": result.to_dict(),
        "diagnostics": weight_diagnostics(proc),
        "nuisance": None if fit is None else fit.to_dict(),
    }
    if cfg.bootstrap:
        bcov = bootstrap_cov(data, tl, spec, mode, cfg.bootstrap, cfg.seed or 0)
        payload["bootstrap_cov"] = bcov.tolist()
    return result, payload, proc
