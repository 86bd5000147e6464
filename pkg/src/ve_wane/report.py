"""Table emission (text/csv/json) and report figures.

Figures are rendered to files next to the delimited outputs; CSV/JSON stay
the primary, scriptable artifacts.
"""

from __future__ import annotations

import csv
import json

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .estimator import EstimationResult  # noqa: E402
from .mc import MonteCarloSummary  # noqa: E402
from .model import g_grad, g_value  # noqa: E402

_COLS = ("mean", "median", "sd", "mean_se", "coverage")
_HEADS = ("Mean", "Med", "SD", "SE", "Cov")


def _fmt_cell(v, width=8) -> str:
    if v is None:
        return "--".rjust(width)
    return f"{v:.3f}".rjust(width)


def summary_text(summary: MonteCarloSummary) -> str:
    lines = []
    title = summary.preset or "custom scenario"
    lines.append(
        f"Monte Carlo summary: {title}, n={summary.n}, "
        f"{summary.replications} replications, seed={summary.seed}"
    )
    for mode, agg in summary.modes.items():
        label = "Stabilized weights = 1" if mode == "unit" else "Stabilized weights estimated"
        lines.append("")
        lines.append(label)
        lines.append(" " * 12 + "".join(h.rjust(9) for h in _HEADS))
        for est, row in agg["rows"].items():
            cells = "".join(_fmt_cell(row[c], 9) for c in _COLS)
            lines.append(f"{est:<12}{cells}")
        rate = agg["waning_reject_rate"]
        kind = "type I error" if agg["is_type1"] else "rejection rate"
        rate_s = "--" if rate is None else f"{rate:.3f}"
        lines.append(f"waning test {kind} at alpha={summary.alpha:g}: {rate_s}")
        lines.append(f"failed replications: {agg['n_failed']}")
    return "\n".join(lines) + "\n"


def summary_csv_rows(summary: MonteCarloSummary) -> list:
    rows = [["weights", "estimand", "truth", "mean", "median", "sd", "mean_se",
             "coverage", "waning_reject_rate", "n_failed", "n_used"]]
    for mode, agg in summary.modes.items():
        for est, row in agg["rows"].items():
            rows.append([
                mode, est, repr(summary.truth[est]),
                *[("" if row[c] is None else repr(row[c])) for c in _COLS],
                repr(agg["waning_reject_rate"]) if agg["waning_reject_rate"] is not None else "",
                str(agg["n_failed"]), str(agg["n_used"]),
            ])
    return rows


def emit_table(summary: MonteCarloSummary, fmt: str, path) -> None:
    """Write the study summary as text, csv, or json."""
    if fmt == "text":
        with open(path, "w") as fh:
            fh.write(summary_text(summary))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(summary_csv_rows(summary))
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump(summary.to_dict(), fh, indent=1)
    else:
        raise ValueError(f"unknown table format {fmt!r}; use text, csv, or json")


def read_summary_csv(path) -> list:
    """Parse an emitted summary CSV back into typed rows (round-trip helper)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        out = []
        for raw in reader:
            row = dict(zip(header, raw))
            for key in ("truth", "mean", "median", "sd", "mean_se", "coverage",
                        "waning_reject_rate"):
                row[key] = float(row[key]) if row[key] != "" else None
            row["n_failed"] = int(row["n_failed"])
            row["n_used"] = int(row["n_used"])
            out.append(row)
        return out


def ve_table_text(result: EstimationResult) -> str:
    lines = [
        f"n={result.n}, weights={result.weight_mode}, converged in "
        f"{result.iterations} iteration(s)",
        f"theta0 = {result.theta_hat.theta0:+.4f}  "
        f"theta1 = {np.array2string(result.theta_hat.theta1, precision=4)}",
        "",
        f"{'tau':>6}{'VE':>9}{'SE':>9}{'95% CI':>20}",
    ]
    for row in result.ve_estimates:
        lines.append(
            f"{row['tau']:>6.1f}{row['ve']:>9.3f}{row['se']:>9.3f}"
            f"{'[' + format(row['ci_low'], '.3f') + ', ' + format(row['ci_high'], '.3f') + ']':>20}"
        )
    w = result.wald_waning
    lines.append("")
    lines.append(
        f"waning test: z = {w['statistic']:.3f}, one-sided p = {w['p_value']:.4f} "
        f"({'reject' if w['reject'] else 'do not reject'} at alpha={w['alpha']:g})"
    )
    return "\n".join(lines) + "\n"


def write_ve_csv(result: EstimationResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "ve", "se", "ci_low", "ci_high"])
        for row in result.ve_estimates:
            w.writerow([repr(row[k]) for k in ("tau", "ve", "se", "ci_low", "ci_high")])


def write_weights_csv(diagnostics: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "kind", "row", "weight"])
        for rank, entry in enumerate(diagnostics["top_weights"], start=1):
            w.writerow([rank, entry["kind"], entry["row"], repr(entry["weight"])])
        w.writerow([])
        w.writerow(["ess_process", "value"])
        for kind, value in diagnostics["ess"].items():
            w.writerow([kind, "" if value is None else repr(value)])


def ve_curve_figure(result: EstimationResult, path, t_max: float | None = None) -> None:
    """Efficacy over time since vaccination with a pointwise 95% band."""
    lag = result.lag
    spec = result.spec
    if t_max is None:
        t_max = lag + (max(spec.knots) + 15.0 if spec.knots else 40.0)
    taus = np.linspace(lag, t_max, 400)
    theta = result.theta_hat
    eta = theta.theta0 + g_value(spec, theta.theta1, taus - lag)
    grads = np.hstack([np.ones((taus.size, 1)), g_grad(spec, theta.theta1, taus - lag)])
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", grads, result.cov, grads), 0.0))
    ve = 1.0 - np.exp(eta)
    lo = 1.0 - np.exp(eta + 1.96 * se)
    hi = 1.0 - np.exp(eta - 1.96 * se)

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.fill_between(taus, lo, hi, alpha=0.25, lw=0, label="95% CI")
    ax.plot(taus, ve, lw=1.8, label="VE estimate")
    for row in result.ve_estimates:
        ax.plot(row["tau"], row["ve"], "o", ms=5, color="k")
    ax.set_xlabel("weeks since vaccination")
    ax.set_ylabel("vaccine efficacy")
    ax.set_ylim(min(-0.05, float(lo.min()) - 0.05), 1.0)
    ax.axhline(0.0, color="gray", lw=0.6)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def weights_figure(diagnostics: dict, proc, path) -> None:
    """Histogram of contributing stabilized weights by process."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    wb = proc.w_blinded_jump[proc.blinded_active]
    wu = proc.w_unblinded[proc.unblinded_eligible]
    for arr, label in ((wb, "blinded jumps"), (wu, "unblinded")):
        if arr.size:
            ax.hist(arr, bins=40, alpha=0.55, label=label)
    ax.axvline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("stabilized weight")
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def mc_summary_figure(summary: MonteCarloSummary, path) -> None:
    """Bar chart of Monte Carlo means with SD whiskers against the truth."""
    labels = list(summary.truth)
    modes = list(summary.modes)
    fig, axes = plt.subplots(1, len(labels), figsize=(3.0 * len(labels), 3.6),
                             squeeze=False)
    width = 0.35
    for k, lab in enumerate(labels):
        ax = axes[0][k]
        for j, mode in enumerate(modes):
            row = summary.modes[mode]["rows"][lab]
            if row["mean"] is None:
                continue
            ax.bar(j * width, row["mean"], width * 0.9,
                   yerr=row["sd"] if row["sd"] else None,
                   capsize=3, label=mode if k == 0 else None)
        ax.axhline(summary.truth[lab], color="r", lw=1.0, ls="--")
        ax.set_title(lab, fontsize=10)
        ax.set_xticks([])
    if modes:
        axes[0][0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
