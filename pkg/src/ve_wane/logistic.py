"""Logistic regression by Newton-Raphson, used for the crossover agreement model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, SeparationError, SingularModelError


def expit(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LogisticFit:
    """Fitted binary regression: P(y=1 | row) = expit(row @ gamma)."""

    gamma: np.ndarray
    design_spec: tuple[str, ...]
    score_norm: float
    iterations: int
    loglik: float

    def probability(self, design):
        design = np.atleast_2d(np.asarray(design, dtype=float))
        return expit(design @ self.gamma)


def fit_logistic(y, design, column_names=None, tol=1e-9, max_iter=50) -> LogisticFit:
    """Maximum likelihood for a Bernoulli GLM with logit link.

    Raises SeparationError when the MLE diverges, SingularModelError for a
    rank-deficient design.
    """
    y = np.asarray(y, dtype=float)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[0] != y.shape[0]:
        design = design.T
    n, p = design.shape
    if column_names is None:
        column_names = tuple(f"c{j + 1}" for j in range(p))
    xtx = design.T @ design
    if np.linalg.matrix_rank(xtx) < p:
        raise SingularModelError("rank-deficient design in logistic fit")

    def evaluate(gamma):
        lp = design @ gamma
        if np.max(np.abs(lp)) > 100.0:
            raise SeparationError(
                "separation: logistic linear predictor diverged", gradient_norm=np.inf
            )
        prob = expit(lp)
        ll = float(np.sum(y * lp - np.logaddexp(0.0, lp)))
        score = design.T @ (y - prob)
        w = prob * (1.0 - prob)
        info = design.T @ (design * w[:, None])
        return ll, score, info

    gamma = np.zeros(p)
    ll, score, info = evaluate(gamma)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularModelError("singular information matrix in logistic fit") from None
        factor = 1.0
        for _ in range(30):
            cand = gamma + factor * step
            try:
                ll_new, score_new, info_new = evaluate(cand)
            except SeparationError:
                if factor <= 2.0 ** -29:
                    raise
                factor /= 2.0
                continue
            if ll_new >= ll - 1e-12 * abs(ll):
                gamma, ll, score, info = cand, ll_new, score_new, info_new
                break
            factor /= 2.0
        else:
            raise ConvergenceError(
                "logistic step-halving failed to improve the likelihood",
                gradient_norm=float(np.max(np.abs(score))),
            )
    grad_norm = float(np.max(np.abs(score)))
    # under separation the gradient decays like exp(-|lp|) and can pass the
    # tolerance at a huge finite gamma; flag by fitted-probability extremity
    lp = design @ gamma
    if np.max(np.abs(lp - lp.mean())) > 8.0:
        raise SeparationError(
            "separation: fitted probabilities are numerically 0/1 "
            f"(centered linear predictor spans {np.max(np.abs(lp - lp.mean())):.1f})",
            gradient_norm=grad_norm,
        )
    if grad_norm >= tol:
        raise ConvergenceError(
            f"logistic fit did not converge in {max_iter} iterations",
            gradient_norm=grad_norm,
        )
    return LogisticFit(
        gamma=gamma,
        design_spec=tuple(column_names),
        score_norm=grad_norm,
        iterations=iterations,
        loglik=ll,
    )
