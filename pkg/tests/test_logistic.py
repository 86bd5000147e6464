import numpy as np
import pytest
from scipy.special import expit as sp_expit

from ve_wane.errors import SeparationError, SingularModelError
from ve_wane.logistic import expit, fit_logistic


def irls_oracle(y, x, tol=1e-10, max_iter=500, damping=0.5):
    """Damped fixed-point IRLS, independent of the package's Newton path."""
    gamma = np.zeros(x.shape[1])
    for _ in range(max_iter):
        p = sp_expit(x @ gamma)
        w = np.clip(p * (1 - p), 1e-10, None)
        z = x @ gamma + (y - p) / w
        new = np.linalg.solve(x.T @ (x * w[:, None]), x.T @ (w * z))
        step = new - gamma
        gamma = gamma + damping * step
        if np.max(np.abs(step)) < tol:
            break
    return gamma


def test_intercept_only_closed_form():
    y = np.array([1.0] * 80 + [0.0] * 20)
    x = np.ones((100, 1))
    fit = fit_logistic(y, x)
    assert fit.gamma[0] == pytest.approx(np.log(0.8 / 0.2), abs=1e-9)


def test_separation_all_ones_in_stratum():
    y = np.array([1, 1, 1, 1, 0, 1, 0, 1], dtype=float)
    # first column separates perfectly: y=1 iff x=1 on its support
    x = np.column_stack([np.array([1, 1, 1, 1, 0, 0, 0, 0]), np.ones(8)])
    with pytest.raises(SeparationError):
        fit_logistic(y, x)


def test_matches_irls_oracle():
    rng = np.random.default_rng(17)
    n = 500
    x = np.column_stack([np.ones(n), rng.normal(0, 1, n), rng.random(n)])
    gamma_true = np.array([0.3, -0.7, 1.1])
    y = (rng.random(n) < sp_expit(x @ gamma_true)).astype(float)
    fit = fit_logistic(y, x)
    oracle = irls_oracle(y, x)
    assert np.allclose(fit.gamma, oracle, atol=1e-6)
    assert fit.score_norm < 1e-8


def test_rank_deficiency():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    x = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
    with pytest.raises(SingularModelError):
        fit_logistic(y, x)


def test_expit_stable():
    assert expit(0.0) == 0.5
    assert expit(800.0) == 1.0
    assert expit(-800.0) == 0.0
    assert np.allclose(expit(np.array([-1.0, 1.0])), sp_expit([-1.0, 1.0]))
