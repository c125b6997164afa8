import numpy as np
import pytest

from modalsurv.coxph import CoxModel, cox_risk, fit_coxph, load_cox, partial_log_likelihood, save_cox
from modalsurv.datamodel import ConvergenceError, ValidationError
from modalsurv.survcore import c_index
from oracles import brute_partial_ll, golden_max


def ph_cohort(rng, n, beta, censor=0.3):
    x = rng.normal(size=(n, len(beta)))
    t = rng.exponential(size=n) / np.exp(x @ beta)
    c = rng.exponential(np.quantile(t, 0.5) / censor * 0.5, size=n)
    return x, np.minimum(t, c), t <= c


def test_separation_is_detected():
    with pytest.raises(ConvergenceError, match="coefficient 0"):
        fit_coxph([1.0, 1.0, 0.0, 0.0], [1, 2, 3, 4], [1, 1, 1, 1])


def test_separation_rescued_by_ridge():
    m = fit_coxph([1.0, 1.0, 0.0, 0.0], [1, 2, 3, 4], [1, 1, 1, 1], ridge=0.5)
    assert m.converged and m.beta[0] > 0


def test_matches_brute_force_1d(rng):
    for _ in range(5):
        x, t, e = ph_cohort(rng, 30, [0.7])
        t = np.round(t, 1) + 0.1  # create ties to exercise the Breslow path
        m = fit_coxph(x, t, e)
        b = golden_max(lambda b: brute_partial_ll(b, x[:, 0], t, e), -5, 5)
        assert m.beta[0] == pytest.approx(b, abs=1e-3)
        assert m.log_likelihood == pytest.approx(brute_partial_ll(m.beta[0], x[:, 0], t, e), abs=1e-9)


def test_gradient_matches_finite_differences(rng):
    x, t, e = ph_cohort(rng, 40, [0.5, -0.3, 0.2])
    for _ in range(3):
        beta = rng.normal(size=3)
        _, g, h = partial_log_likelihood(beta, x, t, e, derivatives=True)
        eps = 1e-6
        fd = np.array([(partial_log_likelihood(beta + eps * d, x, t, e) - partial_log_likelihood(beta - eps * d, x, t, e))
                       / (2 * eps) for d in np.eye(3)])
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)
        fdh = np.array([(partial_log_likelihood(beta + eps * d, x, t, e, derivatives=True)[1]
                         - partial_log_likelihood(beta - eps * d, x, t, e, derivatives=True)[1]) / (2 * eps)
                        for d in np.eye(3)])
        assert np.allclose(h, fdh, rtol=1e-5, atol=1e-6)


def test_ll_monotone_over_newton_steps(rng):
    x, t, e = ph_cohort(rng, 80, [1.5, -1.0])
    m = fit_coxph(x, t, e)
    path = np.array(m.ll_path)
    # non-decreasing up to the floating-point resolution of the likelihood
    assert np.all(np.diff(path) >= -1e-12 * (1 + np.abs(path[1:])))
    assert path[-1] > path[0]
    assert m.converged and m.n_iterations >= 1


def test_scaling_invariance(rng):
    x, t, e = ph_cohort(rng, 60, [0.8, 0.4])
    m1 = fit_coxph(x, t, e)
    xs = x * np.array([3.0, 0.25])
    m2 = fit_coxph(xs, t, e)
    assert np.allclose(m2.beta, m1.beta / np.array([3.0, 0.25]), rtol=1e-6)
    assert np.allclose(cox_risk(m1, x), cox_risk(m2, xs), atol=1e-6)


def test_null_covariate(rng):
    n = 2000
    x = rng.normal(size=(n, 1))
    t = rng.exponential(size=n)
    m = fit_coxph(x, t, np.ones(n, bool))
    assert abs(m.beta[0]) < 0.1
    assert abs(c_index(cox_risk(m, x), t, np.ones(n, bool)) - 0.5) < 0.03


def test_recovers_oracle_c(rng):
    x, t, e = ph_cohort(rng, 500, [2.0])
    m = fit_coxph(x, t, e)
    assert abs(c_index(cox_risk(m, x), t, e) - c_index(2.0 * x[:, 0], t, e)) <= 0.05


def test_risk_contract():
    m = CoxModel(np.zeros(2), 0.0, 0, True)
    assert np.all(cox_risk(m, np.ones((3, 2))) == 0)
    m = CoxModel(np.array([1.0, 0.0]), 0.0, 0, True)
    x = np.array([[2.0, 5.0], [-1.0, 3.0]])
    assert cox_risk(m, x).tolist() == [2.0, -1.0]
    with pytest.raises(ValidationError):
        cox_risk(m, np.ones((2, 3)))


def test_preconditions():
    with pytest.raises(ValidationError):
        fit_coxph([[1.0], [2.0]], [1, 2], [0, 0])
    with pytest.raises(ValidationError, match="constant"):
        fit_coxph([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]], [1, 2, 3], [1, 1, 1])


def test_persist(tmp_path, rng):
    x, t, e = ph_cohort(rng, 50, [1.0])
    m = fit_coxph(x, t, e)
    save_cox(m, tmp_path / "beta.npy")
    assert np.array_equal(load_cox(tmp_path / "beta.npy").beta, m.beta)
