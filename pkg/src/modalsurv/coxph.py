"""Cox proportional-hazards baseline fitted by Newton-Raphson.

Ties are handled with the Breslow approximation. Inputs are expected to be
standardized by the caller, the same matrices the deep model consumes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ConvergenceError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-6
LL_TOL = 1e-9
MAX_ITER = 100
# monotone likelihood (separation) signatures: a coefficient worth more than
# MAX_LP_COEF per covariate SD, or its information shrinking below
# INFO_COLLAPSE times its value at beta = 0
MAX_LP_COEF = 10.0
INFO_COLLAPSE = 1e-4
# near the optimum the true gain of a Newton step drops below the
# resolution of the log-likelihood itself; such steps are still accepted
LL_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class CoxModel:
    beta: np.ndarray
    log_likelihood: float
    n_iterations: int
    converged: bool
    ridge: float = 0.0
    ll_path: tuple[float, ...] = ()


def _prepare(X, times, events):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(times, dtype=float).ravel()
    e = np.asarray(events).astype(bool).ravel()
    if X.shape[0] != t.size or t.size != e.size:
        raise ValidationError("X, times and events must have the same number of rows")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X has non-finite entries")
    return X, t, e


def _risk_set_sizes(t):
    """Number of subjects with ``time >= t_i``, plus the descending time order."""
    order = np.argsort(-t, kind="stable")
    ts = t[order]
    counts = np.searchsorted(-ts, -t, side="right")
    return order, counts


def partial_log_likelihood(beta, X, times, events, ridge: float = 0.0, derivatives: bool = False):
    """Breslow partial log-likelihood, optionally with gradient and Hessian.

    ``ridge`` subtracts ``0.5 * ridge * |beta|^2``.
    """
    X, t, e = _prepare(X, times, events)
    beta = np.asarray(beta, dtype=float).ravel()
    eta = X @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    order, counts = _risk_set_sizes(t)
    idx = counts[e] - 1
    cw = np.cumsum(w[order])[idx]
    ll = float(np.sum(eta[e]) - np.sum(np.log(cw) + shift)) - 0.5 * ridge * float(beta @ beta)
    if not derivatives:
        return ll
    Xo = X[order]
    cwx = np.cumsum(w[order, None] * Xo, axis=0)[idx]
    xbar = cwx / cw[:, None]
    grad = X[e].sum(axis=0) - xbar.sum(axis=0) - ridge * beta
    cwxx = np.cumsum(w[order, None, None] * Xo[:, :, None] * Xo[:, None, :], axis=0)[idx]
    info = (cwxx / cw[:, None, None]).sum(axis=0) - xbar.T @ xbar
    info = info + ridge * np.eye(beta.size)
    return ll, grad, -info


def fit_coxph(X, times, events, ridge: float = 0.0, max_iter: int = MAX_ITER) -> CoxModel:
    """Maximize the partial likelihood with step-halving Newton-Raphson.

    Raises
    ------
    ConvergenceError
        If the likelihood is monotone (a coefficient runs off to infinity) or
        the iteration cap is hit.
    NumericalError
        If the information matrix is singular.
    """
    X, t, e = _prepare(X, times, events)
    if not e.any():
        raise ValidationError("Cox fit needs at least one event")
    sd = X.std(axis=0)
    if np.any(sd < 1e-12):
        raise ValidationError(f"constant covariate column(s) {np.flatnonzero(sd < 1e-12).tolist()}")
    if ridge < 0:
        raise ValidationError("ridge must be >= 0")

    beta = np.zeros(X.shape[1])
    ll, grad, hess = partial_log_likelihood(beta, X, t, e, ridge, derivatives=True)
    info0 = -np.diag(hess)
    path = [ll]
    n_iter = 0
    converged = np.max(np.abs(grad)) < GRAD_TOL
    while not converged and n_iter < max_iter:
        n_iter += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix") from None
        if not np.all(np.isfinite(step)):
            raise NumericalError("singular information matrix")
        scale = 1.0
        for _ in range(60):
            cand = beta + scale * step
            ll_new = partial_log_likelihood(cand, X, t, e, ridge)
            if np.isfinite(ll_new) and ll_new >= ll - LL_ROUNDOFF * (1.0 + abs(ll)):
                break
            scale *= 0.5
        else:
            break
        beta = cand
        ll_new, grad, hess = partial_log_likelihood(beta, X, t, e, ridge, derivatives=True)
        delta = ll_new - ll
        ll = ll_new
        path.append(ll)
        if np.max(np.abs(grad)) < GRAD_TOL or abs(delta) < LL_TOL:
            break

    lp_coef = np.abs(beta) * sd
    collapsed = -np.diag(hess) < INFO_COLLAPSE * info0
    if np.any(lp_coef > MAX_LP_COEF) or np.any(collapsed):
        j = int(np.argmax(np.where(collapsed, np.inf, lp_coef)))
        raise ConvergenceError(
            f"monotone likelihood: coefficient {j} diverges (beta={beta[j]:.3g}); "
            "the covariate separates the event ordering"
        )
    converged = bool(np.max(np.abs(grad)) < GRAD_TOL)
    if not converged:
        j = int(np.argmax(np.abs(grad)))
        raise ConvergenceError(f"Newton-Raphson did not converge after {n_iter} iterations (coefficient {j})")
    if ridge > 0:
        logger.info("Cox fit used ridge penalty %g", ridge)
    return CoxModel(beta, ll, n_iter, converged, ridge, tuple(path))


def cox_risk(model: CoxModel, X) -> np.ndarray:
    """Linear predictor ``X @ beta``; larger means earlier expected event."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.beta.size:
        raise ValidationError(f"expected {model.beta.size} columns, got {X.shape[1]}")
    return X @ model.beta


def save_cox(model: CoxModel, path) -> None:
    np.save(Path(path), np.asarray(model.beta, dtype=np.float64))


def load_cox(path) -> CoxModel:
    beta = np.load(Path(path))
    return CoxModel(beta, float("nan"), 0, True)
