"""
Cox proportional hazards baseline
=================================

Fit a Cox model by Newton-Raphson on a small simulated cohort, look at the
log-likelihood path and see what happens when a covariate separates the
outcomes perfectly.
"""

import numpy as np

from modalsurv import ConvergenceError
from modalsurv.coxph import cox_risk, fit_coxph
from modalsurv.survcore import c_index

rng = np.random.default_rng(1)
n = 300
X = rng.normal(size=(n, 3))
true_beta = np.array([0.8, -0.5, 0.0])
t = rng.exponential(size=n) / np.exp(X @ true_beta)
c = rng.exponential(1.5, size=n)
events = t <= c
t = np.minimum(t, c)

model = fit_coxph(X, t, events)
print("beta:", np.round(model.beta, 3), "after", model.n_iterations, "iterations")
print("log-likelihood path:", np.round(model.ll_path, 3))
print(f"in-sample C-index {c_index(cox_risk(model, X), t, events):.3f}")

# A covariate that orders every event perfectly has no finite maximiser
x = np.array([[0.0], [1.0], [2.0], [3.0]])
try:
    fit_coxph(x, np.array([4.0, 3.0, 2.0, 1.0]), np.array([True, True, True, True]))
except ConvergenceError as exc:
    print("separation detected:", exc)

# A small ridge penalty gives a finite answer
print("ridge fit:", fit_coxph(x, np.array([4.0, 3.0, 2.0, 1.0]), np.ones(4, bool), ridge=0.5).beta)
