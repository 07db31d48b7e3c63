"""Online DNN estimators for the regression model ``y = f(x) + delta(t)``.

Three laws are available: an instantaneous gradient flow and the two
concurrent-learning (CL) laws, which add a sum over the history stack with
Jacobians re-evaluated at the current estimate.
"""
from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dnn import DnnModel, SearchSpace, clamp_to_ball, forward, forward_and_jacobian, project_rate
from .history import HistoryStack, StackMode, StackSample, fe_diagnostic, regressor_gram


class DivergenceError(FloatingPointError):
    """Non-finite estimator state."""


class RegressionLaw(str, enum.Enum):
    GRADIENT = "gradient"
    CL1 = "cl1"
    CL2 = "cl2"


@dataclass
class NreProblem:
    f_true: Callable
    domain: tuple
    disturbance: Callable | None = None
    disturbance_bound: float = 0.0

    def measure(self, x, t):
        y = np.asarray(self.f_true(x), dtype=float)
        if self.disturbance is not None:
            y = y + self.disturbance(t)
        return y

    @property
    def volume(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.domain)
        return float(np.prod(hi - lo))


def _gain(g, v):
    # scalar or diagonal gain
    return np.asarray(g) * v


class RegressionEstimator:
    """Continuous-time estimator discretised with a fixed step.

    ``gamma1`` and ``gamma2`` may be scalars or vectors holding the diagonal
    of a gain matrix.  ``sigma`` is the regulariser used by the gradient law.
    """

    def __init__(self, model: DnnModel, theta_hat, gamma1=1.0, gamma2=0.0, space=None,
                 stack=None, law=RegressionLaw.CL1, sigma=0.0, integrator="rk4",
                 cl2_printed_sign=False):
        self.model = model
        self.space = space if space is not None else SearchSpace.for_model(model)
        theta_hat = np.array(theta_hat, dtype=float)
        if np.linalg.norm(theta_hat) > self.space.radius:
            raise ValueError("initial estimate lies outside the search space")
        self.theta_hat = theta_hat
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.sigma = float(sigma)
        self.stack = stack if stack is not None else HistoryStack(mode=StackMode.REGRESSION)
        self.law = RegressionLaw(law)
        if integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {integrator!r}")
        self.integrator = integrator
        # +1 reproduces the "+ Phi' theta_hat" term literally; -1 is the descent form
        self._cl2_sign = 1.0 if cl2_printed_sign else -1.0
        self.t = 0.0

    def rate_gradient(self, x, y, theta=None):
        """Unprojected descent rate ``gamma1 (Phi'^T y_tilde - sigma theta)``."""
        theta = self.theta_hat if theta is None else theta
        yhat, J = forward_and_jacobian(self.model, x, theta)
        return _gain(self.gamma1, J.T @ (np.asarray(y) - yhat) - self.sigma * theta)

    def _stack_sum(self, theta, second_law):
        X, Y, _ = self.stack.arrays()
        if X is None:
            return np.zeros_like(theta)
        yhat, J = forward_and_jacobian(self.model, X, theta)
        if second_law:
            resid = Y + self._cl2_sign * (J @ theta)
        else:
            resid = Y - yhat
        return np.einsum("bnp,bn->p", J, resid)

    def rate_cl1(self, theta=None):
        theta = self.theta_hat if theta is None else theta
        raw = _gain(self.gamma1, self._stack_sum(theta, False)) - _gain(self.gamma2, theta)
        return project_rate(theta, raw, self.space)

    def rate_cl2(self, theta=None):
        theta = self.theta_hat if theta is None else theta
        raw = _gain(self.gamma1, self._stack_sum(theta, True)) - _gain(self.gamma2, theta)
        return project_rate(theta, raw, self.space)

    def rate(self, x=None, y=None, theta=None):
        theta = self.theta_hat if theta is None else theta
        if self.law is RegressionLaw.GRADIENT:
            return project_rate(theta, self.rate_gradient(x, y, theta), self.space)
        if self.law is RegressionLaw.CL1:
            return self.rate_cl1(theta)
        return self.rate_cl2(theta)

    def step(self, x, y, dt) -> "RegressionEstimator":
        if not dt > 0:
            raise ValueError("dt must be positive")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.stack.record(StackSample(x, y, self.t))
        th = self.theta_hat
        if self.integrator == "euler":
            th = th + dt * self.rate(x, y, th)
        else:
            f = lambda th_: self.rate(x, y, clamp_to_ball(th_, self.space))
            k1 = f(th)
            k2 = f(th + 0.5 * dt * k1)
            k3 = f(th + 0.5 * dt * k2)
            k4 = f(th + dt * k3)
            th = th + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(th)):
            raise DivergenceError(f"non-finite estimate at t={self.t:.4f}")
        self.theta_hat = clamp_to_ball(th, self.space)
        self.t += dt
        return self


@dataclass(frozen=True)
class LossEstimate:
    value: float
    grid: np.ndarray
    sigma: float


def loss_estimate(model: DnnModel, theta, problem: NreProblem, grid_density=10, sigma=0.0) -> LossEstimate:
    """Midpoint Riemann sum of the regularised squared-error loss over the domain box."""
    if grid_density < 2:
        raise ValueError("grid_density must be at least 2 per axis")
    lo, hi = (np.asarray(b, dtype=float) for b in problem.domain)
    axes = [l + (np.arange(grid_density) + 0.5) * (h - l) / grid_density for l, h in zip(lo, hi)]
    grid = np.array(list(itertools.product(*axes)))
    cell = problem.volume / grid.shape[0]
    f = np.array([np.asarray(problem.f_true(p), dtype=float) for p in grid])
    err = f - forward(model, grid, theta)
    density = np.sum(err * err, axis=1) + sigma * float(np.dot(theta, theta))
    return LossEstimate(float(np.sum(density) * cell), grid, sigma)


@dataclass
class RegressionTrace:
    t: list = field(default_factory=list)
    y_err: list = field(default_factory=list)
    theta_err: list = field(default_factory=list)
    lambda_min: list = field(default_factory=list)

    def as_arrays(self):
        return {k: np.asarray(v, dtype=float) for k, v in self.__dict__.items()}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "y_err_norm", "theta_err_norm", "lambda_min_gram"])
            for row in zip(self.t, self.y_err, self.theta_err, self.lambda_min):
                w.writerow([repr(float(v)) for v in row])


def run_regression(est: RegressionEstimator, problem: NreProblem, signal: Callable, duration, dt=0.01,
                   theta_star=None, diag_every=50) -> RegressionTrace:
    """Drive an estimator with ``x = signal(t)`` and log the error norms.

    The Gram eigenvalue is evaluated every ``diag_every`` steps (NaN in between).
    """
    trace = RegressionTrace()
    n_steps = int(round(duration / dt))
    for k in range(n_steps):
        t = est.t
        x = np.asarray(signal(t), dtype=float)
        y = problem.measure(x, t)
        trace.t.append(t)
        trace.y_err.append(float(np.linalg.norm(y - forward(est.model, x, est.theta_hat))))
        trace.theta_err.append(
            float(np.linalg.norm(theta_star - est.theta_hat)) if theta_star is not None else np.nan
        )
        if k % diag_every == 0:
            lam = fe_diagnostic(regressor_gram(est.stack, est.model, est.theta_hat)).lambda_min
        else:
            lam = np.nan
        trace.lambda_min.append(lam)
        est.step(x, y, dt)
    return trace
