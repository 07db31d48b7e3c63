"""Tracking controller, state-derivative observer and the adaptive DNN laws
used in closed loop.

The plant is ``xdd = f(x, xd) + u`` with ``f`` unknown.  The controller
feeds forward a DNN estimate of ``f``; the observer reconstructs ``xdd`` so
that past control inputs can be compared against what the current network
predicts, which is what the history-stack terms of the update laws use.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dnn import DnnModel, SearchSpace, forward, forward_and_jacobian, project_rate
from .history import HistoryStack, StackMode, gram_from_jacobians


class ObserverDivergence(FloatingPointError):
    pass


class GainDefinitenessError(np.linalg.LinAlgError):
    """The inverse least-squares gain lost positive definiteness."""


class ControlLaw(str, enum.Enum):
    BASELINE = "baseline"
    CL1 = "cl1"
    CL2 = "cl2"


def tracking_errors(x, xd, x_des, xd_des, alpha1):
    """Return ``(e, r)`` with ``e = x - x_des`` and ``r = e_dot + alpha1 e``."""
    e = np.asarray(x, dtype=float) - x_des
    return e, (np.asarray(xd, dtype=float) - xd_des) + alpha1 * e


def control_input(model: DnnModel, theta_hat, e, e_dot, r, xdd_des, X, k1, alpha1):
    """Feedback-linearising input with the network as feedforward term."""
    return xdd_des - forward(model, X, theta_hat) - k1 * r - e - alpha1 * e_dot


# --------------------------------------------------------------------------
# observer

@dataclass(frozen=True)
class ObserverState:
    """State-derivative observer in its u-dot-free form.

    ``delta_hat`` tracks the plant acceleration.  It is rebuilt every step as
    ``delta0 + k_delta (rt - rt0) + (u - u0) + integral_acc`` where ``rt`` is
    the observer error ``r - r_hat`` and ``integral_acc`` accumulates
    ``(k_delta alpha2 + 1) rt`` with the trapezoid rule.
    """

    r_hat: np.ndarray
    delta_hat: np.ndarray
    integral_acc: np.ndarray
    r_tilde: np.ndarray
    alpha2: float = 50.0
    k_delta: float = 20.0
    t_delta: float = 3.0
    delta_acc: float = 0.1
    r_tilde0: np.ndarray | None = None
    u0: np.ndarray | None = None
    delta0: np.ndarray | None = None
    t: float = 0.0

    @classmethod
    def start(cls, r0, u0, t0=0.0, r_hat0=None, delta0=None, **gains):
        r0 = np.asarray(r0, dtype=float)
        r_hat0 = r0.copy() if r_hat0 is None else np.asarray(r_hat0, dtype=float)
        delta0 = np.zeros_like(r0) if delta0 is None else np.asarray(delta0, dtype=float)
        rt0 = r0 - r_hat0
        return cls(r_hat0, delta0, np.zeros_like(r0), rt0, r_tilde0=rt0,
                   u0=np.asarray(u0, dtype=float).copy(), delta0=delta0, t=float(t0), **gains)

    @property
    def settled(self) -> bool:
        return self.t >= self.t_delta

    def _delta(self, r_tilde, u, integral):
        return self.delta0 + self.k_delta * (r_tilde - self.r_tilde0) + (u - self.u0) + integral


def observer_step(obs: ObserverState, r0, r1, feed0, feed1, u, u_next, dt) -> ObserverState:
    """Advance the observer across one control period.

    ``r0, r1`` are the filtered tracking error at the start and end of the
    period and ``feed = -xdd_des + alpha1 e_dot`` at both ends; both are
    linearly interpolated inside the step.  ``u`` is the input held over the
    step and ``u_next`` the input computed at the new time, which enters the
    returned ``delta_hat``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    r0, r1 = np.asarray(r0, dtype=float), np.asarray(r1, dtype=float)
    feed0, feed1 = np.asarray(feed0, dtype=float), np.asarray(feed1, dtype=float)
    c = obs.k_delta * obs.alpha2 + 1.0
    rt_k = obs.r_tilde
    I_k = obs.integral_acc

    def rhs(s, r_hat):
        r = r0 + s * (r1 - r0)
        rt = r - r_hat
        # integral predicted forward from the step start
        delta = obs._delta(rt, u, I_k + c * rt_k * (s * dt))
        return delta + feed0 + s * (feed1 - feed0) + obs.alpha2 * rt

    y = obs.r_hat
    k1 = rhs(0.0, y)
    k2 = rhs(0.5, y + 0.5 * dt * k1)
    k3 = rhs(0.5, y + 0.5 * dt * k2)
    k4 = rhs(1.0, y + dt * k3)
    r_hat = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(r_hat)):
        raise ObserverDivergence(f"observer state non-finite at t={obs.t:.4f}")
    rt1 = r1 - r_hat
    integral = I_k + 0.5 * dt * c * (rt_k + rt1)
    delta_hat = obs._delta(rt1, np.asarray(u_next, dtype=float), integral)
    return replace(obs, r_hat=r_hat, delta_hat=delta_hat, integral_acc=integral,
                   r_tilde=rt1, t=obs.t + dt)


def settling_time(k_delta, lam1, z0_norm, delta_f, delta_acc, t0=0.0) -> float:
    """Time after which the observer errors are guaranteed below ``delta_acc``.

    Raises ValueError when the gain condition ``k_delta lam1 > delta_f^2 / delta_acc^2``
    fails.
    """
    a = k_delta * lam1
    if not a * delta_acc ** 2 > delta_f ** 2:
        raise ValueError("infeasible: k_delta*Lambda1 <= delta_f^2/delta_Delta^2")
    num = a * z0_norm ** 2 - delta_f ** 2
    den = a * delta_acc ** 2 - delta_f ** 2
    return t0 + max(0.0, np.log(num / den) / lam1)


# --------------------------------------------------------------------------
# least-squares gain

@dataclass(frozen=True)
class LsGain:
    """Time-varying adaptation gain, stored as its inverse."""

    gamma_inv: np.ndarray
    beta: float = 0.01
    eig_min_gate: float = 1e-3
    eig_max_gate: float = 1e3

    @classmethod
    def identity(cls, n, scale=1.0, **kw):
        return cls(np.eye(n) / scale, **kw)

    def gamma(self) -> np.ndarray:
        return cho_solve(cho_factor(self.gamma_inv), np.eye(self.gamma_inv.shape[0]))

    @cached_property
    def _eigs(self):
        ev = np.linalg.eigvalsh(self.gamma_inv)
        return 1.0 / ev[-1], 1.0 / ev[0]

    def gamma_eigs(self):
        """``(lambda_min, lambda_max)`` of the gain itself."""
        return self._eigs

    def gates_open(self) -> bool:
        lo, hi = self.gamma_eigs()
        return self.eig_min_gate < lo and hi < self.eig_max_gate


def _ls_rk4(M, G, beta, gamma1, h):
    f = lambda A: -beta * A + gamma1 * G
    k1 = f(M)
    k2 = f(M + 0.5 * h * k1)
    k3 = f(M + 0.5 * h * k2)
    k4 = f(M + h * k3)
    M = M + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (M + M.T)


def ls_gain_step(g: LsGain, gram, gamma1, dt, max_bisect=60) -> LsGain:
    """One RK4 step of the inverse-gain dynamics, frozen while a gate is shut.

    If a full step would carry an eigenvalue past a gate the step is
    shortened by bisection so that it lands on the gate to within
    ``1e-9 * eig_max_gate``; the gate then closes on the next call.
    """
    if not g.gates_open():
        return g
    gram = np.asarray(gram, dtype=float)
    tol = 1e-9 * g.eig_max_gate

    def violation(M):
        ev = np.linalg.eigvalsh(M)
        if ev[0] <= 0:
            return np.inf
        return max(g.eig_min_gate - 1.0 / ev[-1], 1.0 / ev[0] - g.eig_max_gate)

    M = _ls_rk4(g.gamma_inv, gram, g.beta, gamma1, dt)
    if violation(M) > 0:
        lo, hi = 0.0, 1.0
        for _ in range(max_bisect):
            mid = 0.5 * (lo + hi)
            M = _ls_rk4(g.gamma_inv, gram, g.beta, gamma1, mid * dt)
            v = violation(M)
            if 0.0 <= v <= tol:
                break
            if v > 0:
                hi = mid
            else:
                lo = mid
        else:
            M = _ls_rk4(g.gamma_inv, gram, g.beta, gamma1, lo * dt)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise GainDefinitenessError("inverse gain is no longer positive definite; check the gates") from exc
    return replace(g, gamma_inv=M)


# --------------------------------------------------------------------------
# dither and estimator

def dither_signal(t) -> float:
    return (np.cos(0.2 * t) ** 2 + np.sin(2 * t) ** 2 * np.cos(0.1 * t)
            + np.sin(-1.2 * t) ** 2 * np.cos(0.5 * t) + np.sin(t) ** 2)


def dither(t, gamma3, n_params, phases=None) -> np.ndarray:
    """Bounded excitation added to the parameter rate.

    The scalar signal is copied to every channel unless per-channel time
    ``phases`` are given.
    """
    if gamma3 == 0:
        return np.zeros(n_params)
    if phases is None:
        return np.full(n_params, gamma3 * dither_signal(t))
    return gamma3 * dither_signal(t + np.asarray(phases))


class ControlEstimator:
    """Adaptive DNN feedforward estimate for the tracking controller.

    ``law`` selects the stack term; the baseline keeps only the tracking term,
    sigma damping and dither with ``gamma1 = gamma2 = 0``.
    """

    def __init__(self, model: DnnModel, theta_hat, gamma1=0.12, gamma2=0.005, gamma3=0.001,
                 law=ControlLaw.CL1, ls_gain: LsGain | None = None, space=None, stack=None,
                 dither_phases=None):
        self.model = model
        self.law = ControlLaw(law)
        if self.law is ControlLaw.BASELINE:
            gamma1 = gamma2 = 0.0
        self.gamma1, self.gamma2, self.gamma3 = float(gamma1), float(gamma2), float(gamma3)
        self.space = space if space is not None else SearchSpace.for_model(model)
        theta_hat = np.array(theta_hat, dtype=float)
        if np.linalg.norm(theta_hat) > self.space.radius:
            raise ValueError("initial estimate lies outside the search space")
        self.theta_hat = theta_hat
        self.ls_gain = ls_gain if ls_gain is not None else LsGain.identity(model.n_params)
        self.stack = stack if stack is not None else HistoryStack(mode=StackMode.CONTROL)
        self.dither_phases = dither_phases
        self._gamma = self.ls_gain.gamma()
        self._cache = None

    def refresh_gain(self, ls_gain: LsGain):
        self.ls_gain = ls_gain
        self._gamma = ls_gain.gamma()

    @property
    def gamma(self):
        return self._gamma

    def reconstruct_input(self, X_i, delta_hat_i, theta=None):
        theta = self.theta_hat if theta is None else theta
        return np.asarray(delta_hat_i) - forward(self.model, X_i, theta)

    def stack_terms(self, theta):
        """Return ``(stack_sum, gram)`` for the active window at ``theta``.

        ``stack_sum`` is the bracketed sum that the law subtracts, already
        scaled by ``gamma1``.
        """
        X, T, _ = self.stack.arrays()
        rho = self.model.n_params
        if X is None:
            return np.zeros(rho), np.zeros((rho, rho))
        key = (self.stack.refresh_count, self.stack.records_total, self.law)
        if self._cache is not None and self._cache[0] == key and np.array_equal(self._cache[1], theta):
            return self._cache[2]
        n = self.model.output_dim
        U, D = T[:, :n], T[:, n:]
        out, J = forward_and_jacobian(self.model, X, theta)
        if self.law is ControlLaw.CL2:
            resid = U - D + J @ theta
        else:
            resid = U - (D - out)
        out = self.gamma1 * np.einsum("bnp,bn->p", J, resid), gram_from_jacobians(J)
        self._cache = (key, theta.copy(), out)
        return out

    def rate(self, r, X, t, theta=None, gamma=None):
        theta = self.theta_hat if theta is None else theta
        gamma = self._gamma if gamma is None else gamma
        _, J = forward_and_jacobian(self.model, X, theta)
        inner = J.T @ np.asarray(r, dtype=float) - self.gamma2 * theta
        if self.law is not ControlLaw.BASELINE:
            inner = inner - self.stack_terms(theta)[0]
        raw = gamma @ inner + dither(t, self.gamma3, theta.size, self.dither_phases)
        return project_rate(theta, raw, self.space)

    def rate_control_cl1(self, r, X, t, theta=None):
        return self._with_law(ControlLaw.CL1, r, X, t, theta)

    def rate_control_cl2(self, r, X, t, theta=None):
        return self._with_law(ControlLaw.CL2, r, X, t, theta)

    def _with_law(self, law, r, X, t, theta):
        saved = self.law
        self.law = law
        try:
            return self.rate(r, X, t, theta)
        finally:
            self.law = saved


def lyapunov_value(r, e, theta_tilde=None, gamma_inv=None) -> float:
    """Tracking part of the candidate plus the weighted parameter error when known."""
    v = 0.5 * float(np.dot(r, r)) + 0.5 * float(np.dot(e, e))
    if theta_tilde is not None:
        v += 0.5 * float(theta_tilde @ gamma_inv @ theta_tilde)
    return v
