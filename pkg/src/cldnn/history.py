"""Sliding-window history stack and the excitation diagnostics built on it."""
from __future__ import annotations

import csv
import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .dnn import DnnModel, forward_and_jacobian


class StackGatingError(ValueError):
    """A control-mode sample arrived before the observer settling time."""


class StackMode(str, enum.Enum):
    REGRESSION = "regression"
    CONTROL = "control"


@dataclass(frozen=True)
class StackSample:
    """One recorded data point.

    In control mode ``target`` is the concatenation ``[u_i, delta_hat_i]``.
    """

    x: np.ndarray
    target: np.ndarray
    t: float

    @property
    def u(self):
        return self.target[: self.target.size // 2]

    @property
    def delta_hat(self):
        return self.target[self.target.size // 2:]


class HistoryStack:
    """Ring buffer of the most recent ``capacity`` samples.

    New samples wait in a pending list and are moved into the active window
    every ``refresh_every`` records (one refresh event).  Only the active
    window is visible to the update laws.  Jacobians are never stored.
    """

    def __init__(self, capacity=200, refresh_every=5, mode=StackMode.REGRESSION, t_delta=0.0):
        if capacity < 1 or refresh_every < 1:
            raise ValueError("capacity and refresh_every must be positive")
        self.capacity = int(capacity)
        self.refresh_every = int(refresh_every)
        self.mode = StackMode(mode)
        self.t_delta = float(t_delta)
        self._window = deque(maxlen=self.capacity)
        self._pending = []
        self.refresh_count = 0
        self.records_total = 0
        self._last_t = -np.inf
        self._arrays = None

    def __len__(self):
        return len(self._window)

    @property
    def samples(self):
        return tuple(self._window)

    @property
    def pending(self):
        return tuple(self._pending)

    def record(self, sample: StackSample) -> "HistoryStack":
        if self.mode is StackMode.CONTROL and sample.t < self.t_delta:
            raise StackGatingError(
                f"sample at t={sample.t:.4f} s precedes settling time {self.t_delta:.4f} s"
            )
        if not sample.t > self._last_t:
            raise ValueError("sample timestamps must be strictly increasing")
        self._last_t = sample.t
        self._pending.append(sample)
        self.records_total += 1
        if len(self._pending) >= self.refresh_every:
            self.refresh()
        return self

    def refresh(self):
        self._window.extend(self._pending)
        self._pending.clear()
        self.refresh_count += 1
        self._arrays = None

    def arrays(self):
        """Return ``(X, targets, t)`` stacked over the active window."""
        if self._arrays is None:
            if not self._window:
                self._arrays = (None, None, np.zeros(0))
            else:
                self._arrays = (
                    np.array([s.x for s in self._window]),
                    np.array([s.target for s in self._window]),
                    np.array([s.t for s in self._window]),
                )
        return self._arrays

    def write_csv(self, path):
        X, T, t = self.arrays()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if X is None:
                w.writerow(["t"])
                return
            w.writerow(["t"] + [f"x{i}" for i in range(X.shape[1])] + [f"target{i}" for i in range(T.shape[1])])
            for ti, xi, yi in zip(t, X, T):
                w.writerow([repr(float(ti))] + [repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


def gram_from_jacobians(J) -> np.ndarray:
    """Sum of ``J_i^T J_i`` over a batch ``(N, n, rho)``."""
    Jf = J.reshape(-1, J.shape[-1])
    G = Jf.T @ Jf
    return 0.5 * (G + G.T)


def regressor_gram(stack: HistoryStack, model: DnnModel, theta_hat) -> np.ndarray:
    """Regressor Gram matrix of the active window at the current estimate.

    An empty stack yields the zero matrix.
    """
    X, _, _ = stack.arrays()
    if X is None:
        return np.zeros((model.n_params, model.n_params))
    _, J = forward_and_jacobian(model, X, theta_hat)
    return gram_from_jacobians(J)


@dataclass(frozen=True)
class FeDiagnostic:
    lambda_min: float
    satisfied: bool
    threshold: float


def fe_diagnostic(gram, lambda_e=1e-6, mask=None) -> FeDiagnostic:
    """Minimum eigenvalue of a Gram matrix against the excitation threshold.

    ``mask`` restricts the check to a subset of parameters (for instance the
    live parameters of a model).
    """
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError(f"gram must be square, got {gram.shape}")
    if np.max(np.abs(gram - gram.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(gram), initial=0.0)):
        raise ValueError("gram is not symmetric")
    if mask is not None:
        gram = gram[np.ix_(mask, mask)]
    lam = float(np.linalg.eigvalsh(gram)[0]) if gram.size else 0.0
    return FeDiagnostic(lam, lam >= lambda_e, float(lambda_e))


@dataclass(frozen=True)
class IdentifiabilityReport:
    rank: int
    n_params: int
    identifiable: bool
    singular_values: np.ndarray


def stacked_jacobian(points, model: DnnModel, theta) -> np.ndarray:
    X = np.atleast_2d(np.asarray(points, dtype=float))
    _, J = forward_and_jacobian(model, X, theta)
    return J.reshape(-1, model.n_params)


def numerical_rank(A) -> tuple:
    s = np.linalg.svd(np.atleast_2d(A), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, s
    tol = A.shape[1] * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol)), s


def identifiability_rank(points, model: DnnModel, theta) -> IdentifiabilityReport:
    """Rank of the stacked Jacobian over a point set."""
    A = stacked_jacobian(points, model, theta)
    rank, s = numerical_rank(A)
    return IdentifiabilityReport(rank, model.n_params, rank == model.n_params, s)
