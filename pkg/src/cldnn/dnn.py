"""Feedforward DNN function class with closed-form parameter Jacobian.

Layout conventions
------------------
The input is augmented with a trailing one, ``X_a = [x, 1]``, and every hidden
activation vector ends with a constant one entry acting as the bias of the
next layer.  Layer ``j`` holds a weight matrix ``v_j`` of shape
``(L_j, L_{j+1})`` and the parameter vector stacks the column-major
vectorisations ``theta = [vec(v_0), ..., vec(v_k)]``.

Because the last pre-activation entry of every hidden layer is overwritten by
the bias one, the last column of ``v_0 .. v_{k-1}`` never influences the
output.  :meth:`DnnModel.live_mask` marks the parameters that do.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when an input, parameter vector or matrix has the wrong shape."""


class ProjectionError(RuntimeError):
    """Raised when an estimate has left the parameter search ball."""


class ActivationKind(str, enum.Enum):
    TANH = "tanh"
    SWISH = "swish"
    IDENTITY = "identity"

    def value_and_slope(self, z):
        if self is ActivationKind.TANH:
            a = np.tanh(z)
            return a, 1.0 - a * a
        if self is ActivationKind.SWISH:
            s = 1.0 / (1.0 + np.exp(-z))
            a = z * s
            return a, s + a * (1.0 - s)
        return z, np.ones_like(z)


@dataclass(frozen=True)
class DnnModel:
    """Architecture description.

    ``layer_widths`` lists ``L_1 .. L_{k+1}``; the last entry is the output
    dimension ``n`` and every hidden width counts the bias entry.  ``k = 0``
    (no hidden layer) gives the linear model ``v_0^T X_a`` and is only meant
    for test rigs.
    """

    input_dim: int
    layer_widths: tuple
    activation: ActivationKind | Sequence[ActivationKind] = ActivationKind.TANH
    _acts: tuple = field(init=False, repr=False, compare=False)
    _layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if self.input_dim < 1:
            raise DimensionError("input_dim must be positive")
        if not widths or any(w < 1 for w in widths):
            raise DimensionError(f"layer widths must be positive, got {widths}")
        k = len(widths) - 1
        if isinstance(self.activation, (ActivationKind, str)):
            acts = (ActivationKind(self.activation),) * k
        else:
            acts = tuple(ActivationKind(a) for a in self.activation)
            if len(acts) != k:
                raise DimensionError(f"expected {k} activation kinds, got {len(acts)}")
        object.__setattr__(self, "_acts", acts)
        w = (self.input_dim + 1,) + widths
        shapes = tuple((w[j], w[j + 1]) for j in range(len(w) - 1))
        slices, start = [], 0
        for a, b in shapes:
            slices.append(slice(start, start + a * b))
            start += a * b
        object.__setattr__(self, "_layout", (shapes, tuple(slices), start))

    @property
    def hidden_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def widths(self) -> tuple:
        """All widths ``L_0 .. L_{k+1}`` with ``L_0 = m + 1``."""
        return (self.input_dim + 1,) + self.layer_widths

    @property
    def activations(self) -> tuple:
        return self._acts

    @property
    def shapes(self) -> list:
        return list(self._layout[0])

    @property
    def n_params(self) -> int:
        return self._layout[2]

    def block_slices(self) -> list:
        return list(self._layout[1])

    def live_mask(self) -> np.ndarray:
        """Boolean mask of parameters that can influence the output."""
        mask = np.ones(self.n_params, dtype=bool)
        shapes = self.shapes
        for j, sl in enumerate(self.block_slices()[:-1]):
            rows, cols = shapes[j]
            block = np.ones((rows, cols), dtype=bool)
            block[:, -1] = False
            mask[sl] = block.flatten(order="F")
        return mask

    def random_theta(self, rng, low=-1.0, high=1.0) -> np.ndarray:
        return rng.uniform(low, high, size=self.n_params)


def flatten(layers: Sequence[np.ndarray]) -> np.ndarray:
    """Stack column-major vectorisations of the layer matrices."""
    if not layers:
        return np.zeros(0)
    return np.concatenate([np.asarray(v, dtype=float).flatten(order="F") for v in layers])


def unflatten(theta: np.ndarray, model: DnnModel) -> list:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_params,):
        raise DimensionError(f"theta has shape {theta.shape}, model needs ({model.n_params},)")
    shapes, slices, _ = model._layout
    return [theta[sl].reshape(shape, order="F") for sl, shape in zip(slices, shapes)]


def _check_inputs(model, X, theta):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != model.input_dim:
        raise DimensionError(
            f"layer 0: input has shape {X.shape}, expected last dimension {model.input_dim}"
        )
    return X2, single, unflatten(theta, model)


def _forward_pass(model, X2, layers):
    """Return (output, activations, slopes) for a batch of inputs."""
    B, m = X2.shape
    phi = np.ones((B, m + 1))
    phi[:, :m] = X2
    phis, slopes = [phi], []
    z = phi @ layers[0]
    for j in range(1, len(layers)):
        a, da = model.activations[j - 1].value_and_slope(z[:, :-1])
        phi = np.ones_like(z)
        phi[:, :-1] = a
        slope = np.zeros_like(z)
        slope[:, :-1] = da
        phis.append(phi)
        slopes.append(slope)
        z = phi @ layers[j]
    return z, phis, slopes


def forward(model: DnnModel, x, theta) -> np.ndarray:
    """Evaluate the network at one input (shape ``(m,)``) or a batch ``(B, m)``."""
    X2, single, layers = _check_inputs(model, x, theta)
    out, _, _ = _forward_pass(model, X2, layers)
    return out[0] if single else out


def forward_and_jacobian(model: DnnModel, x, theta):
    """Output and parameter Jacobian, batched over leading input axis.

    The Jacobian block for layer ``j`` is ``S_j (I ⊗ phi_j^T)`` where ``S_j``
    is the right-to-left product of ``v_l^T phi_l'`` for ``l > j``; it is
    accumulated backwards from the output layer.
    """
    X2, single, layers = _check_inputs(model, x, theta)
    out, phis, slopes = _forward_pass(model, X2, layers)
    B, n = out.shape
    J = np.empty((B, n, model.n_params))
    S = np.broadcast_to(np.eye(n), (B, n, n))
    slices = model._layout[1]
    for j in range(len(layers) - 1, -1, -1):
        phi = phis[j]
        J[:, :, slices[j]] = (S[:, :, :, None] * phi[:, None, None, :]).reshape(B, n, -1)
        if j > 0:
            S = (S @ layers[j].T) * slopes[j - 1][:, None, :]
    if single:
        return out[0], J[0]
    return out, J


def jacobian(model: DnnModel, x, theta) -> np.ndarray:
    return forward_and_jacobian(model, x, theta)[1]


@dataclass(frozen=True)
class SearchSpace:
    """Closed ball ``||theta|| <= radius`` with a smoothing layer of width ``smoothing``."""

    radius: float
    smoothing: float | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        eps = 0.05 * self.radius if self.smoothing is None else float(self.smoothing)
        if not 0 < eps < self.radius:
            raise ValueError("smoothing must lie in (0, radius)")
        object.__setattr__(self, "smoothing", eps)

    @classmethod
    def for_model(cls, model: DnnModel, scale=10.0):
        return cls(scale * np.sqrt(model.n_params))


def smoothstep(s):
    """C1 ramp from 0 (s <= 0) to 1 (s >= 1)."""
    s = min(max(s, 0.0), 1.0)
    return s * s * (3.0 - 2.0 * s)


def project_rate(theta_hat, raw_rate, space: SearchSpace) -> np.ndarray:
    """Smooth ball projection of an adaptation rate.

    Inside ``||theta_hat|| <= radius - smoothing`` the rate passes unchanged.
    In the boundary layer the outward radial component is scaled by
    ``1 - c`` where ``c`` ramps from 0 to 1 across the layer.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    raw_rate = np.asarray(raw_rate, dtype=float)
    nrm2 = float(theta_hat @ theta_hat)
    nrm = np.sqrt(nrm2)
    if nrm > space.radius * (1.0 + 1e-9):
        raise ProjectionError(f"||theta_hat|| = {nrm:.6g} exceeds radius {space.radius:.6g}")
    inner = space.radius - space.smoothing
    if nrm <= inner:
        return raw_rate
    radial = float(theta_hat @ raw_rate)
    if radial <= 0.0:
        return raw_rate
    c = smoothstep((nrm - inner) / space.smoothing)
    return raw_rate - c * (radial / nrm2) * theta_hat


def clamp_to_ball(theta, space: SearchSpace) -> np.ndarray:
    """Radially pull an estimate back onto the ball after a finite step."""
    nrm = np.linalg.norm(theta)
    if nrm > space.radius:
        return theta * (space.radius / nrm)
    return theta


def projected_euler_step(theta_hat, raw_rate, space: SearchSpace, dt) -> np.ndarray:
    return clamp_to_ball(theta_hat + dt * project_rate(theta_hat, raw_rate, space), space)
