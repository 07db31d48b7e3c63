"""Closed-loop experiment harness for two-degree-of-freedom test plants."""
from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .control import (
    ControlEstimator, ControlLaw, LsGain, ObserverState, control_input, lyapunov_value,
    ls_gain_step, observer_step, tracking_errors,
)
from .dnn import ActivationKind, DnnModel, SearchSpace, clamp_to_ball, forward
from .history import HistoryStack, StackMode, StackSample, fe_diagnostic
from .monitors import fit_envelope


# --------------------------------------------------------------------------
# plants and references

def _sech2(z):
    return 1.0 / np.cosh(z) ** 2


def plant_f1(x, xd):
    x, xd = np.asarray(x, dtype=float), np.asarray(xd, dtype=float)
    x1, x2, v1, v2 = x[..., 0], x[..., 1], xd[..., 0], xd[..., 1]
    a = np.sin(x1 + x2) * np.cos(v1 - v2)
    b = np.cos(x1) * np.sin(x2) * np.cos(v1) * np.sin(v2)
    return np.stack([a + b, b - a * np.sin(x1)], axis=-1)


def plant_f2(x, xd):
    x, xd = np.asarray(x, dtype=float), np.asarray(xd, dtype=float)
    x1, x2, v1, v2 = x[..., 0], x[..., 1], xd[..., 0], xd[..., 1]
    return np.stack([x1 * v2 * np.tanh(x2) + _sech2(x1), _sech2(v1 + v2) - _sech2(x2)], axis=-1)


def plant_zero(x, xd):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Plant:
    """Unknown drift ``f(x, xd)`` of ``xdd = f + u``; batched over leading axes."""

    name: str
    f: Callable
    theta_star: np.ndarray | None = None

    def __call__(self, x, xd):
        return self.f(x, xd)


class _NetworkDrift:
    # picklable drift given by a fixed network
    def __init__(self, model, theta):
        self.model, self.theta = model, np.asarray(theta, dtype=float)

    def __call__(self, x, xd):
        X = np.concatenate([np.asarray(x, dtype=float), np.asarray(xd, dtype=float)], axis=-1)
        return forward(self.model, X, self.theta)


def network_plant(model: DnnModel, theta_star, name="network") -> Plant:
    """Plant whose drift is exactly representable by ``model``."""
    return Plant(name, _NetworkDrift(model, theta_star), np.asarray(theta_star, dtype=float))


PLANTS = {"f1": Plant("f1", plant_f1), "f2": Plant("f2", plant_f2), "zero": Plant("zero", plant_zero)}


class Trajectory(str, enum.Enum):
    CIRCULAR = "circular"
    SINUSOIDAL = "sinusoidal"


def reference(traj, t, amplitude=0.7, omega=np.pi / 4):
    """Desired position, velocity and acceleration at time ``t``."""
    traj = Trajectory(traj)
    s, c = np.sin(omega * t), np.cos(omega * t)
    w, w2 = omega, omega * omega
    if traj is Trajectory.CIRCULAR:
        return (amplitude * np.array([c, s]), amplitude * w * np.array([-s, c]),
                -amplitude * w2 * np.array([c, s]))
    scale = np.array([amplitude, omega])
    return scale * s, scale * w * c, -scale * w2 * s


# --------------------------------------------------------------------------
# configuration and results

@dataclass(frozen=True)
class ExperimentConfig:
    plant: str = "f1"
    trajectory: str = "circular"
    law: str = "cl1"
    seed: int = 0
    duration: float = 100.0
    dt: float = 0.01
    t_delta: float = 3.0
    stack_size: int = 200
    refresh_every: int = 5
    alpha1: float = 15.0
    alpha2: float = 50.0
    k1: float = 40.0
    k_delta: float = 20.0
    beta: float = 0.01
    gamma1: float = 0.12
    gamma2: float = 0.005
    gamma3: float = 0.001
    gamma0: float = 1.0
    eig_min_gate: float = 1e-3
    eig_max_gate: float = 1e3
    hidden_layers: int = 4
    neurons: int = 2
    activation: str = "tanh"
    init_low: float = -1.0
    init_high: float = 1.0
    radius_scale: float = 10.0
    x0: tuple = (1.0472, -0.5236)
    xd0: tuple = (0.0, 0.0)
    lambda_e: float = 1e-6
    delta_acc: float = 0.1
    offtraj_points: int = 100
    dither_phases: bool = False
    input_hold: str = "zoh"

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "xd0", tuple(float(v) for v in self.xd0))
        ControlLaw(self.law)
        Trajectory(self.trajectory)
        ActivationKind(self.activation)
        if self.input_hold not in ("zoh", "continuous"):
            raise ValueError(f"input_hold must be 'zoh' or 'continuous', got {self.input_hold!r}")
        if not (self.dt > 0 and self.duration > 0):
            raise ValueError("dt and duration must be positive")
        if self.hidden_layers < 1 or self.neurons < 1:
            raise ValueError("network needs at least one hidden layer and one neuron")

    def model(self, n=2) -> DnnModel:
        widths = (self.neurons + 1,) * self.hidden_layers + (n,)
        return DnnModel(2 * n, widths, ActivationKind(self.activation))

    def streams(self):
        """Independent generators for init weights, off-trajectory points and dither phases."""
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(3)]


SERIES_COLUMNS = ("t", "x1", "x2", "xd1", "xd2", "e1", "e2", "r1", "r2", "u1", "u2",
                  "r_tilde_norm", "delta_tilde_norm", "lambda_min_gamma", "lambda_min_gram", "V")


@dataclass
class RunResult:
    config: ExperimentConfig
    series: np.ndarray
    f_err: np.ndarray
    rms_e: float
    rms_u: float
    rms_fapprox: float
    rms_fapprox_offtraj: float
    fe_satisfied_ever: bool
    theta_hat: np.ndarray
    envelope: dict
    diverged: bool = False
    message: str = ""
    stack_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma_eig_range: tuple = (np.nan, np.nan)

    @property
    def seed(self):
        return self.config.seed

    def column(self, name):
        return self.series[:, SERIES_COLUMNS.index(name)]

    def metrics(self):
        c = self.config
        return {"plant": c.plant, "trajectory": c.trajectory, "law": c.law, "seed": c.seed,
                "rms_e": self.rms_e, "rms_u": self.rms_u, "rms_fapprox": self.rms_fapprox,
                "rms_fapprox_offtraj": self.rms_fapprox_offtraj,
                "fe_satisfied_ever": self.fe_satisfied_ever, "diverged": self.diverged,
                "envelope": self.envelope}

    def write_series(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SERIES_COLUMNS)
            for row in self.series:
                w.writerow([repr(float(v)) for v in row])

    def write_f_error(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "f_err_norm"])
            for t, v in zip(self.series[:, 0], self.f_err):
                w.writerow([repr(float(t)), repr(float(v))])


def offtraj_points(seed, count=100, n=2):
    """The fixed off-trajectory evaluation set for a seed."""
    rng = ExperimentConfig(seed=seed).streams()[1]
    return rng.uniform(-1.0, 1.0, size=(count, 2 * n))


def off_trajectory_eval(model: DnnModel, theta_hat, plant: Plant, seed, count=100) -> float:
    """RMS approximation error over the seeded off-trajectory point set."""
    P = offtraj_points(seed, count, model.output_dim)
    n = model.output_dim
    err = plant(P[:, :n], P[:, n:]) - forward(model, P, theta_hat)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def rk4_step(fun, t, y, h):
    """Classical fourth-order Runge-Kutta step of ``y' = fun(t, y)``."""
    k1 = fun(t, y)
    k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = fun(t + h, y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _rms(v):
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.mean(np.sum(v * v, axis=-1)))) if v.size else float("nan")


# --------------------------------------------------------------------------
# closed loop

def run_experiment(config: ExperimentConfig, plant: Plant | None = None, theta0=None) -> RunResult:
    """Simulate the closed loop for ``config`` and collect the metrics.

    ``plant`` overrides the named plant (for example a network-realisable
    drift); ``theta0`` overrides the seeded initial weights.
    """
    c = config
    plant = plant if plant is not None else PLANTS[c.plant]
    model = c.model()
    n = model.output_dim
    rng_init, _, rng_dither = c.streams()
    theta = rng_init.uniform(c.init_low, c.init_high, model.n_params) if theta0 is None \
        else np.array(theta0, dtype=float)
    phases = rng_dither.uniform(0.0, 10 * np.pi, model.n_params) if c.dither_phases else None
    space = SearchSpace.for_model(model, c.radius_scale)
    stack = HistoryStack(c.stack_size, c.refresh_every, StackMode.CONTROL, c.t_delta)
    ls = LsGain.identity(model.n_params, c.gamma0, beta=c.beta,
                         eig_min_gate=c.eig_min_gate, eig_max_gate=c.eig_max_gate)
    est = ControlEstimator(model, theta, c.gamma1, c.gamma2, c.gamma3, c.law, ls, space, stack, phases)
    mask = model.live_mask()
    P_off = offtraj_points(c.seed, c.offtraj_points, n)
    f_off = plant(P_off[:, :n], P_off[:, n:])
    theta_star = plant.theta_star

    dt = c.dt
    n_steps = int(round(c.duration / dt))
    x = np.array(c.x0, dtype=float)
    xd = np.array(c.xd0, dtype=float)

    def loop_terms(t, x_, xd_, th):
        xr, vr, ar = reference(c.trajectory, t)
        e, r = tracking_errors(x_, xd_, xr, vr, c.alpha1)
        e_dot = xd_ - vr
        X = np.concatenate([x_, xd_])
        u = control_input(model, th, e, e_dot, r, ar, X, c.k1, c.alpha1)
        return e, e_dot, r, X, u, -ar + c.alpha1 * e_dot

    rows = np.full((n_steps + 1, len(SERIES_COLUMNS)), np.nan)
    f_err = np.full(n_steps + 1, np.nan)
    off_err = np.full(n_steps + 1, np.nan)
    u_hist = np.full((n_steps + 1, n), np.nan)
    e, e_dot, r, X, u, feed = loop_terms(0.0, x, xd, est.theta_hat)
    obs = ObserverState.start(r, u, 0.0, alpha2=c.alpha2, k_delta=c.k_delta,
                              t_delta=c.t_delta, delta_acc=c.delta_acc)
    lam_gram = np.nan
    fe_ever = False
    last_refresh = -1
    gamma_lo, gamma_hi = np.inf, -np.inf
    diverged, message = False, ""
    k = 0
    for k in range(n_steps + 1):
        t = k * dt
        th = est.theta_hat
        if t >= c.t_delta:
            stack.record(StackSample(X.copy(), np.concatenate([u, obs.delta_hat]), t))
        f_true = plant(x, xd)
        f_hat = forward(model, X, th)
        f_err[k] = np.linalg.norm(f_true - f_hat)
        res_off = f_off - forward(model, P_off, th)
        off_err[k] = np.sqrt(np.mean(np.sum(res_off * res_off, axis=1)))
        g_lo, g_hi = ls.gamma_eigs()
        gamma_lo, gamma_hi = min(gamma_lo, g_lo), max(gamma_hi, g_hi)

        if len(stack):
            gram = est.stack_terms(th)[1]
            if stack.refresh_count != last_refresh:
                last_refresh = stack.refresh_count
                diag = fe_diagnostic(gram, c.lambda_e, mask)
                lam_gram = diag.lambda_min
                fe_ever = fe_ever or diag.satisfied
        else:
            gram = np.zeros((model.n_params, model.n_params))
        v = lyapunov_value(r, e, None if theta_star is None else theta_star - th, ls.gamma_inv)
        rows[k] = np.concatenate([[t], x, xd, e, r, u,
                                  [np.linalg.norm(obs.r_tilde),
                                   np.linalg.norm(f_true + u - obs.delta_hat), g_lo, lam_gram, v]])
        u_hist[k] = u
        if k == n_steps:
            break

        # joint RK4 for plant and weights; gain held over the step
        u_held = u

        def deriv(tau, state):
            x_, xd_, th_ = state[:n], state[n:2 * n], clamp_to_ball(state[2 * n:], space)
            e_, _, r_, X_, u_, _ = loop_terms(tau, x_, xd_, th_)
            uu = u_held if c.input_hold == "zoh" else u_
            acc = plant(x_, xd_) + uu
            return np.concatenate([xd_, acc, est.rate(r_, X_, tau, th_)])

        y = rk4_step(deriv, t, np.concatenate([x, xd, th]), dt)
        if not np.all(np.isfinite(y)) or np.linalg.norm(y[:2 * n]) > 1e6:
            diverged, message = True, f"state diverged at t={t + dt:.2f} s"
            break
        x, xd = y[:n], y[n:2 * n]
        est.theta_hat = clamp_to_ball(y[2 * n:], space)
        ls = ls_gain_step(ls, gram, est.gamma1, dt)
        est.refresh_gain(ls)

        r_prev, feed_prev, u_prev = r, feed, u
        e, e_dot, r, X, u, feed = loop_terms(t + dt, x, xd, est.theta_hat)
        obs = observer_step(obs, r_prev, r, feed_prev, feed, u_prev, u, dt)

    rows = rows[: k + 1]
    f_err = f_err[: k + 1]
    env = fit_envelope(rows[:, 0], rows[:, -1]).as_dict() if k > 0 else {}
    return RunResult(
        config=c, series=rows, f_err=f_err,
        rms_e=_rms(rows[:, 5:7]), rms_u=_rms(u_hist[: k + 1]),
        rms_fapprox=float(np.sqrt(np.mean(f_err ** 2))),
        rms_fapprox_offtraj=float(np.sqrt(np.mean(off_err[: k + 1] ** 2))),
        fe_satisfied_ever=bool(fe_ever), theta_hat=est.theta_hat.copy(), envelope=env,
        diverged=diverged, message=message, stack_times=stack.arrays()[2].copy(),
        gamma_eig_range=(float(gamma_lo), float(gamma_hi)),
    )


# --------------------------------------------------------------------------
# comparison tables

TABLE_METRICS = ("rms_e", "rms_u", "rms_fapprox", "rms_fapprox_offtraj")


def improvement_pct(baseline, value):
    return 100.0 * (baseline - value) / baseline


@dataclass
class Comparison:
    plant: str
    trajectory: str
    seed: int
    values: dict
    improvement: dict

    def as_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write_csv(self, path):
        laws = list(self.values)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric"] + laws + [f"{l}_improvement_pct" for l in laws if l != "baseline"])
            for m in TABLE_METRICS:
                w.writerow([m] + [repr(float(self.values[l][m])) for l in laws]
                           + [repr(float(self.improvement[l][m])) for l in laws if l != "baseline"])


def compare_table(results: dict) -> Comparison:
    """Tabulate metrics per law with improvement over the baseline entry.

    ``results`` maps law names to objects carrying the four metrics (a
    ``RunResult`` or a plain mapping with ``seed``).
    """
    def get(obj, key):
        return obj[key] if isinstance(obj, dict) else getattr(obj, key)

    if "baseline" not in results:
        raise KeyError("comparison needs a baseline result")
    seeds = {int(get(r, "seed")) for r in results.values()}
    if len(seeds) != 1:
        raise ValueError(f"results come from different seeds: {sorted(seeds)}")
    base = results["baseline"]
    meta = base.metrics() if hasattr(base, "metrics") else base
    values = {law: {m: float(get(r, m)) for m in TABLE_METRICS} for law, r in results.items()}
    improvement = {law: {m: improvement_pct(values["baseline"][m], values[law][m]) for m in TABLE_METRICS}
                   for law in results if law != "baseline"}
    return Comparison(meta.get("plant", ""), meta.get("trajectory", ""), seeds.pop(), values, improvement)


def format_table(cmp: Comparison) -> str:
    """Human-readable table rounded to four significant digits."""
    laws = list(cmp.values)
    lines = [f"{cmp.plant} / {cmp.trajectory} (seed {cmp.seed})",
             "metric".ljust(22) + "".join(l.rjust(12) for l in laws)]
    for m in TABLE_METRICS:
        lines.append(m.ljust(22) + "".join(f"{cmp.values[l][m]:12.4g}" for l in laws))
        lines.append("  improvement %".ljust(22) + "".join(
            ("-" if l == "baseline" else f"{cmp.improvement[l][m]:.4g}").rjust(12) for l in laws))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# grid

GRID_PLANTS = ("f1", "f2")
GRID_TRAJECTORIES = ("circular", "sinusoidal")
GRID_LAWS = ("baseline", "cl1", "cl2")


def grid_configs(base: ExperimentConfig):
    return [replace(base, plant=p, trajectory=tr, law=l)
            for p in GRID_PLANTS for tr in GRID_TRAJECTORIES for l in GRID_LAWS]


def run_grid(base: ExperimentConfig, workers=1) -> list:
    configs = grid_configs(base)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_experiment, configs))
    return [run_experiment(cfg) for cfg in configs]


def grid_summary(results) -> list:
    """Per-run records with the approximation improvement over the matching baseline."""
    base = {(r.config.plant, r.config.trajectory): r for r in results if r.config.law == "baseline"}
    out = []
    for r in results:
        rec = r.metrics()
        b = base.get((r.config.plant, r.config.trajectory))
        if b is None or r.config.law == "baseline":
            rec["improvement_pct"] = None
        else:
            rec["improvement_pct"] = {m: improvement_pct(getattr(b, m), getattr(r, m)) for m in TABLE_METRICS}
        out.append(rec)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(records) -> str:
    return json.dumps(_jsonable(records), indent=2, sort_keys=True)
