import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cldnn.sim import (
    SERIES_COLUMNS, ExperimentConfig, Plant, compare_table, dumps, format_table, grid_configs,
    grid_summary, improvement_pct, network_plant, off_trajectory_eval, offtraj_points, plant_f1,
    plant_f2, plant_zero, reference, rk4_step, run_experiment, run_grid,
)


# ---------------------------------------------------------------- references and plants

def test_circular_reference_at_zero():
    x, v, a = reference("circular", 0.0)
    w = math.pi / 4
    assert np.allclose(x, [0.7, 0.0]) and np.allclose(v, [0.0, 0.7 * w]) and np.allclose(a, [-0.7 * w * w, 0.0])


def test_circular_reference_at_two_seconds():
    assert np.allclose(reference("circular", 2.0)[0], [0.0, 0.7], atol=1e-15)


def test_sinusoidal_reference():
    assert not np.any(reference("sinusoidal", 0.0)[0])
    x, _, _ = reference("sinusoidal", 2.0)
    assert np.allclose(x, [0.7, math.pi / 4])


@pytest.mark.parametrize("traj", ["circular", "sinusoidal"])
def test_reference_derivatives(traj):
    h = 1e-5
    for t in (0.3, 4.1, 17.0):
        x0, v0, a0 = reference(traj, t)
        xp, vp, _ = reference(traj, t + h)
        xm, vm, _ = reference(traj, t - h)
        assert np.allclose((xp - xm) / (2 * h), v0, atol=1e-9)
        assert np.allclose((vp - vm) / (2 * h), a0, atol=1e-9)


def test_plants_at_origin():
    assert np.array_equal(plant_f1(np.zeros(2), np.zeros(2)), [0.0, 0.0])
    assert np.array_equal(plant_f2(np.zeros(2), np.zeros(2)), [1.0, 0.0])


def f1_typed(x1, x2, v1, v2):
    s = math.sin(x1 + x2) * math.cos(v1 - v2)
    p = math.cos(x1) * math.sin(x2) * math.cos(v1) * math.sin(v2)
    return [s + p, p - s * math.sin(x1)]


def f2_typed(x1, x2, v1, v2):
    sech2 = lambda z: (2.0 / (math.exp(z) + math.exp(-z))) ** 2
    return [x1 * v2 * math.tanh(x2) + sech2(x1), sech2(v1 + v2) - sech2(x2)]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_plants_match_independent_transcription(q):
    x, xd = np.array(q[:2]), np.array(q[2:])
    assert np.allclose(plant_f1(x, xd), f1_typed(*q), atol=1e-13)
    assert np.allclose(plant_f2(x, xd), f2_typed(*q), atol=1e-13)


def test_plants_batched():
    rng = np.random.default_rng(0)
    P = rng.uniform(-1, 1, (7, 4))
    for f in (plant_f1, plant_f2):
        batch = f(P[:, :2], P[:, 2:])
        assert batch.shape == (7, 2)
        assert np.allclose(batch[3], f(P[3, :2], P[3, 2:]))


def test_energy_sanity():
    # free double integrator: velocity unchanged, position advances linearly
    rhs = lambda t, y: np.concatenate([y[2:], plant_zero(y[:2], y[2:]) + 0.0])
    y = np.array([0.3, -1.2, 0.7, -0.25])
    for k in range(500):
        nxt = rk4_step(rhs, 0.01 * k, y, 0.01)
        assert np.max(np.abs(nxt[2:] - y[2:])) <= 1e-12
        y = nxt
    assert np.allclose(y[:2], [0.3 + 5 * 0.7, -1.2 - 5 * 0.25], atol=1e-12)


def test_rk4_exact_on_cubic():
    y = rk4_step(lambda t, y: np.array([3 * t * t]), 1.0, np.array([1.0]), 0.5)
    assert y[0] == pytest.approx(1.5 ** 3, abs=1e-14)


# ---------------------------------------------------------------- configuration

def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(law="cl3")
    with pytest.raises(ValueError):
        ExperimentConfig(trajectory="square")
    with pytest.raises(ValueError):
        ExperimentConfig(dt=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(input_hold="foh")


def test_default_network_size():
    m = ExperimentConfig().model()
    assert m.input_dim == 4 and m.layer_widths == (3, 3, 3, 3, 2) and m.n_params == 48


def test_seed_streams_independent():
    a = [g.random(3) for g in ExperimentConfig(seed=5).streams()]
    b = [g.random(3) for g in ExperimentConfig(seed=5).streams()]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.allclose(a[0], a[1])


# ---------------------------------------------------------------- off-trajectory evaluation

def test_offtraj_zero_weights_gives_rms_of_plant():
    m = ExperimentConfig().model()
    P = offtraj_points(3)
    assert P.shape == (100, 4) and np.all(np.abs(P) <= 1)
    ref = math.sqrt(sum(sum(v * v for v in f1_typed(*p)) for p in P) / len(P))
    assert off_trajectory_eval(m, np.zeros(m.n_params), Plant("f1", plant_f1), 3) == pytest.approx(ref, rel=1e-12)


def test_offtraj_realisable_plant_is_zero():
    m = ExperimentConfig().model()
    star = np.random.default_rng(1).uniform(-1, 1, m.n_params)
    assert off_trajectory_eval(m, star, network_plant(m, star), 0) == 0.0


# ---------------------------------------------------------------- tables

def fake(seed=0, **vals):
    base = dict(seed=seed, plant="f1", trajectory="circular", rms_e=1.0, rms_u=1.0, rms_fapprox=1.0,
                rms_fapprox_offtraj=1.0)
    base.update(vals)
    return base


def test_improvement_arithmetic():
    assert improvement_pct(2.0, 1.0) == 50.0
    assert round(improvement_pct(1.562, 0.4121), 2) == 73.62


def test_compare_identical_is_zero():
    cmp = compare_table({"baseline": fake(), "cl1": fake()})
    assert all(v == 0.0 for v in cmp.improvement["cl1"].values())


def test_compare_table_values_and_outputs(tmp_path):
    cmp = compare_table({"baseline": fake(rms_fapprox=1.562, rms_fapprox_offtraj=2.0),
                         "cl1": fake(rms_fapprox=0.4121, rms_fapprox_offtraj=1.0)})
    assert round(cmp.improvement["cl1"]["rms_fapprox"], 2) == 73.62
    assert cmp.improvement["cl1"]["rms_fapprox_offtraj"] == 50.0
    path = tmp_path / "t.csv"
    cmp.write_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "metric,baseline,cl1,cl1_improvement_pct"
    assert [r.split(",")[0] for r in rows[1:]] == ["rms_e", "rms_u", "rms_fapprox", "rms_fapprox_offtraj"]
    assert json.loads(cmp.as_json())["improvement"]["cl1"]["rms_fapprox_offtraj"] == 50.0
    assert "73.62" in format_table(cmp)


def test_compare_mismatched_seeds():
    with pytest.raises(ValueError):
        compare_table({"baseline": fake(0), "cl1": fake(1)})
    with pytest.raises(KeyError):
        compare_table({"cl1": fake(0)})


def test_dumps_sorted_and_finite():
    text = dumps([{"b": np.float64(1.5), "a": np.int64(2), "c": float("nan"), "d": np.bool_(True)}])
    assert json.loads(text) == [{"a": 2, "b": 1.5, "c": "nan", "d": True}]
    assert text.index('"a"') < text.index('"b"')


# ---------------------------------------------------------------- closed loop (short runs)

SHORT = dict(duration=4.0, t_delta=1.0)


def test_series_layout_and_csv(tmp_path):
    r = run_experiment(ExperimentConfig(law="cl1", **SHORT))
    assert r.series.shape == (401, len(SERIES_COLUMNS))
    assert np.allclose(r.column("t"), np.arange(401) * 0.01)
    # r column equals e_dot + alpha1 e recomputed from the raw state
    xr = np.array([reference("circular", t)[0] for t in r.column("t")])
    vr = np.array([reference("circular", t)[1] for t in r.column("t")])
    e = r.series[:, 1:3] - xr
    assert np.allclose(r.series[:, 5:7], e, atol=1e-15)
    assert np.allclose(r.series[:, 7:9], r.series[:, 3:5] - vr + 15.0 * e, atol=1e-13)
    r.write_series(tmp_path / "s.csv")
    r.write_f_error(tmp_path / "f.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(SERIES_COLUMNS)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "t,f_err_norm"
    assert np.all(r.stack_times >= 1.0)
    assert r.stack_times.size == 200


def test_determinism_short():
    c = ExperimentConfig(law="cl2", **SHORT)
    a, b = run_experiment(c), run_experiment(c)
    assert dumps(a.metrics()) == dumps(b.metrics())
    assert np.array_equal(a.series, b.series, equal_nan=True)


def test_dither_phase_option_isolated_from_offtraj_points():
    a = run_experiment(ExperimentConfig(law="baseline", **SHORT))
    b = run_experiment(ExperimentConfig(law="baseline", dither_phases=True, **SHORT))
    assert not np.array_equal(a.column("u1"), b.column("u1"))
    assert np.array_equal(a.column("u1")[0], b.column("u1")[0])
    m = a.config.model()
    th = a.theta_hat
    assert off_trajectory_eval(m, th, Plant("f1", plant_f1), a.seed) == \
        off_trajectory_eval(m, th, Plant("f1", plant_f1), b.seed)


def test_divergence_is_flagged():
    boom = Plant("boom", lambda x, xd: 1e4 * np.asarray(x, dtype=float))
    r = run_experiment(ExperimentConfig(law="baseline", duration=2.0), plant=boom)
    assert r.diverged and "diverged" in r.message
    assert r.series.shape[0] < 201


def test_zero_plant_exact_tracking():
    # the state starts on the reference and the input is applied without hold
    xr, vr, _ = reference("circular", 0.0)
    c = ExperimentConfig(plant="zero", law="baseline", gamma3=0.0, x0=tuple(xr), xd0=tuple(vr),
                         duration=20.0, input_hold="continuous")
    r = run_experiment(c, theta0=np.zeros(c.model().n_params))
    assert r.rms_e < 1e-6


def test_realisable_plant_initial_error_matches_forward():
    c = ExperimentConfig(law="cl1", duration=0.05)
    m = c.model()
    star = np.random.default_rng(2).uniform(-1, 1, m.n_params)
    r = run_experiment(c, plant=network_plant(m, star), theta0=star)
    assert r.f_err[0] == 0.0
    assert r.column("V")[0] == pytest.approx(0.5 * np.sum(r.series[0, 7:9] ** 2) + 0.5 * np.sum(r.series[0, 5:7] ** 2))


def test_grid_shape_and_summary():
    base = ExperimentConfig(duration=0.2, t_delta=0.05)
    assert len(grid_configs(base)) == 12
    serial = run_grid(base)
    parallel = run_grid(base, workers=2)
    assert dumps(grid_summary(serial)) == dumps(grid_summary(parallel))
    recs = grid_summary(serial)
    for rec in recs:
        assert (rec["improvement_pct"] is None) == (rec["law"] == "baseline")
