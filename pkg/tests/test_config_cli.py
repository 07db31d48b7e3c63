import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from cldnn import config as cfgio
from cldnn.cli import main
from cldnn.sim import ExperimentConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


# ---------------------------------------------------------------- config files

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["f1", "f2", "zero"]), st.sampled_from(["circular", "sinusoidal"]),
       st.sampled_from(["baseline", "cl1", "cl2"]), st.integers(0, 10**6),
       st.floats(1e-4, 1.0), st.floats(-5, 5), st.booleans())
def test_round_trip(plant, traj, law, seed, gamma1, x0, phases):
    c = ExperimentConfig(plant=plant, trajectory=traj, law=law, seed=seed, gamma1=gamma1,
                         x0=(x0, -x0), dither_phases=phases)
    assert cfgio.loads(cfgio.dumps(c)) == c


def test_shipped_config_matches_defaults():
    assert cfgio.load(CONFIGS / "default.ini") == ExperimentConfig()


def test_missing_required_field():
    with pytest.raises(cfgio.ConfigError, match="plant"):
        cfgio.loads("[experiment]\ntrajectory = circular\nlaw = cl1\n")


@pytest.mark.parametrize("text", [
    "[experiment]\nplant = f1\ntrajectory = circular\nlaw = cl1\nwobble = 3\n",
    "[experiment]\nplant = f1\ntrajectory = circular\nlaw = cl1\nseed = many\n",
    "[experiment]\nplant = f1\ntrajectory = circular\nlaw = nope\n",
    "[other]\nplant = f1\n",
    "plant = f1\n",
])
def test_bad_configs(text):
    with pytest.raises(cfgio.ConfigError):
        cfgio.loads(text)


# ---------------------------------------------------------------- CLI

def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_run_missing_plant_exit_code(tmp_path, capsys):
    path = write(tmp_path, "c.ini", "[experiment]\ntrajectory = circular\nlaw = cl1\n")
    assert main(["run", "--config", path, "--out", str(tmp_path)]) == 2
    assert "plant" in capsys.readouterr().err


def test_seed_precedence(tmp_path, capsys, monkeypatch):
    path = write(tmp_path, "c.ini", "[experiment]\nplant = f2\ntrajectory = circular\nlaw = cl2\nseed = 7\n")

    def seed_of(args):
        assert main(args) == 0
        return cfgio.loads(capsys.readouterr().out).seed

    monkeypatch.delenv("CLDNN_SEED", raising=False)
    assert seed_of(["run", "--config", path, "--dump-config"]) == 7
    monkeypatch.setenv("CLDNN_SEED", "11")
    assert seed_of(["run", "--config", path, "--dump-config"]) == 11
    assert seed_of(["run", "--config", path, "--dump-config", "--seed", "3"]) == 3
    monkeypatch.setenv("CLDNN_SEED", "x")
    assert main(["run", "--config", path, "--dump-config"]) == 2


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "res"
    code = main(["run", "--plant", "f2", "--traj", "sinusoidal", "--law", "baseline", "--seed", "4",
                 "--duration", "0.5", "--out", str(out)])
    assert code == 0
    stem = "f2_sinusoidal_baseline_seed4"
    series = (out / f"{stem}.csv").read_text().splitlines()
    assert series[0].startswith("t,x1,x2,xd1,xd2,e1,e2,r1,r2,u1,u2,")
    assert len(series) == 52
    rec = json.loads((out / f"{stem}.json").read_text())
    assert rec["seed"] == 4 and rec["plant"] == "f2"
    assert (out / f"{stem}_ferr.csv").exists()
    assert "rms_e=" in capsys.readouterr().out


def test_run_divergence_exit_code(tmp_path, capsys):
    # a step far beyond the RK4 stability limit of the closed loop
    code = main(["run", "--law", "baseline", "--dt", "0.5", "--duration", "100", "--out", str(tmp_path)])
    assert code == 1
    assert "diverged" in capsys.readouterr().err


def test_diagnose_settling(capsys):
    assert main(["diagnose", "settling", "--k-delta", "20", "--lam1", "20", "--z0", "1",
                 "--delta-f", "1", "--delta-acc", "0.1"]) == 0
    out = capsys.readouterr().out
    assert "0.2445" in out


def test_diagnose_settling_infeasible(capsys):
    assert main(["diagnose", "settling", "--k-delta", "2", "--lam1", "2", "--z0", "1",
                 "--delta-f", "1", "--delta-acc", "0.5"]) == 1
    assert "infeasible: k_delta*Lambda1 <= delta_f^2/delta_Delta^2" in capsys.readouterr().out


def test_diagnose_identifiability(tmp_path, capsys):
    pts = write(tmp_path, "p.csv", "# x0,x1\n0,0\n1,0\n0,1\n")
    assert main(["diagnose", "identifiability", "--points", pts, "--widths", "2"]) == 0
    assert "identifiable: true" in capsys.readouterr().out
    assert main(["diagnose", "identifiability", "--points", pts, "--widths", "3,3,2"]) == 0
    assert "identifiable: false" in capsys.readouterr().out


def fake_record(law, seed=0, value=1.0):
    return {"plant": "f1", "trajectory": "circular", "law": law, "seed": seed, "rms_e": 0.01,
            "rms_u": 4.0, "rms_fapprox": value, "rms_fapprox_offtraj": value}


def test_table_without_baseline(tmp_path, capsys):
    (tmp_path / "a.json").write_text(json.dumps(fake_record("cl1")))
    assert main(["table", str(tmp_path)]) == 2
    assert "baseline" in capsys.readouterr().err


def test_table_from_summary(tmp_path, capsys):
    recs = [fake_record("baseline", value=2.0), fake_record("cl1", value=1.0)]
    (tmp_path / "summary.json").write_text(json.dumps(recs))
    assert main(["table", str(tmp_path)]) == 0
    table = json.loads((tmp_path / "table_f1_circular_seed0.json").read_text())
    assert table["improvement"]["cl1"]["rms_fapprox"] == 50.0
    assert "improvement" in capsys.readouterr().out


def test_table_empty_dir(tmp_path):
    assert main(["table", str(tmp_path)]) == 2


def test_regress_short(tmp_path, capsys):
    assert main(["regress", "--law", "cl1", "--duration", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "regress_cl1_seed0.csv").read_text().splitlines()
    assert lines[0] == "t,y_err_norm,theta_err_norm,lambda_min_gram"
    assert "theta error" in capsys.readouterr().out


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--law", "cl9"])
    assert exc.value.code == 2
