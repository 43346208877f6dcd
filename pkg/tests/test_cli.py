import json
import math

import numpy as np
import pytest

from deaforge import cli
from deaforge.config import load_campaign
from deaforge.sim import DivergenceError

NO_PLOTS = ["--set", "simulation.plots=false"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(autouse=True)
def fixed_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")


@pytest.fixture(scope="module")
def k013_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("k013")
    assert cli.main(["synth", "linear_k013", "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------- synth


def test_synth_writes_finite_gamma(k013_result):
    doc = read(k013_result / "synthesis.json")
    assert math.isfinite(doc["result"]["gamma"])
    assert doc["campaign"] == "linear_k013" and len(doc["config_hash"]) == 64
    assert doc["config"]["spec"]["k_star"] == [0.013]
    lines = (k013_result / "margins.csv").read_text().splitlines()
    assert lines[0] == "y_mm,margin,closed_loop_max_real_per_s" and len(lines) == 102


def test_tiny_lambda_exits_infeasible(tmp_path, capsys):
    assert run("synth", "linear_k013", "--out", tmp_path, "--set", "synthesis.lambda=1e-9") == 2
    doc = read(tmp_path / "synthesis_infeasible.json")
    assert doc["status"] == "infeasible" and doc["hints"]
    assert "hint:" in capsys.readouterr().err


def test_synth_is_deterministic(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", "linear_k013", "--out", a) == 0
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1000")
    assert run("synth", "linear_k013", "--out", b) == 0
    da, db = read(a / "synthesis.json"), read(b / "synthesis.json")
    assert da.pop("created") != db.pop("created")
    assert da == db
    assert (a / "margins.csv").read_bytes() == (b / "margins.csv").read_bytes()


def test_list_and_usage_errors(tmp_path, capsys):
    assert run("list") == 0
    assert "msd_d07" in capsys.readouterr().out.split()
    assert run() == 1
    assert run("synth", "no_such_campaign", "--out", tmp_path) == 1
    assert run("synth", "linear_k013", "--out", tmp_path, "--set", "synthesis.bogus=1") == 1
    assert run("sim", "linear_k013", "--out", tmp_path, "--set", "simulation.skip=50") == 1


# ---------------------------------------------------------------- sim and verify


def test_missing_result_exits_usage(tmp_path, capsys):
    assert run("sim", "linear_k013", "--out", tmp_path) == 1
    assert "synthesis result not found" in capsys.readouterr().err
    assert run("verify", "linear_k013", "--out", tmp_path, "--result", tmp_path / "nope.json") == 1


def test_verify_accepts_and_rejects(k013_result, tmp_path):
    rp = k013_result / "synthesis.json"
    assert run("verify", "linear_k013", "--out", tmp_path, "--result", rp) == 0
    assert read(tmp_path / "verify.json")["verify"]["passed"] is True
    doc = read(rp)
    doc["result"]["P2"] = (-np.asarray(doc["result"]["P2"])).tolist()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("verify", "linear_k013", "--out", tmp_path, "--result", bad) == 2


def test_sine_campaign_l2_ratio_within_lambda(k013_result, tmp_path):
    rp = k013_result / "synthesis.json"
    assert run("sim", "linear_k013", "--out", tmp_path, "--result", rp, *NO_PLOTS) == 0
    m = read(tmp_path / "metrics.json")["metrics"]
    lam = read(rp)["config"]["synthesis"]["lambda"]
    assert m["l2_ratio"] <= lam
    for key in ("steady_state_error_mm", "max_abs_e_i_mm", "settling_time_s"):
        assert key in m
    header = (tmp_path / "trajectory.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t_s" and "y_mm" in header and "f_N" in header and "u_kV2" in header


def test_divergence_exits_three(k013_result, tmp_path, monkeypatch, capsys):
    def blow_up(*args, **kwargs):
        raise DivergenceError("state blew up at t = 0.5 s", 0.5, {"row": [0.5, 1.0]})

    monkeypatch.setattr(cli, "simulate", blow_up)
    rp = k013_result / "synthesis.json"
    assert run("sim", "linear_k013", "--out", tmp_path, "--result", rp, *NO_PLOTS) == 3
    doc = read(tmp_path / "sim_divergence.json")
    assert doc["t"] == 0.5 and doc["last"] == {"row": [0.5, 1.0]}
    assert "last sample" in capsys.readouterr().err


def test_msd_step_overshoot_matches_oracle(tmp_path):
    assert run("all", "msd_d07", "--out", tmp_path, *NO_PLOTS) == 0
    m = read(tmp_path / "metrics.json")["metrics"]
    oracle = math.exp(-math.pi * 0.7 / math.sqrt(1 - 0.7**2))
    assert m["overshoot_y_star"] == pytest.approx(oracle, abs=1e-3)
    assert abs(m["overshoot_y"] - oracle) <= 0.05


# ---------------------------------------------------------------- sense


def test_sense_constant_parameters(tmp_path):
    assert run("sense", "selfsense_baseline", "--out", tmp_path, "--set", "selfsense.closed_loop.enabled=false", *NO_PLOTS) == 0
    m = read(tmp_path / "selfsense.json")["metrics"]["open_loop"]
    assert m["convergence_time_s"] < 0.5
    assert m["final_rel_error_R"] < 0.01 and m["final_rel_error_C"] < 0.01
    assert m["unreliable"] is False
    assert (tmp_path / "estimator_trace.csv").is_file()


def test_sense_zero_amplitude_flags_unreliable(tmp_path, capsys):
    argv = ["sense", "selfsense_baseline", "--out", tmp_path, "--set", "selfsense.amp=0"]
    assert run(*argv, "--set", "selfsense.closed_loop.enabled=false", *NO_PLOTS) == 0
    m = read(tmp_path / "selfsense.json")["metrics"]
    assert m["open_loop"]["unreliable"] is True
    assert any("excitation" in w for w in m["warnings"])
    assert "warning" in capsys.readouterr().err


def test_closed_loop_selfsense_within_twice_baseline(tmp_path):
    assert run("all", "selfsense_baseline", "--out", tmp_path, *NO_PLOTS) == 0
    cl = read(tmp_path / "selfsense.json")["metrics"]["closed_loop"]
    assert cl["steady_state_error_selfsensed_mm"] < 2 * cl["steady_state_error_baseline_mm"]
    assert cl["within_2x_baseline"] is True
    assert "selfsense.json" in read(tmp_path / "report.json")["artifacts"]


def test_shipped_campaigns_load():
    for name in ("linear_k013", "linear_k020", "softening", "stiffening", "msd_d10", "msd_d07", "msd_d04", "selfsense_baseline"):
        camp = load_campaign(name)
        assert camp.name == name and camp.problem() is not None
