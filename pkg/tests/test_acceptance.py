"""Exit criteria.  Each test is one criterion; a summary line per criterion is
printed at the end of the run (see ``conftest.py``)."""

import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from deaforge import cli
from deaforge.plant import find_equilibria, static_characteristic, voltage_for_target
from deaforge.selfsense import default_capacitance_map, run_estimator
from deaforge.sim import SimConfig, empirical_l2_ratio, make_signal, settling_time, simulate, step_overshoot
from deaforge.synthesis import synthesize, verify_bmi

from conftest import msd_design, static_design
from test_synthesis import _prop1_trial, scalar_problem, substitution_error

pytestmark = pytest.mark.acceptance


class Clock:
    def __init__(self, limit):
        self.limit, self.t0 = limit, time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.t0
        assert elapsed < self.limit, f"runtime {elapsed:.1f} s exceeds {self.limit} s"


def test_criterion_1(plant, rng):
    """substitution identity at 100 draws, error < 1e-12"""
    clock = Clock(1.0)
    problems = [static_design(plant, 0.2)[2], msd_design(plant, 0.7)[2]]
    worst = 0.0
    for k, y in enumerate(rng.uniform(plant.y_min, plant.y_max, 100)):
        err, size = substitution_error(problems[k % 2], y, rng)
        worst = max(worst, err / max(1.0, size))
    clock.check()
    assert worst < 1e-12


def test_criterion_2(rng):
    """norm-bound inequality implies ||Y P1^-1 W|| < gamma, zero violations"""
    clock = Clock(10.0)
    hits = violations = 0
    for _ in range(1000):
        feas, norm, gamma = _prop1_trial(rng, int(rng.integers(1, 5)))
        if feas:
            hits += 1
            violations += not norm < gamma
    clock.check()
    assert hits > 0 and violations == 0


def test_criterion_3():
    """scalar oracle: K > 1.5, 1/(K-1) <= 2, certificate verified"""
    clock = Clock(5.0)
    problem = scalar_problem(lam=2.0)
    res = synthesize(problem)
    K = float(res.K[0, 0])
    assert K > 1.5 and 1.0 / (K - 1.0) <= 2.0
    assert verify_bmi(problem, res).passed
    clock.check()


def test_criterion_4(plant):
    """reference static designs: feasible, stable, settle < 1 s, locus within 2% stroke"""
    clock = Clock(120.0)
    cases = {0.013: (0.01, 0.012, 0.005), 0.2: (0.05, 0.08, 0.08)}  # step force, sine amplitude, sine offset
    for k, (f_step, amp, off) in cases.items():
        spec, filt, problem = static_design(plant, k)
        assert problem.lam == 1.0 and np.array_equal(problem.W, np.eye(problem.n_m))
        res = synthesize(problem)
        assert len(res.closed_loop_max_real) == 101 and max(res.closed_loop_max_real) < 0
        step = simulate(plant, spec, filt, res.K, make_signal("step", {"time": 0.1, "after": f_step}), SimConfig(2.0), x0="equilibrium")
        assert settling_time(step, 1e-3, start=0.1) < 1.0
        sine = make_signal("sine", {"amplitude": amp, "frequency": 0.1, "offset": off})
        traj = simulate(plant, spec, filt, res.K, sine, SimConfig(20.0), x0="equilibrium")
        sel = traj.t >= 10.0
        line = spec.y0_star - traj.f[sel] / k
        assert np.max(np.abs(traj.y[sel] - line)) < 0.02 * plant.stroke
    clock.check()


def test_criterion_5(plant):
    """empirical L2 ratio <= lambda (+1%) for 10 seeded band-limited forces"""
    clock = Clock(60.0)
    spec, filt, problem = static_design(plant, 0.013)
    res = synthesize(problem)
    ratios = []
    for seed in range(10):
        sig = make_signal("band_limited_noise", {"rms": 0.005, "cutoff": 2.0, "duration": 10.0, "seed": seed})
        traj = simulate(plant, spec, filt, res.K, sig, SimConfig(10.0), x0="equilibrium")
        assert np.all(traj.u == traj.u_raw)  # certificate assumes no saturation
        ratios.append(empirical_l2_ratio(traj))
    clock.check()
    assert max(ratios) <= problem.lam * 1.01, ratios


def msd_oracle(t, k, tau, delta, y0, t_step, f_after):
    """Independent integration of the mass-spring-damper target under a force step."""
    m, b = k * tau**2, 2 * delta * k * tau
    sol = solve_ivp(
        lambda _, x: [x[1], (-f_after - b * x[1] - k * (x[0] - y0)) / m],
        (t_step, t[-1]),
        [y0, 0.0],
        rtol=1e-10,
        atol=1e-12,
        dense_output=True,
    )
    y = np.full_like(t, y0)
    after = t >= t_step
    y[after] = sol.sol(t[after])[0]
    return y


def test_criterion_6(plant):
    """msd profiles track the integrated target within 5% stroke; delta=0.4 overshoot within 5 points of 25.4%"""
    clock = Clock(120.0)
    k, tau, t_step, f_after = 0.1, 2.0, 1.0, 0.1
    worst, overshoot = {}, None
    for delta in (1.0, 0.7, 0.4):
        spec, filt, problem = msd_design(plant, delta, k=k, tau=tau, omega_s=1.5)
        res = synthesize(problem)
        sig = make_signal("step", {"time": t_step, "after": f_after})
        traj = simulate(plant, spec, filt, res.K, sig, SimConfig(30.0), x0="equilibrium")
        oracle = msd_oracle(traj.t, k, tau, delta, spec.y0_star, t_step, f_after)
        keep = np.abs(traj.t - t_step) > 0.1
        worst[delta] = float(np.max(np.abs(traj.y - oracle)[keep]) / plant.stroke)
        if delta == 0.4:
            y_end = spec.y0_star - f_after / k
            overshoot = step_overshoot(traj.t, traj.y, t_step + 0.1, spec.y0_star, y_end)
    clock.check()
    analytic = math.exp(-math.pi * 0.4 / math.sqrt(1 - 0.4**2))
    print(f"msd tracking error / stroke: {worst}; delta=0.4 overshoot {overshoot:.3f} vs {analytic:.3f}")
    assert max(worst.values()) < 0.05, worst
    assert abs(overshoot - analytic) <= 0.05


def test_criterion_7(plant):
    """open-loop-unstable rest point held by the k*=0.013 design"""
    clock = Clock(60.0)
    ys = np.linspace(plant.y_min, plant.y_max, 4001)
    f0 = np.array([static_characteristic(plant, y, 0.0) for y in ys])
    half = len(ys) // 2
    f = 0.5 * (f0[:half].min() + f0[half:].max())
    eqs = find_equilibria(plant, 0.0, f)
    assert [e.stability for e in eqs] == ["stable", "unstable", "stable"]

    y_cmd = 2.3
    assert eqs[0].y_eq < y_cmd < eqs[1].y_eq
    u_hold = voltage_for_target(plant, y_cmd, f)
    open_loop = [e for e in find_equilibria(plant, u_hold, f) if abs(e.y_eq - y_cmd) < 1e-6]
    assert len(open_loop) == 1 and not open_loop[0].stable

    k = 0.013
    spec, filt, problem = static_design(plant, k)
    res = synthesize(problem)
    y0 = y_cmd + f / k  # static target y* = y0* - f/k* passes through y_cmd
    traj = simulate(plant, spec, filt, res.K, make_signal("constant", {"value": f}), SimConfig(5.0), y0_star=y0, x0="unloaded")
    assert abs(traj.y[0] - eqs[0].y_eq) < 1e-9  # starts at the lower stable rest point
    tail = traj.t >= 4.0
    assert np.max(np.abs(traj.y[tail] - y_cmd)) < 1e-3
    clock.check()


def test_criterion_8(tmp_path, monkeypatch):
    """self-sensing: 1% after 0.5 s, ramp within 3%, map error < 2% full scale, closed loop < 2x baseline"""
    clock = Clock(60.0)
    R0, C0 = 5e5, 2e-9
    tr = run_estimator(1.0, R_e=R0, C_e=C0, record_every=10).arrays()
    late = tr["t"] >= 0.5
    assert np.max(np.abs(tr["R_hat"][late] / R0 - 1)) < 0.01
    assert np.max(np.abs(tr["C_hat"][late] / C0 - 1)) < 0.01

    C_t = lambda t: C0 * (1 + 0.1 * t)  # noqa: E731
    tr = run_estimator(2.0, R_e=R0, C_e=C_t, record_every=10).arrays()
    late = tr["t"] >= 0.5
    assert np.max(np.abs(tr["C_hat"][late] / C_t(tr["t"][late]) - 1)) < 0.03

    cmap = default_capacitance_map()
    y_true = lambda t: 2.5 + 1.5 * math.sin(2 * math.pi * 0.1 * t)  # noqa: E731
    tr = run_estimator(2.0, cmap=cmap, y_true=y_true, v_cmd=1500.0, record_every=10).arrays()
    late = tr["t"] >= 0.5
    full_scale = cmap.y[-1] - cmap.y[0]
    assert np.max(np.abs(tr["y_hat"][late] - tr["y_true"][late])) < 0.02 * full_scale

    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert cli.main(["all", "selfsense_baseline", "--out", str(tmp_path), "--set", "simulation.plots=false"]) == 0
    with open(tmp_path / "selfsense.json") as fh:
        cl = json.load(fh)["metrics"]["closed_loop"]
    assert cl["steady_state_error_selfsensed_mm"] < 2 * cl["steady_state_error_baseline_mm"]
    clock.check()


def test_criterion_9(tmp_path, monkeypatch):
    """identical config and seed give bit-identical CSV/JSON artifacts"""
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    runs = [tmp_path / "a", tmp_path / "b"]
    for out in runs:
        assert cli.main(["all", "linear_k013", "--out", str(out)]) == 0
    names = sorted(p.name for p in runs[0].iterdir() if p.suffix in (".csv", ".json"))
    assert {"synthesis.json", "margins.csv", "verify.json", "metrics.json", "trajectory.csv", "report.json"} <= set(names)
    assert names == sorted(p.name for p in runs[1].iterdir() if p.suffix in (".csv", ".json"))
    for name in names:
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name
