"""Command-line front end: ``forge synth|sim|sense|verify|all <config>``.

Exit codes: 0 success, 1 usage or input error, 2 infeasible design (or a
failed certificate check), 3 simulation divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import Campaign, ConfigError, load_campaign, shipped_campaigns
from .impedance import MSD
from .plant import InfeasibleTargetError
from .selfsense import SelfSensor, run_estimator
from .sim import DivergenceError, empirical_l2_ratio, settling_time, simulate, steady_state_error, step_overshoot
from .synthesis import InfeasibleDesignError, StructuralError, SynthesisResult, synthesize, verify_bmi

log = logging.getLogger("deaforge")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 1, 2, 3
STEP_BLANKING = 0.1  # s


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- artifacts


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def _clean(obj):
    """JSON-safe copy: numpy to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_artifact(path: Path, payload: dict, camp: Campaign) -> Path:
    """JSON with the resolved config, its hash and a ``created`` timestamp."""
    doc = {
        "deaforge_version": __version__,
        "campaign": camp.name,
        "config_hash": camp.hash,
        "created": _timestamp(),
        **_clean(payload),
        "config": camp.cfg,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _prepare_out(camp: Campaign, out: str | None) -> Path:
    d = camp.output_dir(out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _result_path(args, out: Path) -> Path:
    p = Path(args.result) if getattr(args, "result", None) else out / "synthesis.json"
    if not p.is_file():
        raise CliError(f"synthesis result not found: {p} (run 'forge synth' first or pass --result)")
    return p


def _load_result(path: Path) -> SynthesisResult:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return SynthesisResult.from_dict(doc.get("result", doc))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot read synthesis result {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_synth(camp: Campaign, out: Path) -> int:
    problem = camp.problem()
    try:
        res = synthesize(problem)
    except (InfeasibleDesignError, StructuralError) as exc:
        hints = getattr(exc, "hints", [])
        write_artifact(
            out / "synthesis_infeasible.json",
            {"status": "infeasible", "message": str(exc), "hints": hints},
            camp,
        )
        print(f"infeasible: {exc}", file=sys.stderr)
        for h in hints:
            print(f"  hint: {h}", file=sys.stderr)
        return EXIT_INFEASIBLE
    write_artifact(out / "synthesis.json", {"result": res.to_dict()}, camp)
    with open(out / "margins.csv", "w", newline="") as fh:
        fh.write("y_mm,margin,closed_loop_max_real_per_s\n")
        for y, mg, re in zip(res.grid.validation, res.validation_margins, res.closed_loop_max_real):
            fh.write(f"{y!r},{mg!r},{re!r}\n")
    print(f"K = {np.array2string(res.K.ravel(), precision=6)}  gamma = {res.gamma:.6g}  ({res.status})")
    return EXIT_OK


def cmd_verify(camp: Campaign, out: Path, result_path: Path) -> int:
    res = _load_result(result_path)
    problem = camp.problem()
    rep = verify_bmi(problem, res, raise_on_failure=False)
    write_artifact(out / "verify.json", {"verify": rep.to_dict()}, camp)
    if not rep.passed:
        for f in rep.failures:
            print(f"certificate check failed: {f}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"certificate holds at {len(rep.points)} points; worst margin {min(rep.margins19):.3g}")
    return EXIT_OK


def _sim_metrics(camp: Campaign, traj, spec) -> dict:
    s = camp.cfg["simulation"]
    m = {
        "steady_state_error_mm": steady_state_error(traj, float(s["settle_window"])),
        "max_abs_e_i_mm": float(np.max(np.abs(traj.e_i[traj.t >= float(s["skip"])]))),
        "settling_time_s": settling_time(traj, 1e-3),
        "u_saturated_fraction": float(np.mean(traj.u != traj.u_raw)),
    }
    try:
        m["l2_ratio"] = empirical_l2_ratio(traj)
    except ValueError:
        m["l2_ratio"] = None
    if spec.kind != MSD and s["signal"]["kind"] != "step":
        sel = traj.t >= float(s["skip"])
        plant = camp.plant()
        m["locus_max_deviation_stroke"] = float(np.max(np.abs(traj.e_i[sel])) / plant.stroke)
    sig = camp.cfg["simulation"]["signal"]
    if sig["kind"] == "step":
        before = spec.steady_state(float(sig.get("before", 0.0)))
        after = spec.steady_state(float(sig["after"]))
        if before != after:
            # the force step itself kicks y; judge the overshoot after a blanking window
            tb = float(sig["time"]) + STEP_BLANKING
            m["overshoot_y"] = step_overshoot(traj.t, traj.y, tb, before, after)
            m["overshoot_y_star"] = step_overshoot(traj.t, traj.y_star, float(sig["time"]), before, after)
    return m


def _divergence(out: Path, camp: Campaign, exc: DivergenceError, name: str) -> int:
    write_artifact(out / f"{name}_divergence.json", {"t": exc.t, "message": str(exc), "last": exc.last}, camp)
    print(f"simulation diverged: {exc}; last sample: {exc.last}", file=sys.stderr)
    return EXIT_DIVERGED


def cmd_sim(camp: Campaign, out: Path, result_path: Path) -> int:
    res = _load_result(result_path)
    plant, spec = camp.plant(), camp.spec()
    filt = camp.filter(spec)
    s = camp.cfg["simulation"]
    try:
        traj = simulate(plant, spec, filt, res.K, camp.signal(), camp.sim_config(), x0=s["x0"])
    except DivergenceError as exc:
        return _divergence(out, camp, exc, "sim")
    except (InfeasibleTargetError, ValueError) as exc:
        raise CliError(f"initial state not reachable: {exc}") from exc
    traj.to_csv(out / "trajectory.csv")
    metrics = _sim_metrics(camp, traj, spec)
    write_artifact(out / "metrics.json", {"metrics": metrics}, camp)
    if s["plots"]:
        from .plotting import locus_plot, trajectory_panels

        trajectory_panels(traj, out / "trajectory.svg", title=camp.name)
        if spec.kind != MSD:
            locus_plot(traj, spec, out / "locus.svg", title=camp.name, skip=float(s["skip"]))
    print(json.dumps(_clean(metrics), sort_keys=True))
    return EXIT_OK


def _convergence_time(t, err, tol) -> float:
    bad = np.nonzero(err >= tol)[0]
    if bad.size == 0:
        return float(t[0])
    if bad[-1] == len(err) - 1:
        return float("inf")
    return float(t[bad[-1] + 1])


def _estimator_metrics(trace, R_true, C_true, tol, stroke) -> dict:
    a = trace.arrays()
    eR = np.abs(a["R_hat"] / R_true - 1.0)
    eC = np.abs(a["C_hat"] / C_true - 1.0)
    both = np.maximum(eR, eC)
    return {
        "convergence_time_s": _convergence_time(a["t"], both, tol),
        "final_rel_error_R": float(eR[-1]),
        "final_rel_error_C": float(eC[-1]),
        "max_displacement_error_stroke": float(np.max(np.abs(a["y_hat"] - a["y_true"])[a["t"] >= 0.5]) / stroke)
        if a["t"][-1] >= 0.5
        else None,
    }


def cmd_sense(camp: Campaign, out: Path, result_path: Path | None) -> int:
    ss = camp.cfg["selfsense"]
    cmap = camp.capacitance_map()
    plant = camp.plant()
    metrics: dict = {}
    C0, rate = float(ss["C_e"]), float(ss["C_e_rate"])
    C_fn = (lambda t: C0 * (1.0 + rate * t)) if rate else C0
    est_kw = {
        "forgetting": float(ss["forgetting"]),
        "cutoff": ss["cutoff"],
        "highpass": ss["highpass"],
        "notch_freq": float(ss["f_ss"]) if ss["notch"] else None,
    }
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        trace = run_estimator(
            float(ss["duration"]),
            R_e=float(ss["R_e"]),
            C_e=C_fn,
            amp=float(ss["amp"]),
            f_ss=float(ss["f_ss"]),
            cmap=cmap,
            noise_std=float(ss["noise_std"]),
            seed=int(camp.cfg["seed"]),
            record_every=int(ss["record_every"]),
            **est_kw,
        )
    a = trace.arrays()
    C_true = np.array([C_fn(t) for t in a["t"]]) if callable(C_fn) else C0
    metrics["open_loop"] = _estimator_metrics(trace, float(ss["R_e"]), C_true, float(ss["tolerance"]), plant.stroke)
    unreliable = float(ss["amp"]) == 0.0
    notes = [str(w.message) for w in caught]
    if unreliable:
        msg = "probe amplitude is zero: no persistent excitation, estimates are unreliable"
        notes.append(msg)
        print(f"warning: {msg}", file=sys.stderr)
    metrics["open_loop"]["unreliable"] = unreliable
    metrics["warnings"] = notes
    trace.to_csv(out / "estimator_trace.csv")

    code = EXIT_OK
    cl = ss["closed_loop"]
    if cl["enabled"]:
        if result_path is None:
            raise CliError("closed-loop self-sensing needs a synthesis result (--result or run 'forge synth')")
        res = _load_result(result_path)
        spec = camp.spec()
        filt = camp.filter(spec)
        cfg = camp.sim_config()
        x0 = camp.cfg["simulation"]["x0"]
        window = float(camp.cfg["simulation"]["settle_window"])
        try:
            base = simulate(plant, spec, filt, res.K, camp.signal(), cfg, x0=x0)
            sensor = SelfSensor(
                cmap,
                cfg.dt_plant,
                R_e=float(ss["R_e"]),
                amp=float(ss["amp"]),
                f_ss=float(cl["f_ss"]),
                velocity_cutoff=float(cl["velocity_cutoff"]),
                dt_control=cfg.dt_control,
                warmup=float(cl["warmup"]),
                forgetting=float(cl["forgetting"]),
                cutoff=ss["cutoff"],
                highpass=cl["highpass"],
            )
            sensed = simulate(plant, spec, filt, res.K, camp.signal(), cfg, x0=x0, sensor=sensor)
        except DivergenceError as exc:
            return _divergence(out, camp, exc, "sense")
        except (InfeasibleTargetError, ValueError) as exc:
            raise CliError(f"initial state not reachable: {exc}") from exc
        e_base = steady_state_error(base, window)
        e_ss = steady_state_error(sensed, window)
        metrics["closed_loop"] = {
            "steady_state_error_baseline_mm": e_base,
            "steady_state_error_selfsensed_mm": e_ss,
            "ratio": e_ss / e_base if e_base > 0 else None,
            "within_2x_baseline": bool(e_ss < 2.0 * e_base),
            "max_displacement_error_mm": float(np.max(np.abs(sensed.y_meas - sensed.y)[sensed.t >= window])),
        }
        sensed.to_csv(out / "selfsensed_trajectory.csv")
        base.to_csv(out / "baseline_trajectory.csv")
        if camp.cfg["simulation"]["plots"]:
            from .plotting import trajectory_panels

            trajectory_panels(sensed, out / "selfsensed_trajectory.svg", title=f"{camp.name} (self-sensed)")
    if camp.cfg["simulation"]["plots"]:
        from .plotting import estimator_panels

        estimator_panels(trace, out / "estimator.svg", title=camp.name)
    write_artifact(out / "selfsense.json", {"metrics": metrics}, camp)
    print(json.dumps(_clean(metrics), sort_keys=True))
    return code


def cmd_all(camp: Campaign, out: Path) -> int:
    code = cmd_synth(camp, out)
    if code:
        return code
    rp = out / "synthesis.json"
    code = cmd_verify(camp, out, rp)
    if code:
        return code
    code = cmd_sim(camp, out, rp)
    if code:
        return code
    if camp.cfg["selfsense"]["enabled"]:
        code = cmd_sense(camp, out, rp)
    write_artifact(out / "report.json", {"artifacts": sorted(p.name for p in out.iterdir())}, camp)
    return code


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description="DEA interaction-control synthesis and simulation")
    p.add_argument("--version", action="version", version=f"deaforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, result=False):
        sp.add_argument("config", help="campaign JSON file or the name of a shipped campaign")
        sp.add_argument("--out", help="output directory (overrides the config's 'output')")
        sp.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
            help="override a config leaf, e.g. --set synthesis.lambda=2",
        )
        if result:
            sp.add_argument("--result", help="synthesis result JSON (default: <out>/synthesis.json)")

    common(sub.add_parser("synth", help="solve the LMI design problem"))
    common(sub.add_parser("sim", help="simulate the closed loop"), result=True)
    common(sub.add_parser("sense", help="run the self-sensing estimator"), result=True)
    common(sub.add_parser("verify", help="check the original matrix inequalities"), result=True)
    common(sub.add_parser("all", help="synth, verify, sim and (if enabled) sense"))
    sub.add_parser("list", help="list shipped campaigns")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    if args.command == "list":
        for name in sorted(shipped_campaigns()):
            print(name)
        return EXIT_OK
    try:
        camp = load_campaign(args.config, args.overrides)
        out = _prepare_out(camp, args.out)
        if args.command == "synth":
            return cmd_synth(camp, out)
        if args.command == "all":
            return cmd_all(camp, out)
        if args.command == "sense":
            rp = None
            if camp.cfg["selfsense"]["closed_loop"]["enabled"]:
                rp = _result_path(args, out)
            return cmd_sense(camp, out, rp)
        rp = _result_path(args, out)
        if args.command == "sim":
            return cmd_sim(camp, out, rp)
        return cmd_verify(camp, out, rp)
    except (ConfigError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
