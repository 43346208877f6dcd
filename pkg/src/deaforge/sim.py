"""Fixed-step closed-loop simulation with input saturation and anti-windup.

The plant is integrated with classical RK4 at ``dt_plant``; the static gain
runs every ``dt_control`` and its output is held in between.  The shaping
filter and the impedance model are integrated together with the plant, so
the augmented state is ``[x_s | x_i | x1 x2 x3]`` as in :mod:`.augment`.

The inner loop works on Python floats: at the state sizes involved (4 to 6)
this is several times faster than numpy small-array arithmetic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .impedance import MSD, ImpedanceSpec, ShapingFilter
from .plant import InfeasibleTargetError, PlantModel, find_equilibria, voltage_for_target

__all__ = [
    "SimConfig",
    "ForceSignal",
    "Trajectory",
    "DivergenceError",
    "make_signal",
    "simulate",
    "closed_loop_equilibrium",
    "unloaded_state",
    "empirical_l2_ratio",
    "steady_state_error",
    "settling_time",
    "step_overshoot",
]

SIGNAL_KINDS = ("sine", "am_square", "step", "band_limited_noise", "constant")


class DivergenceError(RuntimeError):
    """Simulation blew up; ``last`` holds the last finite sample."""

    def __init__(self, message: str, t: float, last: dict):
        super().__init__(message)
        self.t = t
        self.last = last


@dataclass(frozen=True)
class SimConfig:
    duration: float
    dt_plant: float = 5e-5
    dt_control: float = 2e-4
    u_min: float = 0.0
    u_max: float | None = None  # None: take the plant's bound
    k_aw: float | None = None  # None: 1 / dt_control
    record_every: int = 1  # control ticks between recorded samples

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not (self.dt_plant > 0 and self.dt_control > 0):
            raise ValueError("time steps must be positive")
        if self.dt_plant > self.dt_control:
            raise ValueError("dt_plant must not exceed dt_control")
        r = self.dt_control / self.dt_plant
        if abs(r - round(r)) > 1e-9 * r:
            raise ValueError("dt_control must be an integer multiple of dt_plant")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_control / self.dt_plant))

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt_control))

    @property
    def aw_gain(self) -> float:
        return 1.0 / self.dt_control if self.k_aw is None else float(self.k_aw)

    def to_dict(self) -> dict:
        return {
            "duration": self.duration,
            "dt_plant": self.dt_plant,
            "dt_control": self.dt_control,
            "u_min": self.u_min,
            "u_max": self.u_max,
            "k_aw": self.k_aw,
            "record_every": self.record_every,
        }


@dataclass(frozen=True)
class ForceSignal:
    """External force in N as a deterministic function of time."""

    kind: str
    params: dict
    _noise: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def offset(self) -> float:
        """Constant part of the signal (the equilibrium-consistent load)."""
        p = self.params
        if self.kind == "step":
            return float(p.get("before", 0.0))
        if self.kind == "constant":
            return float(p["value"])
        return float(p.get("offset", 0.0))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind == "constant":
            out = np.full_like(t, float(p["value"]))
        elif self.kind == "sine":
            out = p.get("offset", 0.0) + p["amplitude"] * np.sin(2 * np.pi * p["frequency"] * t + p.get("phase", 0.0))
        elif self.kind == "step":
            out = np.where(t >= p["time"], p["after"], p.get("before", 0.0)).astype(float)
        elif self.kind == "am_square":
            levels = np.asarray(p["levels"], dtype=float)
            k = np.floor(2.0 * p["frequency"] * t).astype(int)
            sign = np.where(k % 2 == 0, 1.0, -1.0)
            out = p.get("offset", 0.0) + p["amplitude"] * levels[k % len(levels)] * sign
        else:
            tg, vg = self._noise
            out = p.get("offset", 0.0) + np.interp(t, tg, vg, left=0.0, right=0.0)
        return float(out) if out.ndim == 0 else out

    def plateaus(self, n: int) -> np.ndarray:
        """Values of the first ``n`` plateaus of an ``am_square`` signal."""
        if self.kind != "am_square":
            raise ValueError("plateaus are only defined for am_square")
        half = 0.5 / self.params["frequency"]
        return np.array([self((k + 0.5) * half) for k in range(n)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


def _require(params: dict, *names):
    missing = [n for n in names if n not in params]
    if missing:
        raise ValueError(f"missing signal parameters: {', '.join(missing)}")
    for n in names:
        v = params[n]
        if not isinstance(v, (list, tuple)) and not np.isfinite(v):
            raise ValueError(f"signal parameter {n} must be finite")


def make_signal(kind: str, params: dict | None = None) -> ForceSignal:
    """Build a force signal.

    ``sine``: amplitude, frequency, offset, phase.  ``step``: time, after,
    before.  ``am_square``: amplitude, frequency, levels, offset; plateau
    ``k`` (half periods) is ``offset +/- amplitude * levels[k % len]``.
    ``band_limited_noise``: rms, cutoff, duration, seed, offset, taper; a
    seeded white sequence low-passed by a 4th-order Butterworth filter and
    faded in and out so it has finite energy.  ``constant``: value.
    """
    params = dict(params or {})
    if kind not in SIGNAL_KINDS:
        raise ValueError(f"unknown signal kind {kind!r}; expected one of {SIGNAL_KINDS}")
    if kind == "constant":
        _require(params, "value")
    elif kind == "sine":
        _require(params, "amplitude", "frequency")
        if params["frequency"] <= 0 or params["amplitude"] < 0:
            raise ValueError("sine needs frequency > 0 and amplitude >= 0")
    elif kind == "step":
        _require(params, "time", "after")
    elif kind == "am_square":
        params.setdefault("levels", [1.0, 0.6, 0.3, 0.8])
        _require(params, "amplitude", "frequency")
        if params["frequency"] <= 0 or not len(params["levels"]):
            raise ValueError("am_square needs frequency > 0 and a non-empty levels list")
        params["levels"] = [float(v) for v in params["levels"]]
    else:
        _require(params, "rms", "cutoff", "duration")
        params.setdefault("seed", 0)
        params.setdefault("taper", 0.5)
        if params["cutoff"] <= 0 or params["duration"] <= 0 or params["rms"] < 0:
            raise ValueError("noise needs cutoff > 0, duration > 0 and rms >= 0")
        return ForceSignal(kind, params, _noise=_noise_samples(params))
    return ForceSignal(kind, params)


def _noise_samples(p: dict):
    fs = max(20.0 * p["cutoff"], 200.0)
    n = int(np.ceil(p["duration"] * fs)) + 1
    t = np.arange(n) / fs
    rng = np.random.default_rng(int(p["seed"]))
    b, a = sps.butter(4, p["cutoff"], fs=fs)
    v = sps.lfilter(b, a, rng.standard_normal(n))
    taper = min(float(p["taper"]), 0.5 * p["duration"])
    if taper > 0:
        env = np.clip(np.minimum(t, t[-1] - t) / taper, 0.0, 1.0)
        v = v * np.sin(0.5 * np.pi * env) ** 2
    rms = np.sqrt(np.mean(v**2))
    v = v * (p["rms"] / rms if rms > 0 else 0.0)
    return t, v


@dataclass
class Trajectory:
    t: np.ndarray
    f: np.ndarray
    u_raw: np.ndarray
    u: np.ndarray
    x: np.ndarray  # (N, 3)
    x_s: np.ndarray  # (N, n_s)
    x_i: np.ndarray  # (N, n_i)
    y: np.ndarray
    y_star: np.ndarray
    e_i: np.ndarray
    z: np.ndarray
    y_meas: np.ndarray | None = None
    f_rest: float = 0.0  # constant load consistent with the initial equilibrium
    z_rest: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("f", "u_raw", "u", "x", "x_s", "x_i", "y", "y_star", "e_i", "z"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"channel {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.t)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {
            "t_s": self.t,
            "f_N": self.f,
            "u_raw_kV2": self.u_raw,
            "u_kV2": self.u,
            "y_mm": self.y,
            "v_mm_s": self.x[:, 1],
            "x3": self.x[:, 2],
            "y_star_mm": self.y_star,
            "e_i_mm": self.e_i,
            "z": self.z,
        }
        for j in range(self.x_s.shape[1]):
            cols[f"x_s{j}"] = self.x_s[:, j]
        for j in range(self.x_i.shape[1]):
            cols[f"x_i{j}"] = self.x_i[:, j]
        if self.y_meas is not None:
            cols["y_meas_mm"] = self.y_meas
        return cols

    def to_csv(self, path, every: int = 1) -> None:
        cols = self.columns()
        names = list(cols)
        data = np.column_stack([cols[n] for n in names])[::every]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in data:
                w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- initial states


def unloaded_state(plant: PlantModel, f: float, y0_star: float) -> np.ndarray:
    """Plant state at the stable ``u = 0`` rest point closest to ``y0_star``."""
    eqs = [e for e in find_equilibria(plant, 0.0, f) if e.stable]
    if not eqs:
        raise ValueError(f"no stable u = 0 equilibrium under f = {f} N")
    e = min(eqs, key=lambda e: abs(e.y_eq - y0_star))
    return np.array([e.y_eq, 0.0, e.x3_eq])


def closed_loop_equilibrium(plant, spec: ImpedanceSpec, filt: ShapingFilter, K, f: float, y0=None) -> dict:
    """Augmented rest state where the interaction error is zero under ``f``.

    The integrator state is chosen so that ``-K x_m`` equals the holding
    input; raises :class:`InfeasibleTargetError` when that input is out of
    range.
    """
    K = np.asarray(K, dtype=float).ravel()
    y0 = spec.y0_star if y0 is None else y0
    y = spec.steady_state(f, y0)
    u = voltage_for_target(plant, y, f)
    x = np.array([y, 0.0, -plant.a31(y) * y / plant.a33])
    xi = spec.rest_state(f, y0)
    ns = filt.n_s
    rest = np.concatenate([xi, x[:2]])
    if K[0] == 0:
        raise InfeasibleTargetError("gain has no integrator component; equilibrium not adjustable", u)
    xs = (-u - K[ns:] @ rest) / K[0]
    return {"x": x, "x_s": np.array([xs]), "x_i": xi, "u": u}


# ---------------------------------------------------------------- simulator


def _horner(c):
    c = tuple(reversed(c))
    if len(c) == 1:
        v = c[0]
        return lambda y: v
    return lambda y: _hval(c, y)


def _hval(c, y):
    acc = c[0]
    for a in c[1:]:
        acc = acc * y + a
    return acc


def simulate(
    plant: PlantModel,
    spec: ImpedanceSpec,
    filt: ShapingFilter,
    K,
    signal: ForceSignal,
    config: SimConfig,
    y0_star: float | None = None,
    x0: str | dict = "unloaded",
    sensor=None,
) -> Trajectory:
    """Closed loop of plant, impedance model, shaping filter and static gain.

    ``x0`` is ``"unloaded"`` (stable u = 0 rest point nearest ``y0*``, zero
    filter state), ``"equilibrium"`` (closed-loop rest state for ``f(0)``) or
    a dict with ``x``, ``x_s``, ``x_i``.

    ``sensor`` replaces the measured displacement and velocity.  It must
    provide ``reset(t, y, u)``, ``applied_input(t, u)`` (input reaching the
    plant, e.g. with a probing component), ``update(t, y, u)`` once per plant
    step and ``read(t)`` returning ``(y_hat, v_hat)`` at control ticks.
    """
    y0 = spec.y0_star if y0_star is None else float(y0_star)
    K = np.asarray(K, dtype=float).ravel()
    ns, ni = filt.n_s, spec.n_i
    if K.size != ns + ni + 2:
        raise ValueError(f"K must have {ns + ni + 2} entries (x_s, x_i, x1, x2), got {K.size}")
    u_lo = config.u_min
    u_hi = plant.u_max if config.u_max is None else config.u_max
    dt, nsub, nt = config.dt_plant, config.substeps, config.n_ticks
    f0 = float(signal(0.0))

    if isinstance(x0, str):
        if x0 == "unloaded":
            x = unloaded_state(plant, f0, y0)
            xs = np.zeros(ns)
            xi = spec.rest_state(f0, y0)
        elif x0 == "equilibrium":
            eq = closed_loop_equilibrium(plant, spec, filt, K, f0, y0)
            x, xs, xi = eq["x"], eq["x_s"], eq["x_i"]
        else:
            raise ValueError(f"unknown initial condition {x0!r}")
    else:
        x = np.asarray(x0["x"], dtype=float)
        xs = np.asarray(x0.get("x_s", np.zeros(ns)), dtype=float)
        xi = np.asarray(x0.get("x_i", spec.rest_state(f0, y0)), dtype=float)

    # force on the half-step grid used by RK4 stages
    n_half = 2 * nt * nsub + 1
    t_half = np.arange(n_half) * (0.5 * dt)
    f_half = np.asarray(signal(t_half), dtype=float)
    # last RK4 stage of each step sees the left limit, so a jump at a step
    # boundary belongs entirely to the following step
    f_left = np.asarray(signal(np.nextafter(t_half[::2], -np.inf)), dtype=float)
    if not (np.all(np.isfinite(f_half)) and np.all(np.isfinite(f_left))):
        raise ValueError("force signal is not finite on the horizon")
    f_half, f_left = f_half.tolist(), f_left.tolist()

    a21, a22, a23, a31, b21 = (_horner(getattr(plant, n).coeffs) for n in ("a21", "a22", "a23", "a31", "b21"))
    a33, inv_m = plant.a33, 1.0 / plant.m
    kpoly = _horner(spec.k_star.coeffs)
    msd = spec.kind == MSD
    if msd:
        Ai, Bfi, By0i, Ci, _, _ = spec.matrices(0.0)
        ai11, ai12, ai21, ai22 = Ai[0, 0], Ai[0, 1], Ai[1, 0], Ai[1, 1]
        bf1, bf2, by1, by2 = Bfi[0], Bfi[1], By0i[0] * y0, By0i[1] * y0
    a_s = filt.a_s
    ws, Ms = filt.omega_s, filt.M_s

    def ystar(p, xi0, f):
        if msd:
            return xi0
        return y0 - f / kpoly(p)

    def shaping_out(p, xs0, e):
        k = kpoly(p)
        return k * ws * xs0 + (0.0 if msd else k / Ms) * e

    Kl = K.tolist()
    Ks = Kl[0]
    k_aw = config.aw_gain

    # state as python floats: s = [xs, xi0, xi1, x1, x2, x3] (xi padded)
    xs0 = float(xs[0])
    xi0, xi1 = (float(xi[0]), float(xi[1])) if msd else (0.0, 0.0)
    x1, x2, x3 = (float(v) for v in x)

    def deriv(f, s_xs, s_i0, s_i1, s_x1, s_x2, s_x3, u, y_ctrl, aw):
        p = s_x1 if y_ctrl is None else y_ctrl
        e = p - ystar(p, s_i0, f)
        d_xs = a_s * s_xs + e + aw
        if msd:
            d_i0 = ai11 * s_i0 + ai12 * s_i1 + bf1 * f + by1
            d_i1 = ai21 * s_i0 + ai22 * s_i1 + bf2 * f + by2
        else:
            d_i0 = d_i1 = 0.0
        y = s_x1
        d_x2 = a21(y) * y + a22(y) * s_x2 + a23(y) * s_x3 - f * inv_m + b21(y) * u
        d_x3 = a31(y) * y + a33 * s_x3
        return d_xs, d_i0, d_i1, s_x2, d_x2, d_x3

    rec_n = nt // config.record_every + 1
    R = np.zeros((rec_n, 12))
    ymeas_rec = np.zeros(rec_n) if sensor is not None else None

    def record(j, t, f, ur, us, ym):
        p = x1 if ym is None else ym
        ys = ystar(x1, xi0, f)
        e = x1 - ys
        z = shaping_out(x1, xs0, e)
        R[j] = (t, f, ur, us, x1, x2, x3, xs0, xi0, xi1, ys, e)
        if ymeas_rec is not None:
            ymeas_rec[j] = p
        return z

    z_rec = np.zeros(rec_n)
    if sensor is not None:
        sensor.reset(0.0, x1, 0.0)
    j = 0
    last_u = 0.0
    for k in range(nt + 1):
        t = k * config.dt_control
        if sensor is not None:
            ym, vm = sensor.read(t)
        else:
            ym, vm = None, x2
        meas_y = x1 if ym is None else ym
        xm = [xs0] + ([xi0, xi1] if msd else []) + [meas_y, vm]
        u_raw = -sum(a * b for a, b in zip(Kl, xm))
        u_sat = min(max(u_raw, u_lo), u_hi)
        if k % config.record_every == 0:
            if not all(math.isfinite(v) for v in (x1, x2, x3, xs0, xi0, xi1, u_raw)):
                raise DivergenceError(
                    f"non-finite state at t = {t:.6g} s", t, {"row": R[j - 1].tolist() if j else None}
                )
            z_rec[j] = record(j, t, f_half[2 * k * nsub], u_raw, u_sat, ym)
            j += 1
        if k == nt:
            break
        aw = -k_aw * (u_sat - u_raw) / Ks if Ks != 0 else 0.0
        y_ctrl = ym
        base = 2 * k * nsub
        for i in range(nsub):
            i0 = base + 2 * i
            tp = (k * nsub + i) * dt
            if sensor is not None:
                ua = sensor.applied_input(tp, u_sat)
                ub = sensor.applied_input(tp + 0.5 * dt, u_sat)
                uc = sensor.applied_input(tp + dt, u_sat)
            else:
                ua = ub = uc = u_sat
            s = (xs0, xi0, xi1, x1, x2, x3)
            fa, fb, fc = f_half[i0], f_half[i0 + 1], f_left[k * nsub + i + 1]
            k1 = deriv(fa, *s, ua, y_ctrl, aw)
            s2 = tuple(a + 0.5 * dt * b for a, b in zip(s, k1))
            k2 = deriv(fb, *s2, ub, y_ctrl, aw)
            s3 = tuple(a + 0.5 * dt * b for a, b in zip(s, k2))
            k3 = deriv(fb, *s3, ub, y_ctrl, aw)
            s4 = tuple(a + dt * b for a, b in zip(s, k3))
            k4 = deriv(fc, *s4, uc, y_ctrl, aw)
            xs0, xi0, xi1, x1, x2, x3 = (
                a + dt / 6.0 * (b + 2.0 * c + 2.0 * d + e) for a, b, c, d, e in zip(s, k1, k2, k3, k4)
            )
            if not (math.isfinite(x1) and abs(x1) < 1e9):
                raise DivergenceError(
                    f"state blew up at t = {tp + dt:.6g} s", tp + dt, {"row": R[j - 1].tolist() if j else None}
                )
            if sensor is not None:
                sensor.update(tp + dt, x1, u_sat)
        last_u = u_sat

    R = R[:j]
    f_rest = signal.offset
    return Trajectory(
        t=R[:, 0],
        f=R[:, 1],
        u_raw=R[:, 2],
        u=R[:, 3],
        x=R[:, 4:7].copy(),
        x_s=R[:, 7:8].copy(),
        x_i=R[:, 8 : 8 + ni].copy(),
        y=R[:, 4].copy(),
        y_star=R[:, 10],
        e_i=R[:, 11],
        z=z_rec[:j],
        y_meas=None if ymeas_rec is None else ymeas_rec[:j],
        f_rest=f_rest,
        z_rest=float(z_rec[0]),
        meta={"K": Kl, "y0_star": y0, "config": config.to_dict(), "signal": signal.to_dict(), "u_last": last_u},
    )


# ---------------------------------------------------------------- metrics


def _trapz(v, t):
    return float(np.trapezoid(v, t)) if hasattr(np, "trapezoid") else float(np.trapz(v, t))


def empirical_l2_ratio(traj: Trajectory) -> float:
    """``sqrt(int z~^2 / int f~^2)`` with the rest values removed."""
    ft = traj.f - traj.f_rest
    zt = traj.z - traj.z_rest
    den = _trapz(ft**2, traj.t)
    if not den > 0:
        raise ValueError("input has zero energy over the horizon; L2 ratio undefined")
    return float(np.sqrt(_trapz(zt**2, traj.t) / den))


def steady_state_error(traj: Trajectory, settle_window: float) -> float:
    """Max ``|e_i|`` over the final ``settle_window`` seconds."""
    span = traj.t[-1] - traj.t[0]
    if settle_window > span + 1e-12 or settle_window <= 0:
        raise ValueError(f"settle window {settle_window} s not inside the {span} s trajectory")
    mask = traj.t >= traj.t[-1] - settle_window - 1e-12
    return float(np.max(np.abs(traj.e_i[mask])))


def settling_time(traj: Trajectory, tol: float = 1e-3, start: float = 0.0, end: float | None = None) -> float:
    """Time after ``start`` from which ``|e_i|`` stays below ``tol`` up to ``end``; inf if never."""
    mask = traj.t >= start
    if end is not None:
        mask &= traj.t < end
    t, e = traj.t[mask], np.abs(traj.e_i[mask])
    bad = np.nonzero(e >= tol)[0]
    if bad.size == 0:
        return float(t[0] - start)
    if bad[-1] == len(e) - 1:
        return float("inf")
    return float(t[bad[-1] + 1] - start)


def step_overshoot(t, y, t_step: float, y_before: float, y_after: float) -> float:
    """Overshoot of a step response as a fraction of the step size."""
    dy = y_after - y_before
    if dy == 0:
        raise ValueError("zero step")
    seg = (np.asarray(y) - y_before)[np.asarray(t) >= t_step] / dy
    return float(max(np.max(seg) - 1.0, 0.0))
