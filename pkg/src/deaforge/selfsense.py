"""Displacement self-sensing from electrode voltage and current.

The membrane is an RC series circuit ``v = R_e i + q / C_e`` whose
capacitance grows with the deformation.  A small high-frequency probe on top
of the actuation voltage keeps the estimator excited; recursive least squares
on the differentiated model ``v' = R_e i' + i / C_e`` then tracks ``R_e`` and
``1/C_e``, and the capacitance map is inverted for the displacement.

The charge is never measured.  The circuit is stepped with forward Euler, for
which ``v_k - v_{k-1} = R (i_k - i_{k-1}) + dt i_{k-1} / C`` holds exactly, so
the regressor uses the previous current sample.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "CircuitState",
    "RlsState",
    "CapacitanceMap",
    "LowPass",
    "Notch",
    "SelfSensingEstimator",
    "SelfSensor",
    "EstimatorTrace",
    "step_circuit",
    "inject",
    "rls_update",
    "rls_init",
    "estimate_displacement",
    "differentiate",
    "default_capacitance_map",
    "run_estimator",
]

PROBE_AMP = 100.0  # V
PROBE_FREQ = 500.0  # Hz
FORGETTING = 0.999
P0 = 1e6
THETA0 = (1e5, 1e9)
CUTOFF = 4000.0  # Hz


@dataclass(frozen=True)
class CircuitState:
    q: float  # C
    R_e: float  # ohm
    C_e: float  # F

    def __post_init__(self):
        if not (self.R_e > 0 and self.C_e > 0):
            raise ValueError("R_e and C_e must be positive")


def step_circuit(state: CircuitState, v: float, dt: float, R_e=None, C_e=None):
    """One forward-Euler step; returns ``(state', i)``.

    ``R_e``/``C_e`` override the stored parameters for this step (time-varying
    circuit).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    R = state.R_e if R_e is None else R_e
    C = state.C_e if C_e is None else C_e
    i = (v - state.q / C) / R
    return CircuitState(state.q + i * dt, R, C), i


def inject(v_cmd, t, amp: float = PROBE_AMP, f_ss: float = PROBE_FREQ):
    if amp < 0:
        raise ValueError("probe amplitude must be non-negative")
    return v_cmd + amp * np.sin(2.0 * np.pi * f_ss * t)


@dataclass(frozen=True)
class RlsState:
    theta: np.ndarray  # [R_e_hat, 1/C_e_hat]
    P: np.ndarray
    forgetting: float = FORGETTING
    resets: int = 0

    def __post_init__(self):
        if not 0 < self.forgetting <= 1:
            raise ValueError("forgetting factor must lie in (0, 1]")

    @property
    def R_hat(self) -> float:
        return float(self.theta[0])

    @property
    def C_hat(self) -> float:
        return 1.0 / float(self.theta[1]) if self.theta[1] != 0 else math.inf


def rls_init(theta0=THETA0, p0: float = P0, forgetting: float = FORGETTING) -> RlsState:
    return RlsState(np.array(theta0, dtype=float), p0 * np.eye(2), forgetting)


def _spd(P) -> bool:
    if not np.all(np.isfinite(P)):
        return False
    return P[0, 0] > 0 and P[0, 0] * P[1, 1] - P[0, 1] * P[1, 0] > 0


def rls_update(state: RlsState, v_dot: float, i_dot: float, i: float, prior: RlsState | None = None) -> RlsState:
    """Exponentially weighted RLS step with regressor ``[i_dot, i]``."""
    phi = np.array([i_dot, i])
    P, lam = state.P, state.forgetting
    Pphi = P @ phi
    gain = Pphi / (lam + phi @ Pphi)
    theta = state.theta + gain * (v_dot - phi @ state.theta)
    P_new = (P - np.outer(gain, Pphi)) / lam
    P_new = 0.5 * (P_new + P_new.T)
    if not _spd(P_new):
        log.warning("RLS covariance lost positive definiteness; resetting to the prior")
        base = prior or rls_init(forgetting=lam)
        return RlsState(state.theta.copy(), base.P.copy(), lam, state.resets + 1)
    return RlsState(theta, P_new, lam, state.resets)


@dataclass(frozen=True)
class CapacitanceMap:
    """Sampled ``C_e(y)``; strictly monotonic so that it can be inverted."""

    y: tuple[float, ...]
    C: tuple[float, ...]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if y.shape != C.shape or y.size < 2:
            raise ValueError("capacitance map needs >= 2 paired samples")
        order = np.argsort(y)
        y, C = y[order], C[order]
        if np.any(np.diff(y) <= 0):
            raise ValueError("capacitance map has repeated displacements")
        dC = np.diff(C)
        if not (np.all(dC > 0) or np.all(dC < 0)):
            raise ValueError("capacitance map is not strictly monotonic in y")
        if np.any(C <= 0):
            raise ValueError("capacitance must be positive")
        object.__setattr__(self, "y", tuple(y.tolist()))
        object.__setattr__(self, "C", tuple(C.tolist()))

    def __call__(self, y):
        return np.interp(y, self.y, self.C)

    def invert(self, C_hat: float) -> tuple[float, bool]:
        """``(y, saturated)``; clamps outside the sampled range."""
        C = np.asarray(self.C)
        y = np.asarray(self.y)
        if C[0] > C[-1]:
            C, y = C[::-1], y[::-1]
        if not np.isfinite(C_hat):
            return float(y[-1] if C_hat > 0 else y[0]), True
        if C_hat <= C[0]:
            return float(y[0]), C_hat < C[0]
        if C_hat >= C[-1]:
            return float(y[-1]), C_hat > C[-1]
        j = int(np.searchsorted(C, C_hat, side="right"))
        w = (C_hat - C[j - 1]) / (C[j] - C[j - 1])
        return float(y[j - 1] + w * (y[j] - y[j - 1])), False

    @classmethod
    def from_csv(cls, path) -> "CapacitanceMap":
        ys, cs = [], []
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows)
            if len(header) < 2:
                raise ValueError(f"{path}: expected two columns")
            for row in rows:
                if row:
                    ys.append(float(row[0]))
                    cs.append(float(row[1]))
        return cls(tuple(ys), tuple(cs))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y_mm", "C_e_F"])
            for a, b in zip(self.y, self.C):
                w.writerow([repr(a), repr(b)])


def default_capacitance_map(y_min: float = 0.0, y_max: float = 5.0, n: int = 51) -> CapacitanceMap:
    """Synthetic affine map ``1.5 nF + 0.3 nF/mm * y``."""
    y = np.linspace(y_min, y_max, n)
    return CapacitanceMap(tuple(y), tuple(1.5e-9 + 0.3e-9 * y))


def estimate_displacement(C_e_hat: float, cmap: CapacitanceMap) -> float:
    return cmap.invert(C_e_hat)[0]


class LowPass:
    """First-order low-pass, bilinear transform with prewarping.

    Written in increment form so a constant input is a fixed point exactly.
    ``cutoff=None`` passes the input through.
    """

    def __init__(self, cutoff: float | None, dt: float):
        if cutoff is not None and not 0 < cutoff * dt < 0.5:
            raise ValueError("cutoff must lie between 0 and the Nyquist frequency")
        self.cutoff = cutoff
        self.g = None if cutoff is None else (lambda k: k / (1.0 + k))(math.tan(math.pi * cutoff * dt))
        self.x = self.y = None

    def reset(self, x0: float) -> None:
        self.x = self.y = x0

    def __call__(self, x: float) -> float:
        if self.g is None:
            return x
        if self.y is None:
            self.reset(x)
            return x
        self.y = self.y + self.g * (x + self.x - 2.0 * self.y)
        self.x = x
        return self.y


class Notch:
    """Comb notch at the probe frequency: moving average over one probe period.

    Zeros sit at ``f_ss`` and every harmonic; the group delay is half a probe
    period.
    """

    def __init__(self, freq: float, dt: float):
        n = int(round(1.0 / (freq * dt)))
        if n < 2:
            raise ValueError("probe period must span at least two samples")
        self.n = n
        self.buf: list[float] = []
        self.acc = 0.0
        self.k = 0

    def __call__(self, x: float) -> float:
        if not self.buf:
            self.buf = [x] * self.n
            self.acc = x * self.n
        old = self.buf[self.k]
        self.buf[self.k] = x
        self.k = (self.k + 1) % self.n
        self.acc += x - old
        if self.k == 0:  # refresh the running sum to stop round-off drift
            self.acc = math.fsum(self.buf)
        return self.acc / self.n


def differentiate(samples, dt: float, cutoff: float | None = CUTOFF) -> np.ndarray:
    """Backward difference after an optional first-order low-pass; ``d[0] = 0``."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two samples")
    lp = LowPass(cutoff, dt)
    xf = np.array([lp(v) for v in x])
    d = np.zeros_like(xf)
    d[1:] = np.diff(xf) / dt
    return d


@dataclass
class EstimatorTrace:
    t: list = field(default_factory=list)
    v: list = field(default_factory=list)
    i: list = field(default_factory=list)
    R_hat: list = field(default_factory=list)
    C_hat: list = field(default_factory=list)
    y_hat: list = field(default_factory=list)
    y_true: list = field(default_factory=list)

    def append(self, t, v, i, R, C, yh, yt):
        for name, val in zip(("t", "v", "i", "R_hat", "C_hat", "y_hat", "y_true"), (t, v, i, R, C, yh, yt)):
            getattr(self, name).append(float(val))

    def arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in ("t", "v", "i", "R_hat", "C_hat", "y_hat", "y_true")}

    def to_csv(self, path, every: int = 1) -> None:
        names = ["t_s", "v_V", "i_A", "R_e_hat_ohm", "C_e_hat_F", "y_hat_mm", "y_true_mm"]
        a = self.arrays()
        cols = [a[k] for k in ("t", "v", "i", "R_hat", "C_hat", "y_hat", "y_true")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in zip(*(c[::every] for c in cols)):
                w.writerow([repr(float(v)) for v in row])


class SelfSensingEstimator:
    """Stream processor: one ``(v, i)`` sample in, latest estimates out."""

    def __init__(
        self,
        dt: float,
        cmap: CapacitanceMap,
        forgetting: float = FORGETTING,
        cutoff: float | None = CUTOFF,
        notch_freq: float | None = None,
        theta0=THETA0,
        p0: float = P0,
        highpass: float | None = None,
        highpass_order: int = 2,
    ):
        self.dt = dt
        self.cmap = cmap
        self.prior = rls_init(theta0, p0, forgetting)
        self.rls = self.prior
        self.lp_v = LowPass(cutoff, dt)
        self.lp_i = LowPass(cutoff, dt)
        # optional: strip the slow actuation content so that only the probe
        # band drives the regression
        n_hp = highpass_order if highpass else 0
        self.hp_v = [LowPass(highpass, dt) for _ in range(n_hp)]
        self.hp_i = [LowPass(highpass, dt) for _ in range(n_hp)]
        self.notch = Notch(notch_freq, dt) if notch_freq else None
        self.prev = None  # (v_f, i_f)
        self.C_hat = self.prior.C_hat
        self.y_hat, self.saturated = cmap.invert(self.C_hat)

    def update(self, v: float, i: float) -> float:
        vf, i_f = self.lp_v(v), self.lp_i(i)
        for hv, hi in zip(self.hp_v, self.hp_i):
            vf, i_f = vf - hv(vf), i_f - hi(i_f)
        if self.prev is not None:
            vp, ip = self.prev
            self.rls = rls_update(self.rls, (vf - vp) / self.dt, (i_f - ip) / self.dt, ip, self.prior)
            C = self.rls.C_hat
            if self.notch is not None:
                C = self.notch(C)
            self.C_hat = C
            self.y_hat, self.saturated = self.cmap.invert(C)
        self.prev = (vf, i_f)
        return self.y_hat


def run_estimator(
    duration: float,
    dt: float = 5e-5,
    R_e=5e5,
    C_e=2e-9,
    v_cmd=0.0,
    amp: float = PROBE_AMP,
    f_ss: float = PROBE_FREQ,
    cmap: CapacitanceMap | None = None,
    y_true=None,
    noise_std: float = 0.0,
    seed: int = 0,
    record_every: int = 1,
    **est_kw,
) -> EstimatorTrace:
    """Open-loop estimator run against the simulated circuit.

    ``R_e``, ``C_e``, ``v_cmd`` and ``y_true`` may be constants or callables
    of time.  When ``y_true`` is given, ``C_e`` defaults to ``cmap(y_true)``.
    """
    cmap = cmap or default_capacitance_map()
    fn = lambda v: v if callable(v) else (lambda t, c=v: c)  # noqa: E731
    R_f, v_f = fn(R_e), fn(v_cmd)
    if y_true is not None:
        y_f = fn(y_true)
        C_f = lambda t: float(cmap(y_f(t)))  # noqa: E731
    else:
        C_f = fn(C_e)
        y_f = lambda t: cmap.invert(C_f(t))[0]  # noqa: E731
    rng = np.random.default_rng(seed)
    est = SelfSensingEstimator(dt, cmap, **est_kw)
    state = CircuitState(C_f(0.0) * v_f(0.0), R_f(0.0), C_f(0.0))
    trace = EstimatorTrace()
    n = int(round(duration / dt))
    for k in range(n + 1):
        t = k * dt
        v = float(inject(v_f(t), t, amp, f_ss))
        state, i = step_circuit(state, v, dt, R_f(t), C_f(t))
        vm, im = v, i
        if noise_std:
            vm += noise_std * rng.standard_normal()
        yh = est.update(vm, im)
        if k % record_every == 0:
            trace.append(t, v, i, est.rls.R_hat, est.C_hat, yh, y_f(t))
    return trace


class SelfSensor:
    """Sensor hook for :func:`deaforge.sim.simulate`.

    The plant input ``u`` (kV^2) is turned into an electrode voltage, the
    probe is added, and the actuator sees the square of the total voltage.
    The estimator runs once per plant step; the controller reads the latest
    displacement estimate and a filtered backward-difference velocity.
    """

    def __init__(
        self,
        cmap: CapacitanceMap,
        dt: float,
        R_e: float = 5e5,
        amp: float = PROBE_AMP,
        f_ss: float = PROBE_FREQ,
        velocity_cutoff: float = 200.0,
        dt_control: float = 2e-4,
        warmup: float = 0.0,
        **est_kw,
    ):
        self.cmap, self.dt, self.R_e = cmap, dt, R_e
        self.amp, self.f_ss = amp, f_ss
        self.est_kw = est_kw
        self.dt_control = dt_control
        self.velocity_cutoff = velocity_cutoff
        self.warmup = warmup

    def reset(self, t: float, y: float, u: float) -> None:
        self.est = SelfSensingEstimator(self.dt, self.cmap, **self.est_kw)
        C = float(self.cmap(y))
        v = 1e3 * math.sqrt(max(u, 0.0))
        self.circuit = CircuitState(C * v, self.R_e, C)
        # let the estimator lock on before the loop is closed
        n = int(round(self.warmup / self.dt))
        for k in range(n):
            self._electrical(-self.warmup + k * self.dt, y, u)
        self.v_lp = LowPass(self.velocity_cutoff, self.dt_control)
        self.y_prev = self.est.y_hat
        self.v_lp.reset(0.0)
        self.v_hat = 0.0
        self.trace = EstimatorTrace()

    def _voltage(self, t: float, u: float) -> float:
        return inject(1e3 * math.sqrt(max(u, 0.0)), t, self.amp, self.f_ss)

    def applied_input(self, t: float, u: float) -> float:
        return (self._voltage(t, u) * 1e-3) ** 2

    def _electrical(self, t, y, u):
        v = self._voltage(t, u)
        self.circuit, i = step_circuit(self.circuit, v, self.dt, self.R_e, float(self.cmap(y)))
        return v, i, self.est.update(v, i)

    def update(self, t: float, y: float, u: float) -> None:
        v, i, yh = self._electrical(t, y, u)
        if self.trace is not None and len(self.trace.t) < 2_000_000:
            self.trace.append(t, v, i, self.est.rls.R_hat, self.est.C_hat, yh, y)

    def read(self, t: float):
        y = self.est.y_hat
        self.v_hat = self.v_lp((y - self.y_prev) / self.dt_control)
        self.y_prev = y
        return y, self.v_hat


def load_map(path) -> CapacitanceMap:
    return CapacitanceMap.from_csv(Path(path))
