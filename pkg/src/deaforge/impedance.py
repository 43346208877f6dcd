"""Desired force -> displacement behaviour and the error shaping filter.

All shipped targets share one sign convention: a compressive force shortens
the actuator, ``y* = y0* - f / k*`` at steady state.  The scheduling
parameter ``p`` is the measured displacement for every shipped constructor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plant import PolynomialFn

__all__ = [
    "StiffnessProfile",
    "ImpedanceSpec",
    "ShapingFilter",
    "InvalidSpecError",
    "make_static_spec",
    "make_msd_spec",
    "make_shaping_filter",
    "interaction_error",
    "spec_from_dict",
    "filter_from_dict",
]

STATIC_LINEAR = "static_linear"
STATIC_NONLINEAR = "static_nonlinear"
MSD = "msd"
KINDS = (STATIC_LINEAR, STATIC_NONLINEAR, MSD)


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class StiffnessProfile:
    k_star: PolynomialFn  # N/mm as a function of y
    y0_star: float  # mm

    def check(self, y_min: float, y_max: float, n: int = 400) -> None:
        ks = self.k_star(np.linspace(y_min, y_max, n))
        if np.any(~np.isfinite(ks)) or np.any(ks <= 0):
            raise InvalidSpecError(
                f"k*(y) must stay positive on [{y_min}, {y_max}], min is {np.min(ks):.4g}"
            )


@dataclass(frozen=True)
class ImpedanceSpec:
    """LPV target ``x_i' = Ai x_i + Bfi f + By0i y0*``, ``y* = Ci x_i + Dfi f + Dy0i y0*``."""

    kind: str
    k_star: PolynomialFn
    y0_star: float
    tau: float | None = None
    delta: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown impedance kind {self.kind!r}")
        if self.kind == MSD and (self.tau is None or self.delta is None):
            raise InvalidSpecError("msd spec needs tau and delta")

    @property
    def n_i(self) -> int:
        return 2 if self.kind == MSD else 0

    @property
    def mass(self) -> float:
        return float(self.k_star(0.0)) * self.tau**2

    @property
    def damping(self) -> float:
        return 2.0 * self.delta * float(self.k_star(0.0)) * self.tau

    def matrices(self, p: float):
        """``(Ai, Bfi, By0i, Ci, Dfi, Dy0i)`` at scheduling value ``p``.

        Shapes: Ai (n_i, n_i), Bfi/By0i (n_i,), Ci (n_i,), Dfi/Dy0i scalars.
        """
        if self.kind == MSD:
            k = float(self.k_star(0.0))
            ms, bs = self.mass, self.damping
            Ai = np.array([[0.0, 1.0], [-k / ms, -bs / ms]])
            Bfi = np.array([0.0, -1.0 / ms])
            By0i = np.array([0.0, k / ms])
            Ci = np.array([1.0, 0.0])
            return Ai, Bfi, By0i, Ci, 0.0, 0.0
        k = float(self.k_star(p))
        empty = np.zeros(0)
        return np.zeros((0, 0)), empty, empty, empty, -1.0 / k, 1.0

    def output(self, p: float, x_i, f: float, y0: float | None = None) -> float:
        """Ideal displacement ``y*``."""
        y0 = self.y0_star if y0 is None else y0
        _, _, _, Ci, Dfi, Dy0i = self.matrices(p)
        if self.n_i:
            return float(Ci @ np.asarray(x_i, dtype=float) + Dfi * f + Dy0i * y0)
        return float(Dfi * f + Dy0i * y0)

    def steady_state(self, f: float, y0: float | None = None, p: float | None = None) -> float:
        y0 = self.y0_star if y0 is None else y0
        if self.kind == MSD:
            return y0 - f / float(self.k_star(0.0))
        if p is not None:
            return y0 - f / float(self.k_star(p))
        # p = y makes the curve implicit; fixed-point iterate from y0
        y = y0
        for _ in range(200):
            y_next = y0 - f / float(self.k_star(y))
            if abs(y_next - y) < 1e-14:
                break
            y = y_next
        return y_next

    def rest_state(self, f: float = 0.0, y0: float | None = None) -> np.ndarray:
        """Internal state at rest under constant ``f``."""
        if self.kind != MSD:
            return np.zeros(0)
        return np.array([self.steady_state(f, y0), 0.0])

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "k_star": list(self.k_star.coeffs), "y0_star": self.y0_star}
        if self.kind == MSD:
            d.update(tau=self.tau, delta=self.delta)
        return d


def spec_from_dict(d: dict) -> ImpedanceSpec:
    kind = d["kind"]
    k = d["k_star"]
    k = PolynomialFn(tuple(k) if isinstance(k, (list, tuple)) else (float(k),))
    if kind == MSD:
        return make_msd_spec(float(k.coeffs[0]), float(d["tau"]), float(d["delta"]), float(d["y0_star"]))
    return make_static_spec(StiffnessProfile(k, float(d["y0_star"])), kind=kind)


def make_static_spec(
    profile: StiffnessProfile, y_min: float = 0.0, y_max: float = 5.0, kind: str | None = None
) -> ImpedanceSpec:
    """Static curve ``y* = y0* - f / k*(y)`` (no internal state)."""
    profile.check(y_min, y_max)
    if kind is None:
        nonconst = any(c != 0 for c in profile.k_star.coeffs[1:])
        kind = STATIC_NONLINEAR if nonconst else STATIC_LINEAR
    if kind not in (STATIC_LINEAR, STATIC_NONLINEAR):
        raise InvalidSpecError(f"{kind!r} is not a static kind")
    return ImpedanceSpec(kind=kind, k_star=profile.k_star, y0_star=float(profile.y0_star))


def make_msd_spec(k_star: float, tau: float, delta: float, y0_star: float = 2.9) -> ImpedanceSpec:
    """Mass-spring-damper target with natural period ``tau`` and damping ratio ``delta``.

    ``m* = k* tau^2`` and ``b* = 2 delta k* tau``, i.e. ``wn = 1/tau``.
    """
    for name, v in (("k_star", k_star), ("tau", tau), ("delta", delta)):
        if not (np.isfinite(v) and v > 0):
            raise InvalidSpecError(f"{name} must be positive, got {v!r}")
    return ImpedanceSpec(
        kind=MSD,
        k_star=PolynomialFn.constant(k_star),
        y0_star=float(y0_star),
        tau=float(tau),
        delta=float(delta),
    )


def interaction_error(y, y_star):
    return y - y_star


@dataclass(frozen=True)
class ShapingFilter:
    """One-state filter ``x_s' = As x_s + Bs e_i``, ``z = Cs x_s + Ds e_i``."""

    kind: str
    k_star: PolynomialFn
    omega_s: float
    M_s: float | None
    a_s: float = 0.0  # 0 gives integral action; nonzero only in tests

    @property
    def n_s(self) -> int:
        return 1

    def matrices(self, p: float):
        k = float(self.k_star(p))
        Cs = k * self.omega_s
        Ds = 0.0 if self.kind == MSD else k / self.M_s
        return self.a_s, 1.0, Cs, Ds

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k_star": list(self.k_star.coeffs),
            "omega_s": self.omega_s,
            "M_s": self.M_s,
            "a_s": self.a_s,
        }


def filter_from_dict(d: dict) -> ShapingFilter:
    return ShapingFilter(
        kind=d["kind"],
        k_star=PolynomialFn(tuple(d["k_star"])),
        omega_s=float(d["omega_s"]),
        M_s=None if d.get("M_s") is None else float(d["M_s"]),
        a_s=float(d.get("a_s", 0.0)),
    )


def make_shaping_filter(spec: ImpedanceSpec, omega_s: float, M_s: float | None = None) -> ShapingFilter:
    """Integrating filter tuned by ``omega_s`` and ``M_s``.

    =================  ====  ====  ============  ==========
    target             As    Bs    Cs            Ds
    =================  ====  ====  ============  ==========
    static linear      0     1     k* ws         k*/Ms
    static nonlinear   0     1     k*(y) ws      k*(y)/Ms
    mass-spring-damper 0     1     k* ws         0
    =================  ====  ====  ============  ==========
    """
    if spec.kind not in KINDS:
        raise InvalidSpecError(f"unknown impedance kind {spec.kind!r}")
    if not omega_s > 0:
        raise InvalidSpecError("omega_s must be positive")
    if spec.kind != MSD and (M_s is None or not M_s > 0):
        raise InvalidSpecError("static targets need M_s > 0")
    return ShapingFilter(kind=spec.kind, k_star=spec.k_star, omega_s=float(omega_s),
                         M_s=None if spec.kind == MSD else float(M_s))
