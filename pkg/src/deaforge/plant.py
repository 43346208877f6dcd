"""Quasi-LPV model of a biased dielectric elastomer membrane actuator.

Working units throughout the package: mm, N, s, kV.  The control input ``u``
is the *square* of the electrode voltage (kV^2) and the moving mass is stored
in N*s^2/mm, so a 2.05 g spacer is ``m = 2.05e-6``.

State ``x = [x1, x2, x3]``: displacement (mm), velocity (mm/s) and the
internal viscoelastic strain.  Compressive external forces are positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import bisect

__all__ = [
    "PolynomialFn",
    "PlantModel",
    "PlantState",
    "Equilibrium",
    "OutOfRangeError",
    "InfeasibleTargetError",
    "eval_matrices",
    "static_characteristic",
    "find_equilibria",
    "voltage_for_target",
    "jacobian",
    "frozen_stability",
    "default_plant",
    "constant_test_plant",
    "load_plant",
    "save_plant",
]

_BOUND_SLACK = 1e-12
_SCAN_POINTS = 400
_ROOT_TOL = 1e-9


class OutOfRangeError(ValueError):
    """Raised when a scheduling value falls outside the model bounds."""


class InfeasibleTargetError(ValueError):
    """The requested operating point needs an input outside ``[0, u_max]``."""

    def __init__(self, message: str, u_required: float):
        super().__init__(message)
        self.u_required = u_required


@dataclass(frozen=True)
class PolynomialFn:
    """Polynomial ``sum(coeffs[j] * y**j)``; constant term first."""

    coeffs: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.coeffs))
        if not c:
            raise ValueError("polynomial needs at least one coefficient")
        if not all(np.isfinite(c)):
            raise ValueError(f"non-finite polynomial coefficient in {c}")
        object.__setattr__(self, "coeffs", c)

    def __call__(self, y):
        return npoly.polyval(y, self.coeffs)

    def derivative(self) -> "PolynomialFn":
        if len(self.coeffs) == 1:
            return PolynomialFn((0.0,))
        return PolynomialFn(tuple(npoly.polyder(self.coeffs)))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @classmethod
    def constant(cls, value: float) -> "PolynomialFn":
        return cls((value,))


@dataclass(frozen=True)
class PlantModel:
    a21: PolynomialFn
    a22: PolynomialFn
    a23: PolynomialFn
    a31: PolynomialFn
    b21: PolynomialFn
    a33: float
    m: float
    y_min: float
    y_max: float
    u_max: float
    name: str = field(default="plant", compare=False)

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"mass must be positive, got {self.m}")
        if not self.a33 < 0:
            raise ValueError(f"a33 must be negative (stable relaxation), got {self.a33}")
        if not self.u_max > 0:
            raise ValueError(f"u_max must be positive, got {self.u_max}")
        if not self.y_min < self.y_max:
            raise ValueError("y_min must be below y_max")
        ys = np.linspace(self.y_min, self.y_max, _SCAN_POINTS)
        b = self.b21(ys)
        if np.any(b == 0) or np.any(np.sign(b) != np.sign(b[0])):
            raise ValueError("b21(y) vanishes or changes sign inside the bounds")
        for r in np.roots(self.b21.coeffs[::-1]) if self.b21.degree > 0 else ():
            if abs(r.imag) < 1e-12 and self.y_min <= r.real <= self.y_max:
                raise ValueError(f"b21 has a root at y={r.real:.6g} inside the bounds")

    @property
    def stroke(self) -> float:
        return self.y_max - self.y_min

    def stiffness_coefficient(self, y):
        """Long-term coefficient ``a21 - a23*a31/a33`` (x3 relaxed)."""
        return self.a21(y) - self.a23(y) * self.a31(y) / self.a33

    def in_bounds(self, y) -> bool:
        return self.y_min - _BOUND_SLACK <= y <= self.y_max + _BOUND_SLACK

    def to_dict(self) -> dict:
        return {
            "a21": list(self.a21.coeffs),
            "a22": list(self.a22.coeffs),
            "a23": list(self.a23.coeffs),
            "a31": list(self.a31.coeffs),
            "b21": list(self.b21.coeffs),
            "a33": self.a33,
            "m": self.m,
            "y_min": self.y_min,
            "y_max": self.y_max,
            "u_max": self.u_max,
        }

    @classmethod
    def from_dict(cls, d: dict, name: str = "plant") -> "PlantModel":
        polys = {k: PolynomialFn(tuple(d[k])) for k in ("a21", "a22", "a23", "a31", "b21")}
        return cls(
            **polys,
            a33=float(d["a33"]),
            m=float(d["m"]),
            y_min=float(d["y_min"]),
            y_max=float(d["y_max"]),
            u_max=float(d["u_max"]),
            name=name,
        )


@dataclass(frozen=True)
class PlantState:
    x1: float
    x2: float
    x3: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x1, self.x2, self.x3])):
            raise ValueError("plant state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3])


@dataclass(frozen=True)
class Equilibrium:
    y_eq: float
    x3_eq: float
    stability: str  # "stable" | "unstable"
    eigenvalues: tuple[complex, ...] = ()
    residual: float = 0.0

    @property
    def stable(self) -> bool:
        return self.stability == "stable"


def _check_y(model: PlantModel, y: float) -> None:
    if not np.isfinite(y) or not model.in_bounds(y):
        raise OutOfRangeError(f"y={y!r} outside [{model.y_min}, {model.y_max}]")


def eval_matrices(model: PlantModel, y: float):
    """Frozen ``(A, B_f, B_u, C)`` at displacement ``y``."""
    _check_y(model, y)
    A = np.array(
        [
            [0.0, 1.0, 0.0],
            [model.a21(y), model.a22(y), model.a23(y)],
            [model.a31(y), 0.0, model.a33],
        ]
    )
    B_f = np.array([0.0, -1.0 / model.m, 0.0])
    B_u = np.array([0.0, model.b21(y), 0.0])
    C = np.array([[1.0, 0.0, 0.0]])
    return A, B_f, B_u, C


def static_characteristic(model: PlantModel, y: float, u: float) -> float:
    """External force (N) holding the actuator at rest at ``y`` under input ``u``.

    Setting the state derivative to zero gives ``x3 = -a31(y) y / a33`` and
    ``f = m * ((a21 - a23 a31 / a33)(y) * y + b21(y) * u)``.
    """
    _check_y(model, y)
    if not (-_BOUND_SLACK <= u <= model.u_max + _BOUND_SLACK):
        raise ValueError(f"u={u!r} outside [0, {model.u_max}]")
    return float(model.m * (model.stiffness_coefficient(y) * y + model.b21(y) * u))


def jacobian(model: PlantModel, y: float, u: float, x2: float = 0.0, x3: float | None = None):
    """Jacobian of the nonlinear vector field at ``(y, x2, x3)`` with input ``u``.

    Unlike the frozen ``A(y)`` this includes the derivative of the polynomial
    entries with respect to the displacement.
    """
    if x3 is None:
        x3 = -model.a31(y) * y / model.a33
    d = lambda p: p.derivative()(y)  # noqa: E731
    j21 = model.a21(y) + d(model.a21) * y + d(model.a22) * x2 + d(model.a23) * x3 + d(model.b21) * u
    j31 = model.a31(y) + d(model.a31) * y
    return np.array(
        [
            [0.0, 1.0, 0.0],
            [j21, model.a22(y), model.a23(y)],
            [j31, 0.0, model.a33],
        ]
    )


def frozen_stability(model: PlantModel, y: float) -> str:
    """Diagnostic classification from the frozen ``A(y)`` only."""
    A, *_ = eval_matrices(model, y)
    return "stable" if np.max(np.linalg.eigvals(A).real) < 0 else "unstable"


def find_equilibria(model: PlantModel, u: float, f_ext: float, tol: float = _ROOT_TOL) -> list[Equilibrium]:
    """All rest points with input ``u`` under constant external force ``f_ext``.

    Roots of ``static_characteristic(y, u) - f_ext`` are bracketed on a
    400-point scan of the bounds and refined by bisection.  Each root is
    classified from the eigenvalues of the full linearization.
    """
    if not (-_BOUND_SLACK <= u <= model.u_max + _BOUND_SLACK):
        raise ValueError(f"u={u!r} outside [0, {model.u_max}]")

    def h(y):
        return static_characteristic(model, y, u) - f_ext

    ys = np.linspace(model.y_min, model.y_max, _SCAN_POINTS)
    hs = np.array([h(y) for y in ys])
    roots: list[float] = []
    for k in range(len(ys)):
        if hs[k] == 0.0:
            roots.append(float(ys[k]))
        elif k + 1 < len(ys) and hs[k] * hs[k + 1] < 0:
            roots.append(float(bisect(h, ys[k], ys[k + 1], xtol=tol, rtol=4 * np.finfo(float).eps)))

    out = []
    for y in roots:
        x3 = float(-model.a31(y) * y / model.a33)
        eig = np.linalg.eigvals(jacobian(model, y, u, 0.0, x3))
        out.append(
            Equilibrium(
                y_eq=y,
                x3_eq=x3,
                stability="stable" if np.max(eig.real) < 0 else "unstable",
                eigenvalues=tuple(complex(e) for e in eig),
                residual=abs(h(y)),
            )
        )
    return out


def voltage_for_target(model: PlantModel, y_target: float, f_ext: float) -> float:
    """Input ``u`` (kV^2) that makes ``y_target`` a rest point under ``f_ext``.

    ``static_characteristic`` is affine in ``u`` so the solve is direct.
    """
    _check_y(model, y_target)
    f0 = static_characteristic(model, y_target, 0.0)
    u = (f_ext - f0) / (model.m * model.b21(y_target))
    slack = 1e-12 * max(1.0, model.u_max)
    if u < -slack or u > model.u_max + slack:
        raise InfeasibleTargetError(
            f"target y={y_target} under f={f_ext} N needs u={u:.6g} kV^2, outside [0, {model.u_max}]",
            float(u),
        )
    return float(min(max(u, 0.0), model.u_max))


def default_plant() -> PlantModel:
    """Synthetic stand-in for the identified membrane + bi-stable spring.

    The identified coefficients are not public.  These are chosen so that the
    u = 0 force curve is non-monotonic on [0, 5] mm (open-loop bistable),
    b21 > 0, the relaxation pole sits at -0.5 1/s and u_max = 2.5 kV squared.
    """
    return PlantModel(
        a21=PolynomialFn((-15800.0, 6050.0, -730.0)),
        a22=PolynomialFn((-40.0,)),
        a23=PolynomialFn((500.0,)),
        a31=PolynomialFn((1.0,)),
        b21=PolynomialFn((15000.0, 300.0)),
        a33=-0.5,
        m=2.05e-6,
        y_min=0.0,
        y_max=5.0,
        u_max=6.25,
        name="synthetic_bistable",
    )


def constant_test_plant() -> PlantModel:
    """Constant-coefficient, monotonic plant used as a test fixture."""
    return PlantModel(
        a21=PolynomialFn.constant(-1000.0),
        a22=PolynomialFn.constant(-10.0),
        a23=PolynomialFn.constant(100.0),
        a31=PolynomialFn.constant(1.0),
        b21=PolynomialFn.constant(50.0),
        a33=-0.5,
        m=2.05e-6,
        y_min=0.0,
        y_max=5.0,
        u_max=6.25,
        name="constant_test",
    )


def load_plant(path) -> PlantModel:
    path = Path(path)
    with open(path) as fh:
        return PlantModel.from_dict(json.load(fh), name=path.stem)


def save_plant(model: PlantModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")
