"""Gridded LMI design of the partial-state interaction controller.

The bilinear design conditions (bounded-real inequality with ``P`` and
``K`` both unknown, plus ``||K W|| < gamma``) are convexified by a
block-diagonal Lyapunov matrix ``P = diag(P1, P2)`` split along the
measured/unmeasured partition, the change of variables ``Y = K P1`` and the
bound ``Q^T Q >= Q^T + Q - I`` with ``Q = W^-1 P1``.  ``gamma^2`` is then
minimised by one semidefinite program over all grid points, and the gain is
recovered as ``K = Y P1^-1``.

The SDP runs in diagonally scaled state coordinates (velocity measured in
units of the plant's natural frequency).  A diagonal change of coordinates
leaves the closed-loop L2 gain unchanged and keeps ``P`` block diagonal.
On top of that the Lyapunov variables are written ``P = s P~`` with a scalar
``s`` of the order ``|B_f|^2 / |A|``: the disturbance column carries ``1/m``
and would otherwise push ``P`` to ~1e6.  Results are mapped back to physical
units before being returned.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentedMatrices, AugmentedPlant
from .lmi import (
    FULL,
    NEG,
    POS,
    SCALAR,
    SYMMETRIC,
    AffineLmi,
    DecisionVar,
    LmiBuilder,
    SolveReport,
    check_feasible,
    solve_eigenvalue_problem,
)

log = logging.getLogger(__name__)

__all__ = [
    "Grid",
    "LinearDesignModel",
    "SynthesisProblem",
    "SynthesisResult",
    "BmiReport",
    "StructuralError",
    "InfeasibleDesignError",
    "CertificateMismatchError",
    "state_scaling",
    "assemble_lmi24",
    "assemble_lmi19",
    "assemble_lmi27",
    "assemble_lmi20",
    "variable_scale",
    "synthesize",
    "verify_bmi",
]

EPS24 = 1e-6
EPS27 = 1e-9
MAX_ROUNDS = 3


class StructuralError(ValueError):
    """A hypothesis of the convex reformulation does not hold."""


class InfeasibleDesignError(RuntimeError):
    def __init__(self, message: str, report: SolveReport | None = None, hints: list[str] | None = None):
        super().__init__(message)
        self.report = report
        self.hints = hints or []

    def to_dict(self) -> dict:
        return {
            "error": str(self),
            "status": self.report.status if self.report else None,
            "solver": self.report.solver if self.report else None,
            "hints": self.hints,
        }


class CertificateMismatchError(RuntimeError):
    def __init__(self, message: str, y: float | None = None):
        super().__init__(message)
        self.y = y


@dataclass(frozen=True)
class Grid:
    """Design and validation points in the scheduling variable (p = y)."""

    y: tuple[float, ...]
    validation: tuple[float, ...]

    def __post_init__(self):
        for name in ("y", "validation"):
            pts = np.asarray(getattr(self, name), dtype=float)
            if pts.size < 2 or np.any(np.diff(pts) <= 0):
                raise ValueError(f"grid '{name}' needs >= 2 strictly increasing points")
            object.__setattr__(self, name, tuple(float(v) for v in pts))

    @classmethod
    def uniform(cls, y_min: float, y_max: float, n: int = 25, n_validation: int = 101) -> "Grid":
        return cls(tuple(np.linspace(y_min, y_max, n)), tuple(np.linspace(y_min, y_max, n_validation)))

    def with_points(self, extra) -> "Grid":
        pts = np.unique(np.concatenate([self.y, np.asarray(extra, dtype=float)]))
        return Grid(tuple(pts), self.validation)

    def to_dict(self) -> dict:
        return {"y": list(self.y), "validation": list(self.validation)}


@dataclass(frozen=True)
class LinearDesignModel:
    """Parameter-independent design model; used for analytic oracles.

    ``n_m`` leading states are measured, the remaining ones are not.
    """

    A: np.ndarray
    B_f: np.ndarray
    B_u: np.ndarray
    C_z: np.ndarray
    D_f: float = 0.0
    n_m: int | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "A", A)
        for name in ("B_f", "B_u", "C_z"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.n_m is None:
            object.__setattr__(self, "n_m", A.shape[0])

    @property
    def n_a(self) -> int:
        return self.A.shape[0]

    def matrices(self, p: float, y: float | None = None) -> AugmentedMatrices:
        n = self.n_a
        return AugmentedMatrices(
            A=self.A.copy(),
            B_f=self.B_f.copy(),
            B_y0=np.zeros(n),
            B_u=self.B_u.copy(),
            C_z=self.C_z.copy(),
            D_f=float(self.D_f),
            D_y0=0.0,
            C_m=np.eye(n)[: self.n_m],
        )


@dataclass(frozen=True)
class SynthesisProblem:
    aug: AugmentedPlant | LinearDesignModel
    grid: Grid
    lam: float = 1.0
    W: np.ndarray | None = None
    eps24: float = EPS24
    eps27: float = EPS27
    scale_states: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        W = np.eye(self.aug.n_m) if self.W is None else np.atleast_2d(np.asarray(self.W, dtype=float))
        if W.shape != (self.aug.n_m, self.aug.n_m):
            raise ValueError(f"W must be {self.aug.n_m}x{self.aug.n_m}")
        if np.linalg.eigvalsh(0.5 * (W + W.T))[0] <= 0:
            raise ValueError("W must be positive definite")
        object.__setattr__(self, "W", W)

    @property
    def n_m(self) -> int:
        return self.aug.n_m

    @property
    def n_u(self) -> int:
        return self.aug.n_a - self.aug.n_m

    def variables(self):
        P1 = DecisionVar("P1", (self.n_m, self.n_m), SYMMETRIC)
        P2 = DecisionVar("P2", (self.n_u, self.n_u), SYMMETRIC) if self.n_u else None
        Y = DecisionVar("Y", (1, self.n_m), FULL)
        g2 = DecisionVar("gamma2", (1, 1), SCALAR)
        return P1, P2, Y, g2


def state_scaling(problem: SynthesisProblem) -> np.ndarray:
    """Diagonal coordinate scaling; only the velocity state is rescaled."""
    n = problem.aug.n_a
    T = np.ones(n)
    if not problem.scale_states or not isinstance(problem.aug, AugmentedPlant):
        return T
    plant = problem.aug.plant
    ys = np.asarray(problem.grid.validation)
    omega = float(np.sqrt(np.max(np.abs(plant.a21(ys)))))
    T[problem.aug.index["x2"]] = max(omega, 1.0)
    return T


def _scaled(mats: AugmentedMatrices, T: np.ndarray | None) -> AugmentedMatrices:
    if T is None:
        return mats
    Ti = 1.0 / T
    return AugmentedMatrices(
        A=Ti[:, None] * mats.A * T[None, :],
        B_f=Ti * mats.B_f,
        B_y0=Ti * mats.B_y0,
        B_u=Ti * mats.B_u,
        C_z=mats.C_z * T,
        D_f=mats.D_f,
        D_y0=mats.D_y0,
        C_m=mats.C_m,
    )


def _check_hurwitz_a22(problem: SynthesisProblem, mats: AugmentedMatrices) -> None:
    m = problem.n_m
    if problem.n_u == 0:
        return
    A22 = mats.A[m:, m:]
    if np.max(np.linalg.eigvals(A22).real) >= 0:
        raise StructuralError(
            f"unmeasured block A22={A22.tolist()} is not Hurwitz; the block-diagonal "
            "Lyapunov reformulation requires a stable unmeasured subsystem"
        )


def variable_scale(problem: SynthesisProblem, T: np.ndarray | None = None) -> float:
    """Scalar ``s`` for ``P = s P~``; 1 when the data are already balanced."""
    m = problem.n_m
    bf, a = 0.0, 0.0
    for y in problem.grid.y:
        mats = _scaled(problem.aug.matrices(y, y), T)
        bf = max(bf, float(np.linalg.norm(mats.B_f[:m])) ** 2)
        a = max(a, float(np.linalg.norm(mats.A, 2)))
    return max(1.0, bf / a) if a > 0 else 1.0


def assemble_lmi24(problem: SynthesisProblem, y: float, T: np.ndarray | None = None, s: float = 1.0) -> AffineLmi:
    """Convexified bounded-real LMI at one grid point (variables P1, P2, Y).

    With ``s != 1`` the variables are ``P~ = P / s``, ``Y~ = Y / s`` and the
    state rows/columns carry a congruence factor ``s^-1/2``; ``s = 1`` gives
    the unscaled inequality.
    """
    mats = _scaled(problem.aug.matrices(y, y), T)
    _check_hurwitz_a22(problem, mats)
    m, nu = problem.n_m, problem.n_u
    P1, P2, Y, _ = problem.variables()
    A, Bu, Bf, Cz = mats.A, mats.B_u, mats.B_f, mats.C_z
    A11 = A[:m, :m]
    B1u = Bu[:m, None]
    B1f = Bf[:m, None]
    C1z = Cz[None, :m]
    lam2 = problem.lam**2

    blocks = [("x_m", m)] + ([("x_u", nu)] if nu else []) + [("w", 1), ("z", 1)]
    b = LmiBuilder(blocks, sense=NEG, eps=problem.eps24, name=f"lmi24@y={y!r}")
    iw, iz = (2, 3) if nu else (1, 2)
    b.add(0, 0, A11, P1)
    b.add(0, 0, -B1u, Y)
    if nu:
        A12, A21, A22 = A[:m, m:], A[m:, :m], A[m:, m:]
        b.add(0, 1, A12, P2)
        b.add(0, 1, np.eye(m), P1, A21.T)
        b.add(1, 1, A22, P2)
        if np.any(Bf[m:] != 0) or np.any(Cz[m:] != 0):
            raise StructuralError("unmeasured states must not enter the disturbance input or z")
    b.add_const(0, iw, B1f / np.sqrt(s))
    b.add(0, iz, np.sqrt(s) * np.eye(m), P1, C1z.T)
    b.add_const(iw, iw, -np.eye(1))
    b.add_const(iw, iz, [[mats.D_f]])
    b.add_const(iz, iz, -lam2 * np.eye(1))
    return b.build()


def assemble_lmi19(problem: SynthesisProblem, y: float, K, T: np.ndarray | None = None) -> AffineLmi:
    """Original bounded-real inequality with fixed gain ``K`` (variable P)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    mats = problem.aug.matrices(y, y)
    n = problem.aug.n_a
    Acl = mats.A - np.outer(mats.B_u, K.ravel()) @ mats.C_m
    Bf, Cz = mats.B_f, mats.C_z
    if T is not None:
        Ti = 1.0 / T
        Acl = Ti[:, None] * Acl * T[None, :]
        Bf, Cz = Ti * Bf, Cz * T
    P = DecisionVar("P", (n, n), SYMMETRIC)
    b = LmiBuilder([("x_a", n), ("w", 1), ("z", 1)], sense=NEG, eps=problem.eps24, name=f"lmi19@y={y!r}")
    b.add(0, 0, Acl, P)
    b.add_const(0, 1, Bf[:, None])
    b.add(0, 2, np.eye(n), P, Cz[:, None])
    b.add_const(1, 1, -np.eye(1))
    b.add_const(1, 2, [[mats.D_f]])
    b.add_const(2, 2, -problem.lam**2 * np.eye(1))
    return b.build()


def assemble_lmi27(problem: SynthesisProblem, T: np.ndarray | None = None, s: float = 1.0) -> AffineLmi:
    """Linear sufficient condition for ``||Y P1^-1 W|| < gamma``.

    In scaled variables the scalar decision variable is ``gamma^2 / s``.
    """
    m = problem.n_m
    W = problem.W if T is None else (1.0 / T[:m])[:, None] * problem.W
    Wi = np.linalg.inv(W)
    P1, _, Y, g2 = problem.variables()
    b = LmiBuilder([("x_m", m), ("u", 1)], sense=POS, eps=problem.eps27, name="lmi27")
    b.add(0, 0, np.eye(m), P1, Wi.T)
    b.add_const(0, 0, -np.eye(m) / s)
    b.add(0, 1, np.eye(m), Y, np.eye(1), transpose=True)
    b.add_sym(1, [[1.0]], g2, [[1.0]])
    return b.build()


def assemble_lmi20(K, W, gamma: float) -> np.ndarray:
    """Numeric ``[[I, W^T K^T], [K W, gamma^2 I]]``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    KW = K @ np.atleast_2d(W)
    m = KW.shape[1]
    return np.block([[np.eye(m), KW.T], [KW, gamma**2 * np.eye(1)]])


def _positivity(var: DecisionVar, eps: float) -> AffineLmi:
    n = var.shape[0]
    b = LmiBuilder([(var.name, n)], sense=POS, eps=eps, name=f"{var.name}>0")
    b.add_sym(0, np.eye(n), var, np.eye(n))
    return b.build()


@dataclass
class SynthesisResult:
    K: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    Y: np.ndarray
    gamma: float
    norm_KW: float
    lam: float
    W: np.ndarray
    eps24: float
    eps27: float
    scaling: np.ndarray
    var_scale: float
    grid: Grid
    design_margins: list[float]
    validation_margins: list[float]
    closed_loop_max_real: list[float]
    solver: str
    solver_status: str
    status: str = "optimal"
    rounds: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def worst_design_margin(self) -> float:
        return float(min(self.design_margins))

    @property
    def worst_validation_margin(self) -> float:
        return float(min(self.validation_margins))

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "solver": self.solver,
            "solver_status": self.solver_status,
            "K": self.K.ravel().tolist(),
            "P1": self.P1.tolist(),
            "P2": self.P2.tolist(),
            "Y": self.Y.ravel().tolist(),
            "gamma": self.gamma,
            "norm_KW": self.norm_KW,
            "lambda": self.lam,
            "W": self.W.tolist(),
            "eps24": self.eps24,
            "eps27": self.eps27,
            "scaling": self.scaling.tolist(),
            "var_scale": self.var_scale,
            "grid": self.grid.to_dict(),
            "rounds": self.rounds,
            "worst_design_margin": self.worst_design_margin,
            "worst_validation_margin": self.worst_validation_margin,
            "design_margins": list(self.design_margins),
            "validation_margins": list(self.validation_margins),
            "closed_loop_max_real": list(self.closed_loop_max_real),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisResult":
        return cls(
            K=np.atleast_2d(np.array(d["K"], dtype=float)),
            P1=np.array(d["P1"], dtype=float),
            P2=np.atleast_2d(np.array(d["P2"], dtype=float)),
            Y=np.atleast_2d(np.array(d["Y"], dtype=float)),
            gamma=float(d["gamma"]),
            norm_KW=float(d["norm_KW"]),
            lam=float(d["lambda"]),
            W=np.array(d["W"], dtype=float),
            eps24=float(d["eps24"]),
            eps27=float(d["eps27"]),
            scaling=np.array(d["scaling"], dtype=float),
            var_scale=float(d.get("var_scale", 1.0)),
            grid=Grid(tuple(d["grid"]["y"]), tuple(d["grid"]["validation"])),
            design_margins=list(d["design_margins"]),
            validation_margins=list(d["validation_margins"]),
            closed_loop_max_real=list(d["closed_loop_max_real"]),
            solver=d.get("solver", ""),
            solver_status=d.get("solver_status", ""),
            status=d.get("status", "optimal"),
            rounds=int(d.get("rounds", 1)),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SynthesisResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _relaxation_hints(problem: SynthesisProblem) -> list[str]:
    hints = [
        f"increase the L2 bound lambda (currently {problem.lam:g})",
        "make the shaping filter less demanding (smaller omega_s or larger M_s)",
        "shrink the operating interval or densify the design grid",
    ]
    mats = problem.aug.matrices(problem.grid.y[0], problem.grid.y[0])
    if problem.lam <= abs(mats.D_f):
        hints.insert(0, f"lambda must exceed the direct feedthrough |D_f| = {abs(mats.D_f):g}")
    return hints


def _closed_loop_max_real(problem: SynthesisProblem, K: np.ndarray, y: float) -> float:
    mats = problem.aug.matrices(y, y)
    Acl = mats.A - np.outer(mats.B_u, K.ravel()) @ mats.C_m
    return float(np.max(np.linalg.eigvals(Acl).real))


def _scale_ladder(s: float) -> list[float]:
    """Variable scales to try: the heuristic first, then decades down to 1."""
    out = [s]
    while out[-1] > 1.0:
        out.append(max(out[-1] / 10.0, 1.0))
    return out


def synthesize(problem: SynthesisProblem) -> SynthesisResult:
    """Minimise gamma^2 subject to the gridded LMIs; recover ``K = Y P1^-1``."""
    m, nu = problem.n_m, problem.n_u
    if isinstance(problem.aug, AugmentedPlant):
        plant = problem.aug.plant
        b = plant.b21(np.linspace(plant.y_min, plant.y_max, 1001))
        if np.any(np.sign(b) != np.sign(b[0])) or np.any(b == 0):
            raise StructuralError("b21(y) changes sign inside the bounds; refusing to synthesize")
    T = state_scaling(problem)
    s = variable_scale(problem, T)
    P1v, P2v, Yv, g2v = problem.variables()
    grid = problem.grid

    for rnd in range(1, MAX_ROUNDS + 2):
        cons = [_positivity(P1v, problem.eps24)]
        if nu:
            cons.append(_positivity(P2v, problem.eps24))
        report = None
        for s_try in _scale_ladder(s):
            scaled = cons + [assemble_lmi24(problem, y, T, s_try) for y in grid.y]
            scaled.append(assemble_lmi27(problem, T, s_try))
            report = solve_eigenvalue_problem(scaled, objective=g2v)
            if report.status != "numerical_failure":
                break
            log.info("numerical failure at variable scale %g, retrying smaller", s_try)
        s = s_try
        lmi24 = [assemble_lmi24(problem, y, T, s) for y in grid.y]
        if not report.ok:
            raise InfeasibleDesignError(
                f"LMI design problem {report.status} (solver {report.solver}: {report.solver_status or report.message})",
                report,
                _relaxation_hints(problem),
            )
        vals = report.values
        failing = []
        val_margins = []
        for y in grid.validation:
            _, mg = check_feasible(assemble_lmi24(problem, y, T, s), vals, eps=0.0)
            val_margins.append(mg)
            if mg <= 0:
                failing.append(y)
        if not failing:
            break
        if rnd > MAX_ROUNDS:
            raise InfeasibleDesignError(
                f"validation grid still violated at {len(failing)} points after {MAX_ROUNDS} densification rounds",
                report,
                _relaxation_hints(problem),
            )
        log.info("round %d: %d validation points violated, densifying", rnd, len(failing))
        grid = grid.with_points(failing)

    P1h = vals["P1"]
    Yh = np.atleast_2d(vals["Y"])
    Kh = np.linalg.solve(P1h.T, Yh.T).T  # Y P1^-1
    Tm = T[:m]
    K = Kh / Tm[None, :]
    P1 = s * Tm[:, None] * P1h * Tm[None, :]
    P2 = s * (T[m:, None] * vals["P2"] * T[None, m:]) if nu else np.zeros((0, 0))
    gamma2 = s * float(vals["gamma2"][0, 0])
    gamma = float(np.sqrt(max(gamma2, 0.0)))
    norm_KW = float(np.linalg.norm(K @ problem.W, 2))
    design_margins = [check_feasible(c, vals, eps=0.0)[1] for c in lmi24]
    return SynthesisResult(
        K=K,
        P1=P1,
        P2=P2,
        Y=K @ P1,
        gamma=gamma,
        norm_KW=norm_KW,
        lam=problem.lam,
        W=problem.W,
        eps24=problem.eps24,
        eps27=problem.eps27,
        scaling=T,
        var_scale=s,
        grid=grid,
        design_margins=design_margins,
        validation_margins=val_margins,
        closed_loop_max_real=[_closed_loop_max_real(problem, K, y) for y in grid.validation],
        solver=report.solver,
        solver_status=report.solver_status,
        status=report.status,
        rounds=rnd,
    )


@dataclass
class BmiReport:
    points: list[float]
    margins19: list[float]
    margin20: float
    min_eig_P: float
    passed: bool
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "margin20": self.margin20,
            "min_eig_P": self.min_eig_P,
            "worst_margin19": min(self.margins19),
            "points": list(self.points),
            "margins19": list(self.margins19),
            "failures": list(self.failures),
        }


def verify_bmi(
    problem: SynthesisProblem,
    result: SynthesisResult,
    raise_on_failure: bool = True,
    points=None,
) -> BmiReport:
    """Check the original (non-convex) conditions at the recovered solution.

    The Lyapunov matrix is ``diag(P1, P2)`` and the gain is ``result.K``; the
    eigenvalue test runs after the stored diagonal scaling so that margins
    are comparable with the design margins.
    """
    T = np.asarray(result.scaling, dtype=float)
    n = problem.aug.n_a
    P = np.zeros((n, n))
    m = problem.n_m
    P[:m, :m] = result.P1
    if problem.n_u:
        P[m:, m:] = result.P2
    s = result.var_scale
    Ph = P / (s * T[:, None] * T[None, :])
    min_eig_P = float(np.linalg.eigvalsh(Ph)[0])
    failures = []
    if min_eig_P <= 0:
        failures.append(f"Lyapunov matrix not positive definite (min eig {min_eig_P:.3g})")

    pts = list(result.grid.validation if points is None else points)
    margins = []
    for y in pts:
        lmi = assemble_lmi19(problem, y, result.K)
        scale = np.concatenate([1.0 / (T * np.sqrt(s)), [1.0, 1.0]])
        _, mg = check_feasible(lmi, {"P": P}, eps=0.0, scale=scale)
        margins.append(mg)
        if mg <= 0:
            failures.append(f"bounded-real inequality violated at y={y!r} (margin {mg:.3g})")

    M20 = assemble_lmi20(result.K, problem.W, result.gamma)
    margin20 = float(np.linalg.eigvalsh(M20)[0])
    if margin20 <= 0:
        failures.append(f"||K W|| = {np.linalg.norm(result.K @ problem.W, 2):.6g} not below gamma = {result.gamma:.6g}")

    rep = BmiReport(pts, margins, margin20, min_eig_P, not failures, failures)
    if failures and raise_on_failure:
        bad = next((y for y, mg in zip(pts, margins) if mg <= 0), None)
        raise CertificateMismatchError("; ".join(failures[:3]), y=bad)
    return rep
