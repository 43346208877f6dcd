"""Affine matrix inequalities: data model, assembly, verification, solving.

An :class:`AffineLmi` is a sum of terms ``L @ X @ R`` (``X`` a decision
variable or the identity for constants).  Terms flagged ``he`` contribute
``T + T.T``, which is how off-diagonal blocks and ``He{.}`` expressions are
written; unflagged terms must be symmetric on their own.

Certificates never trust the solver: :func:`check_feasible` re-assembles the
numeric matrix and looks at its extreme eigenvalue.
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "DecisionVar",
    "Term",
    "AffineLmi",
    "LmiBuilder",
    "SolveReport",
    "MissingVariableError",
    "assemble",
    "check_feasible",
    "solve_eigenvalue_problem",
    "dump_constraints",
]

SYMMETRIC, FULL, SCALAR = "symmetric", "full", "scalar"
NEG, POS = "neg", "pos"  # M < -eps I, M > eps I


class MissingVariableError(KeyError):
    pass


@dataclass(frozen=True)
class DecisionVar:
    name: str
    shape: tuple[int, int]
    structure: str = FULL

    def __post_init__(self):
        r, c = self.shape
        if r <= 0 or c <= 0:
            raise ValueError(f"{self.name}: shape must be positive, got {self.shape}")
        if self.structure == SYMMETRIC and r != c:
            raise ValueError(f"{self.name}: symmetric variable must be square")
        if self.structure == SCALAR and self.shape != (1, 1):
            raise ValueError(f"{self.name}: scalar variable must be 1x1")


@dataclass(frozen=True)
class Term:
    left: np.ndarray
    var: DecisionVar | None
    right: np.ndarray
    transpose: bool = False
    he: bool = False

    def value(self, assignment: dict) -> np.ndarray:
        if self.var is None:
            X = np.eye(self.left.shape[1])
        else:
            try:
                X = np.asarray(assignment[self.var.name], dtype=float).reshape(self.var.shape)
            except KeyError:
                raise MissingVariableError(self.var.name) from None
        if self.transpose:
            X = X.T
        T = self.left @ X @ self.right
        return T + T.T if self.he else T


@dataclass
class AffineLmi:
    """``sum(terms) < -eps I`` (sense ``neg``) or ``> eps I`` (sense ``pos``)."""

    size: int
    terms: list[Term] = field(default_factory=list)
    sense: str = NEG
    eps: float = 0.0
    blocks: tuple[tuple[str, int], ...] = ()
    name: str = ""

    @property
    def variables(self) -> dict[str, DecisionVar]:
        return {t.var.name: t.var for t in self.terms if t.var is not None}

    def scaled(self, factor: float) -> "AffineLmi":
        """Positive rescaling; same feasible set up to the margin ``eps``."""
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        terms = [Term(t.left * factor, t.var, t.right, t.transpose, t.he) for t in self.terms]
        return AffineLmi(self.size, terms, self.sense, self.eps, self.blocks, self.name)

    def congruence(self, d) -> "AffineLmi":
        """``D M D`` with ``D = diag(d)``, d > 0; definiteness is preserved."""
        d = np.asarray(d, dtype=float)
        if d.shape != (self.size,) or np.any(d <= 0):
            raise ValueError("congruence needs a positive vector of length size")
        terms = [Term(d[:, None] * t.left, t.var, t.right * d[None, :], t.transpose, t.he) for t in self.terms]
        return AffineLmi(self.size, terms, self.sense, self.eps, self.blocks, self.name)

    def constant_part(self) -> np.ndarray:
        return assemble(AffineLmi(self.size, [t for t in self.terms if t.var is None]), {})


class LmiBuilder:
    """Place terms into a symmetric block layout.

    ``add(i, j, left, var, right)`` puts ``left @ var @ right`` at block
    ``(i, j)`` and its transpose at ``(j, i)``; on the diagonal it adds
    ``He{left @ var @ right}``.  ``add_sym`` places an already symmetric term
    on a diagonal block.
    """

    def __init__(self, blocks, sense: str = NEG, eps: float = 0.0, name: str = ""):
        self.blocks = tuple((str(n), int(s)) for n, s in blocks)
        self.offsets = np.cumsum([0] + [s for _, s in self.blocks])
        self.size = int(self.offsets[-1])
        self.sense, self.eps, self.name = sense, eps, name
        self.terms: list[Term] = []

    def _embed(self, i: int) -> np.ndarray:
        E = np.zeros((self.size, self.blocks[i][1]))
        E[self.offsets[i] : self.offsets[i + 1]] = np.eye(self.blocks[i][1])
        return E

    def add(self, i, j, left, var=None, right=None, transpose=False):
        left = np.atleast_2d(np.asarray(left, dtype=float))
        if right is None:
            right = np.eye(var.shape[0 if transpose else 1]) if var is not None else np.eye(left.shape[1])
        right = np.atleast_2d(np.asarray(right, dtype=float))
        if var is None and left.shape[1] != right.shape[0]:
            # constant block given as a single matrix in ``left``
            right = np.eye(left.shape[1])
        Ei, Ej = self._embed(i), self._embed(j)
        self.terms.append(Term(Ei @ left, var, right @ Ej.T, transpose, he=True))
        return self

    def add_sym(self, i, left, var=None, right=None):
        left = np.atleast_2d(np.asarray(left, dtype=float))
        if right is None:
            right = left.T if var is not None else np.eye(left.shape[1])
        Ei = self._embed(i)
        self.terms.append(Term(Ei @ left, var, np.atleast_2d(right) @ Ei.T, he=False))
        return self

    def add_const(self, i, j, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if i == j:
            return self.add_sym(i, M)
        return self.add(i, j, M)

    def build(self) -> AffineLmi:
        return AffineLmi(self.size, list(self.terms), self.sense, self.eps, self.blocks, self.name)


def assemble(lmi: AffineLmi, assignment: dict) -> np.ndarray:
    M = np.zeros((lmi.size, lmi.size))
    for t in lmi.terms:
        M += t.value(assignment)
    return 0.5 * (M + M.T)


def check_feasible(lmi: AffineLmi, assignment: dict, eps: float | None = None, scale=None):
    """``(feasible, margin)``; margin is the slack of the extreme eigenvalue.

    ``scale`` is an optional positive diagonal congruence applied before the
    eigenvalue test (it preserves definiteness, only conditioning changes).
    """
    eps = lmi.eps if eps is None else eps
    M = assemble(lmi, assignment)
    if not np.all(np.isfinite(M)):
        raise ValueError(f"non-finite entries in assembled LMI {lmi.name!r}")
    if scale is not None:
        d = np.asarray(scale, dtype=float)
        M = d[:, None] * M * d[None, :]
    w = np.linalg.eigvalsh(M)
    margin = float(-w[-1]) if lmi.sense == NEG else float(w[0])
    return margin > eps, margin


@dataclass
class SolveReport:
    status: str  # optimal | feasible | infeasible | numerical_failure
    values: dict = field(default_factory=dict)
    objective: float | None = None
    max_residual: float = float("nan")
    margins: list[float] = field(default_factory=list)
    solver: str = ""
    solver_status: str = ""
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


def _cvx_expr(lmi: AffineLmi, cvars: dict):
    import cvxpy as cp

    total = None
    for t in lmi.terms:
        if t.var is None:
            T = t.left @ t.right
            T = T + T.T if t.he else T
            part = cp.Constant(T)
        else:
            X = cvars[t.var.name]
            if t.transpose:
                X = X.T
            T = t.left @ X @ t.right
            part = T + T.T if t.he else T
        total = part if total is None else total + part
    return 0.5 * (total + total.T)


def solve_eigenvalue_problem(
    constraints: list[AffineLmi],
    objective: DecisionVar | str | None = None,
    solvers=("CLARABEL", "SCS"),
    residual_tol: float = 1e-7,
    backoff=(1e-7, 1e-5, 1e-4),
) -> SolveReport:
    """Minimize a scalar decision variable subject to every constraint.

    The default backend is cvxpy; solvers are tried in order until one
    returns a usable answer.  The returned assignment is always re-checked
    with :func:`check_feasible`.  Constraints are handed to the solver with
    their margin raised by ``backoff`` so that interior-point round-off does
    not land the answer just outside the original set; a sequence of backoffs
    is tried in order, each with every solver, until verification passes.
    """
    import cvxpy as cp

    variables: dict[str, DecisionVar] = {}
    for c in constraints:
        variables.update(c.variables)
    obj_name = objective.name if isinstance(objective, DecisionVar) else objective
    if obj_name is not None and obj_name not in variables:
        raise MissingVariableError(obj_name)

    cvars = {}
    for name, v in variables.items():
        cvars[name] = cp.Variable(v.shape, symmetric=(v.structure == SYMMETRIC), name=name)
    exprs = [(_cvx_expr(c, cvars), c) for c in constraints]
    goal = cp.Minimize(cvars[obj_name][0, 0]) if obj_name else cp.Minimize(0)
    backoffs = (backoff,) if np.isscalar(backoff) else tuple(backoff)

    last = SolveReport(status="numerical_failure", message="no solver attempted")
    for b in backoffs:
        cons = []
        for expr, c in exprs:
            I = np.eye(c.size)
            e = c.eps + b
            cons.append(expr << -e * I if c.sense == NEG else expr >> e * I)
        prob = cp.Problem(goal, cons)
        for solver in solvers:
            try:
                with warnings.catch_warnings():
                    # accuracy is judged below by the eigenvalue verifier
                    warnings.simplefilter("ignore", UserWarning)
                    prob.solve(solver=solver)
            except (cp.error.SolverError, ArithmeticError, ValueError) as exc:
                log.debug("solver %s failed: %s", solver, exc)
                last = SolveReport(status="numerical_failure", solver=solver, message=str(exc))
                continue
            st = prob.status
            if st in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                return SolveReport(status="infeasible", solver=solver, solver_status=st)
            if st in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE) or any(v.value is None for v in cvars.values()):
                last = SolveReport(status="numerical_failure", solver=solver, solver_status=st)
                continue
            values = {n: np.array(v.value, dtype=float) for n, v in cvars.items()}
            for n, v in variables.items():
                if v.structure == SYMMETRIC:
                    values[n] = 0.5 * (values[n] + values[n].T)
            margins = [check_feasible(c, values, eps=0.0)[1] for c in constraints]
            residual = max(max(c.eps - mg, 0.0) for c, mg in zip(constraints, margins)) if constraints else 0.0
            ok = residual <= residual_tol and all(mg > 0 for mg in margins)
            rep = SolveReport(
                status=("optimal" if st == cp.OPTIMAL else "feasible") if ok else "numerical_failure",
                values=values,
                objective=float(values[obj_name][0, 0]) if obj_name else None,
                max_residual=residual,
                margins=margins,
                solver=solver,
                solver_status=st,
                message=f"backoff {b:g}",
            )
            if ok:
                return rep
            log.debug("solver %s with backoff %g missed the margins by %g", solver, b, residual)
            last = rep
    return last


def dump_constraints(constraints: list[AffineLmi]) -> str:
    """Plain-text listing: variable table followed by every term."""
    out = io.StringIO()
    variables: dict[str, DecisionVar] = {}
    for c in constraints:
        variables.update(c.variables)
    out.write("# variables\n")
    for name, v in sorted(variables.items()):
        out.write(f"{name}\t{v.shape[0]}x{v.shape[1]}\t{v.structure}\n")
    with np.printoptions(precision=17, linewidth=10**6, threshold=10**9):
        for k, c in enumerate(constraints):
            rel = "<" if c.sense == NEG else ">"
            out.write(f"\n# constraint {k} {c.name} size={c.size} {rel} {'-' if c.sense == NEG else ''}{c.eps!r} I\n")
            if c.blocks:
                out.write("# blocks " + " ".join(f"{n}:{s}" for n, s in c.blocks) + "\n")
            for j, t in enumerate(c.terms):
                vname = t.var.name if t.var is not None else "I"
                flags = ("T" if t.transpose else "") + ("He" if t.he else "")
                out.write(f"term {j} var={vname} {flags}\n")
                out.write(f"  L={t.left.tolist()!r}\n  R={t.right.tolist()!r}\n")
    return out.getvalue()
