"""Augmented plant: shaping filter + impedance target + actuator.

State ordering is ``[x_s | x_i | x1 x2 | x3]`` so the unmeasured
viscoelastic state is always the trailing coordinate and the measured vector
``x_m`` is simply ``x_a[:-1]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .impedance import ImpedanceSpec, ShapingFilter
from .plant import PlantModel, eval_matrices

__all__ = [
    "AugmentedMatrices",
    "AugmentedPlant",
    "PartitionedClosedLoop",
    "AssemblyError",
    "build_augmented",
    "partition",
    "dump_blocks_csv",
]


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentedMatrices:
    A: np.ndarray  # (n_a, n_a)
    B_f: np.ndarray  # (n_a,)
    B_y0: np.ndarray  # (n_a,)
    B_u: np.ndarray  # (n_a,)
    C_z: np.ndarray  # (n_a,)
    D_f: float
    D_y0: float
    C_m: np.ndarray  # (n_a - 1, n_a)


@dataclass(frozen=True)
class AugmentedPlant:
    plant: PlantModel
    spec: ImpedanceSpec
    filter: ShapingFilter

    @property
    def n_s(self) -> int:
        return self.filter.n_s

    @property
    def n_i(self) -> int:
        return self.spec.n_i

    @property
    def n_a(self) -> int:
        return self.n_s + self.n_i + 3

    @property
    def n_m(self) -> int:
        return self.n_a - 1

    @property
    def measured(self) -> np.ndarray:
        return np.arange(self.n_a - 1)

    @property
    def unmeasured(self) -> np.ndarray:
        return np.array([self.n_a - 1])

    @property
    def index(self) -> dict:
        ns, ni = self.n_s, self.n_i
        return {
            "x_s": slice(0, ns),
            "x_i": slice(ns, ns + ni),
            "x1": ns + ni,
            "x2": ns + ni + 1,
            "x3": ns + ni + 2,
        }

    def selector(self) -> np.ndarray:
        return np.eye(self.n_a)[:-1]

    def matrices(self, p: float, y: float | None = None) -> AugmentedMatrices:
        """Evaluate every block at scheduling value ``p`` and displacement ``y``."""
        y = p if y is None else y
        As, Bs, Cs, Ds = self.filter.matrices(p)
        Ai, Bfi, By0i, Ci, Dfi, Dy0i = self.spec.matrices(p)
        A, Bf, Bu, C = eval_matrices(self.plant, y)
        ns, ni, na = self.n_s, self.n_i, self.n_a
        C = C.ravel()
        xs, xi, xp = slice(0, ns), slice(ns, ns + ni), slice(ns + ni, na)

        Aa = np.zeros((na, na))
        Aa[xs, xs] = As
        Aa[xs, xi] = -Bs * Ci
        Aa[xs, xp] = Bs * C
        Aa[xi, xi] = Ai
        Aa[xp, xp] = A

        B_f = np.zeros(na)
        B_f[xs] = -Bs * Dfi
        B_f[xi] = Bfi
        B_f[xp] = Bf

        B_y0 = np.zeros(na)
        B_y0[xs] = -Bs * Dy0i
        B_y0[xi] = By0i

        B_u = np.zeros(na)
        B_u[xp] = Bu

        # z = Cs x_s + Ds e_i with e_i = C x - (Ci x_i + Dfi f + Dy0i y0)
        C_z = np.zeros(na)
        C_z[xs] = Cs
        C_z[xi] = -Ds * Ci
        C_z[xp] = Ds * C
        return AugmentedMatrices(
            A=Aa,
            B_f=B_f,
            B_y0=B_y0,
            B_u=B_u,
            C_z=C_z,
            D_f=float(-Ds * Dfi),
            D_y0=float(-Ds * Dy0i),
            C_m=self.selector(),
        )


def build_augmented(plant: PlantModel, spec: ImpedanceSpec, filt: ShapingFilter) -> AugmentedPlant:
    if filt.n_s != 1:
        raise AssemblyError("only single-state shaping filters are supported")
    if filt.kind != spec.kind:
        raise AssemblyError(f"filter built for {filt.kind!r} but spec is {spec.kind!r}")
    p = 0.5 * (plant.y_min + plant.y_max)
    Ai, Bfi, By0i, Ci, _, _ = spec.matrices(p)
    ni = spec.n_i
    if Ai.shape != (ni, ni) or Bfi.shape != (ni,) or By0i.shape != (ni,) or Ci.shape != (ni,):
        raise AssemblyError("impedance spec matrices have inconsistent dimensions")
    return AugmentedPlant(plant=plant, spec=spec, filter=filt)


@dataclass(frozen=True)
class PartitionedClosedLoop:
    A11_cl: np.ndarray  # A11 - B1u K
    A11: np.ndarray
    A12: np.ndarray  # (n_m, 1)
    A21: np.ndarray  # (1, n_m)
    A22: np.ndarray  # (1, 1)
    B1u: np.ndarray  # (n_m, 1)
    B2u: np.ndarray  # (1, 1)
    B1f: np.ndarray
    B2f: np.ndarray
    B1y0: np.ndarray
    B2y0: np.ndarray
    C1z: np.ndarray  # (1, n_m)
    C2z: np.ndarray  # (1, 1)
    D_f: float
    D_y0: float
    K: np.ndarray

    def reassemble(self) -> np.ndarray:
        """Closed-loop ``A_a - B_ua K C_ma`` rebuilt from the blocks."""
        top = np.hstack([self.A11_cl, self.A12])
        bottom = np.hstack([self.A21 - self.B2u @ self.K, self.A22])
        return np.vstack([top, bottom])


def partition(aug: AugmentedPlant, K, p: float, y: float | None = None) -> PartitionedClosedLoop:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (1, aug.n_m):
        raise ValueError(f"K must have {aug.n_m} entries, got shape {K.shape}")
    mats = aug.matrices(p, y)
    m = aug.n_m
    A = mats.A
    B1u = mats.B_u[:m, None]
    return PartitionedClosedLoop(
        A11_cl=A[:m, :m] - B1u @ K,
        A11=A[:m, :m],
        A12=A[:m, m:],
        A21=A[m:, :m],
        A22=A[m:, m:],
        B1u=B1u,
        B2u=mats.B_u[m:, None],
        B1f=mats.B_f[:m, None],
        B2f=mats.B_f[m:, None],
        B1y0=mats.B_y0[:m, None],
        B2y0=mats.B_y0[m:, None],
        C1z=mats.C_z[None, :m],
        C2z=mats.C_z[None, m:],
        D_f=mats.D_f,
        D_y0=mats.D_y0,
        K=K,
    )


def dump_blocks_csv(aug: AugmentedPlant, ys, path) -> None:
    """Long-format CSV of every evaluated block over a displacement grid."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y_mm", "block", "row", "col", "value"])
        for y in ys:
            mats = aug.matrices(float(y))
            for name in ("A", "B_f", "B_y0", "B_u", "C_z", "D_f", "D_y0", "C_m"):
                M = np.atleast_2d(getattr(mats, name))
                if name in ("B_f", "B_y0", "B_u"):
                    M = M.T
                for (i, j), v in np.ndenumerate(M):
                    w.writerow([repr(float(y)), name, i, j, repr(float(v))])
