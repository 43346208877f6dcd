"""Static SVG figures for trajectories and estimator traces.

Output is deterministic: the SVG hash salt is fixed and no date is written,
so identical data give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["trajectory_panels", "locus_plot", "estimator_panels", "save_svg"]

STYLE = {
    "svg.hashsalt": "deaforge",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.0,
    "axes.grid": True,
    "grid.linewidth": 0.3,
    "grid.alpha": 0.5,
}
COLORS = ["#1b6ca8", "#d95f02", "#444444", "#7570b3"]
_MAX_POINTS = 4000


def _thin(*arrays):
    n = len(arrays[0])
    step = max(1, n // _MAX_POINTS)
    return [np.asarray(a)[::step] for a in arrays]


def save_svg(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def trajectory_panels(traj, path, title: str = "") -> Path:
    """Force, displacement against its target, interaction error and input."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(4, 1, sharex=True, figsize=(6.4, 7.2))
        t, f, y, ys, e, u = _thin(traj.t, traj.f, traj.y, traj.y_star, traj.e_i, traj.u)
        ax[0].plot(t, f, color=COLORS[0])
        ax[0].set_ylabel("f [N]")
        ax[1].plot(t, ys, color=COLORS[2], ls="--", label="y*")
        ax[1].plot(t, y, color=COLORS[0], label="y")
        if traj.y_meas is not None:
            (ym,) = _thin(traj.y_meas)
            ax[1].plot(t, ym, color=COLORS[1], lw=0.6, label="y (estimated)")
        ax[1].set_ylabel("y [mm]")
        ax[1].legend(loc="best", fontsize=7)
        ax[2].plot(t, e, color=COLORS[1])
        ax[2].set_ylabel("e_i [mm]")
        ax[3].plot(t, u, color=COLORS[0])
        ax[3].set_ylabel("u [kV$^2$]")
        ax[3].set_xlabel("t [s]")
        if title:
            ax[0].set_title(title)
        fig.tight_layout()
    return save_svg(fig, path)


def locus_plot(traj, spec, path, title: str = "", skip: float = 0.0) -> Path:
    """Force-displacement locus with the desired static characteristic."""
    m = traj.t >= skip
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 4.0))
        f, y = _thin(traj.f[m], traj.y[m])
        ax.plot(f, y, color=COLORS[0], label="closed loop")
        fg = np.linspace(float(np.min(f)), float(np.max(f)), 50)
        yd = [spec.steady_state(v, p=float(yy)) for v, yy in zip(fg, np.interp(fg, np.sort(f), y[np.argsort(f)]))]
        ax.plot(fg, yd, color=COLORS[2], ls="--", label="desired")
        ax.set_xlabel("f [N]")
        ax.set_ylabel("y [mm]")
        ax.legend(loc="best", fontsize=7)
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return save_svg(fig, path)


def estimator_panels(trace, path, title: str = "") -> Path:
    """Resistance, capacitance and displacement estimates over time."""
    a = trace.arrays()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(3, 1, sharex=True, figsize=(6.4, 5.6))
        t, R, C, yh, yt = _thin(a["t"], a["R_hat"], a["C_hat"], a["y_hat"], a["y_true"])
        ax[0].plot(t, R * 1e-3, color=COLORS[0])
        ax[0].set_ylabel("R_e [k$\\Omega$]")
        ax[1].plot(t, C * 1e9, color=COLORS[0])
        ax[1].set_ylabel("C_e [nF]")
        ax[2].plot(t, yt, color=COLORS[2], ls="--", label="true")
        ax[2].plot(t, yh, color=COLORS[1], label="estimated")
        ax[2].set_ylabel("y [mm]")
        ax[2].set_xlabel("t [s]")
        ax[2].legend(loc="best", fontsize=7)
        if title:
            ax[0].set_title(title)
        fig.tight_layout()
    return save_svg(fig, path)
