"""Campaign configuration: one JSON document per campaign.

A campaign file is merged over :data:`DEFAULTS`, leaf fields may be
overridden with dotted paths (``simulation.duration=5``), and the result is
validated.  Every artifact embeds the resolved document and its SHA-256 so a
run can be reproduced from its outputs alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .augment import build_augmented
from .impedance import (
    KINDS,
    MSD,
    ImpedanceSpec,
    ShapingFilter,
    StiffnessProfile,
    make_shaping_filter,
    make_static_spec,
    spec_from_dict,
)
from .plant import PlantModel, default_plant, load_plant
from .selfsense import CapacitanceMap, default_capacitance_map, load_map
from .sim import SimConfig, make_signal
from .synthesis import EPS24, EPS27, Grid, SynthesisProblem

__all__ = [
    "DEFAULTS",
    "ConfigError",
    "Campaign",
    "load_campaign",
    "apply_overrides",
    "config_hash",
    "canonical_json",
    "shipped_campaigns",
]


class ConfigError(ValueError):
    """Invalid or inconsistent campaign configuration."""


DEFAULTS: dict = {
    "name": "campaign",
    "seed": 0,
    "plant": "default",
    "spec": {"kind": "static_linear", "k_star": [0.013], "y0_star": 2.9},
    "filter": {"omega_s": 15.0, "M_s": 2.0},
    "synthesis": {
        "lambda": 1.0,
        "W": None,
        "grid": {"n": 25, "n_validation": 101},
        "eps24": EPS24,
        "eps27": EPS27,
    },
    "simulation": {
        "signal": {"kind": "sine", "amplitude": 0.012, "frequency": 0.1, "offset": 0.005},
        "duration": 20.0,
        "dt_plant": 5e-5,
        "dt_control": 2e-4,
        "k_aw": None,
        "x0": "equilibrium",
        "record_every": 5,
        "settle_window": 1.0,
        "skip": 0.0,
        "plots": True,
    },
    "selfsense": {
        "enabled": False,
        "map": "default",
        "duration": 1.0,
        "R_e": 5e5,
        "C_e": 2e-9,
        "C_e_rate": 0.0,
        "amp": 100.0,
        "f_ss": 500.0,
        "forgetting": 0.999,
        "cutoff": 4000.0,
        "highpass": None,
        "notch": False,
        "noise_std": 0.0,
        "record_every": 10,
        "tolerance": 0.01,
        "closed_loop": {
            "enabled": False,
            "f_ss": 2000.0,
            "forgetting": 0.97,
            "highpass": 300.0,
            "warmup": 0.2,
            "velocity_cutoff": 200.0,
        },
    },
    "output": "out",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            # free-form subtrees: signal parameters and spec coefficients
            if path.rstrip(".") in ("simulation.signal", "spec", "filter"):
                out[k] = copy.deepcopy(v)
                continue
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and path + k not in ("simulation.signal", "spec"):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override path {key!r} does not name a config section")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node and ".".join(parts[:-1]) not in ("simulation.signal", "spec", "filter"):
            raise ConfigError(f"unknown config field {key!r}")
        node[leaf] = _parse_value(raw)
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def shipped_campaigns() -> dict[str, Path]:
    root = resources.files("deaforge") / "data" / "campaigns"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def _data_file(name: str) -> Path:
    return Path(str(resources.files("deaforge") / "data" / name))


class Campaign:
    """Resolved, validated campaign with builders for the domain objects."""

    def __init__(self, cfg: dict, base_dir: Path | None = None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.cfg = cfg
        self._validate()

    # ------------------------------------------------------------ validation

    def _path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def _validate(self) -> None:
        c = self.cfg
        if c["plant"] != "default" and not self._path(c["plant"]).is_file():
            raise ConfigError(f"plant file not found: {c['plant']}")
        sm = c["selfsense"]["map"]
        if sm != "default" and not self._path(sm).is_file():
            raise ConfigError(f"capacitance map not found: {sm}")
        spec = c["spec"]
        if spec.get("kind") not in KINDS:
            raise ConfigError(f"spec.kind must be one of {KINDS}")
        if spec["kind"] == MSD and not all(k in spec for k in ("tau", "delta")):
            raise ConfigError("msd spec needs tau and delta")
        syn = c["synthesis"]
        if not (isinstance(syn["lambda"], (int, float)) and syn["lambda"] > 0):
            raise ConfigError("synthesis.lambda must be positive")
        g = syn["grid"]
        if int(g["n"]) < 2 or int(g["n_validation"]) < 2:
            raise ConfigError("grids need at least two points")
        fl = c["filter"]
        if not fl.get("omega_s", 0) > 0:
            raise ConfigError("filter.omega_s must be positive")
        if spec["kind"] != MSD and not (fl.get("M_s") or 0) > 0:
            raise ConfigError("filter.M_s must be positive for static specifications")
        sim = c["simulation"]
        if sim["x0"] not in ("equilibrium", "unloaded"):
            raise ConfigError("simulation.x0 must be 'equilibrium' or 'unloaded'")
        dur = float(sim["duration"])
        if not 0 <= float(sim["skip"]) < dur or not 0 < float(sim["settle_window"]) <= dur:
            raise ConfigError("simulation.skip and settle_window must lie inside the duration")
        try:
            self.plant()
            self.spec()
            self.sim_config()
            self.signal()
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------ builders

    @property
    def name(self) -> str:
        return str(self.cfg["name"])

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)

    def plant(self) -> PlantModel:
        p = self.cfg["plant"]
        return default_plant() if p == "default" else load_plant(self._path(p))

    def spec(self) -> ImpedanceSpec:
        plant = self.plant()
        d = dict(self.cfg["spec"])
        spec = spec_from_dict(d)
        spec_bounds = (plant.y_min, plant.y_max)
        if spec.kind != MSD:
            spec = make_static_spec(StiffnessProfile(spec.k_star, spec.y0_star), *spec_bounds, kind=spec.kind)
        return spec

    def filter(self, spec: ImpedanceSpec | None = None) -> ShapingFilter:
        spec = spec or self.spec()
        fl = self.cfg["filter"]
        return make_shaping_filter(spec, float(fl["omega_s"]), None if spec.kind == MSD else float(fl["M_s"]))

    def problem(self) -> SynthesisProblem:
        plant, spec = self.plant(), self.spec()
        aug = build_augmented(plant, spec, self.filter(spec))
        syn = self.cfg["synthesis"]
        g = syn["grid"]
        grid = Grid.uniform(plant.y_min, plant.y_max, int(g["n"]), int(g["n_validation"]))
        W = None if syn["W"] is None else np.asarray(syn["W"], dtype=float)
        return SynthesisProblem(
            aug, grid, lam=float(syn["lambda"]), W=W, eps24=float(syn["eps24"]), eps27=float(syn["eps27"])
        )

    def sim_config(self) -> SimConfig:
        s = self.cfg["simulation"]
        return SimConfig(
            duration=float(s["duration"]),
            dt_plant=float(s["dt_plant"]),
            dt_control=float(s["dt_control"]),
            k_aw=None if s["k_aw"] is None else float(s["k_aw"]),
            record_every=int(s["record_every"]),
        )

    def signal(self):
        d = dict(self.cfg["simulation"]["signal"])
        kind = d.pop("kind")
        if kind == "band_limited_noise":
            d.setdefault("seed", int(self.cfg["seed"]))
        return make_signal(kind, d)

    def capacitance_map(self) -> CapacitanceMap:
        m = self.cfg["selfsense"]["map"]
        return default_capacitance_map() if m == "default" else load_map(self._path(m))

    def output_dir(self, override: str | None = None) -> Path:
        out = Path(override or self.cfg["output"])
        return out if out.is_absolute() else Path.cwd() / out


def load_campaign(source, overrides=()) -> Campaign:
    """Load a campaign from a JSON path or the name of a shipped campaign."""
    src = str(source)
    path = Path(src)
    if not path.is_file():
        shipped = shipped_campaigns()
        if src in shipped:
            path = shipped[src]
        else:
            raise ConfigError(f"config file not found: {src}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, raw)
    cfg = apply_overrides(cfg, overrides)
    base = path.parent
    if path.parent == _data_file("campaigns"):
        base = _data_file("")
    return Campaign(cfg, base_dir=base)
