"""Shared fixtures.  Synthesized designs are cached per session."""

import warnings

import numpy as np
import pytest

from deaforge.augment import build_augmented
from deaforge.impedance import StiffnessProfile, make_msd_spec, make_shaping_filter, make_static_spec
from deaforge.plant import PolynomialFn, constant_test_plant, default_plant
from deaforge.synthesis import Grid, SynthesisProblem, synthesize

warnings.filterwarnings("ignore", category=UserWarning, module="cvxpy")


@pytest.fixture(scope="session")
def plant():
    return default_plant()


@pytest.fixture(scope="session")
def test_plant():
    return constant_test_plant()


def static_design(plant, k, y0=2.9, omega_s=15.0, M_s=2.0):
    spec = make_static_spec(StiffnessProfile(PolynomialFn.constant(k), y0))
    filt = make_shaping_filter(spec, omega_s, M_s)
    problem = SynthesisProblem(build_augmented(plant, spec, filt), Grid.uniform(plant.y_min, plant.y_max))
    return spec, filt, problem


def msd_design(plant, delta, k=0.1, tau=2.0, omega_s=1.5):
    spec = make_msd_spec(k, tau, delta)
    filt = make_shaping_filter(spec, omega_s)
    problem = SynthesisProblem(build_augmented(plant, spec, filt), Grid.uniform(plant.y_min, plant.y_max))
    return spec, filt, problem


class _Designs:
    """Lazily synthesized designs keyed by name."""

    def __init__(self, plant):
        self.plant = plant
        self._cache = {}

    def get(self, name):
        if name not in self._cache:
            if name.startswith("k"):
                spec, filt, problem = static_design(self.plant, {"k013": 0.013, "k020": 0.2}[name])
            else:
                spec, filt, problem = msd_design(self.plant, {"d10": 1.0, "d07": 0.7, "d04": 0.4}[name])
            self._cache[name] = (spec, filt, problem, synthesize(problem))
        return self._cache[name]


@pytest.fixture(scope="session")
def designs(plant):
    return _Designs(plant)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict = {}
_LABELS: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if "acceptance" in item.keywords and item.obj.__doc__:
            _LABELS[item.name] = item.obj.__doc__.strip().splitlines()[0]


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        n = name.split("_")[2]
        terminalreporter.write_line(f"criterion {n}: {_ACCEPTANCE[name]}  {_LABELS.get(name, '')}")
