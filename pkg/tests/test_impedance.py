import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deaforge.impedance import (
    MSD,
    STATIC_LINEAR,
    STATIC_NONLINEAR,
    ImpedanceSpec,
    InvalidSpecError,
    StiffnessProfile,
    filter_from_dict,
    interaction_error,
    make_msd_spec,
    make_shaping_filter,
    make_static_spec,
    spec_from_dict,
)
from deaforge.plant import PolynomialFn

pos = st.floats(min_value=1e-3, max_value=10.0)


def static(k, y0=2.9):
    return make_static_spec(StiffnessProfile(PolynomialFn.constant(k), y0))


def softening():
    return make_static_spec(StiffnessProfile(PolynomialFn((0.3, -0.04)), 2.9))


def rk4_step_response(spec, f, t_end, dt=1e-3):
    """Fixed-step integration of the target model from rest at f = 0."""
    Ai, Bfi, By0i, Ci, _, _ = spec.matrices(0.0)
    x = spec.rest_state(0.0)
    rhs = lambda x: Ai @ x + Bfi * f + By0i * spec.y0_star  # noqa: E731
    out = [Ci @ x]
    for _ in range(int(round(t_end / dt))):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(Ci @ x)
    return np.array(out)


# ---------------------------------------------------------------- static targets


def test_static_zero_force_anchor():
    assert static(0.2).output(2.9, [], 0.0) == pytest.approx(2.9)


def test_static_low_stiffness_value():
    assert static(0.013).output(2.0, [], 0.013) == pytest.approx(1.9)


def test_static_nonlinear_value():
    spec = softening()
    assert spec.kind == STATIC_NONLINEAR
    assert spec.output(2.0, [], 0.1) == pytest.approx(2.9 - 0.1 / 0.22)


def test_static_matrices_shape():
    Ai, Bfi, By0i, Ci, Dfi, Dy0i = static(0.2).matrices(1.0)
    assert Ai.shape == (0, 0) and Ci.shape == (0,)
    assert Dfi == pytest.approx(-5.0) and Dy0i == 1.0
    assert static(0.2).kind == STATIC_LINEAR and static(0.2).n_i == 0


@pytest.mark.parametrize("coeffs", [(0.0,), (-0.1,), (0.1, -0.05)])
def test_nonpositive_profile_rejected(coeffs):
    with pytest.raises(InvalidSpecError):
        make_static_spec(StiffnessProfile(PolynomialFn(coeffs), 2.9))


def test_static_steady_state_is_implicit_fixed_point():
    spec = softening()
    y = spec.steady_state(0.1)
    assert y == pytest.approx(2.9 - 0.1 / (0.3 - 0.04 * y), abs=1e-12)


# ---------------------------------------------------------------- msd target


def test_msd_unforced_equilibrium():
    spec = make_msd_spec(0.1, 2.0, 1.0)
    assert spec.steady_state(0.0) == pytest.approx(2.9)
    Ai, Bfi, By0i, *_ = spec.matrices(0.0)
    x = spec.rest_state(0.0)
    np.testing.assert_allclose(Ai @ x + By0i * 2.9, 0.0, atol=1e-15)


def test_msd_steady_state_under_force():
    spec = make_msd_spec(0.1, 2.0, 1.0, y0_star=2.9)
    assert spec.steady_state(0.2) == pytest.approx(0.9)
    y = rk4_step_response(spec, 0.2, 60.0)
    assert y[-1] == pytest.approx(0.9, abs=1e-6)


def test_msd_parameter_mapping():
    spec = make_msd_spec(0.1, 2.0, 0.7)
    assert spec.mass == pytest.approx(0.1 * 4.0)
    assert spec.damping == pytest.approx(2 * 0.7 * 0.1 * 2.0)


def test_msd_overshoot_matches_damping_ratio():
    spec = make_msd_spec(0.1, 2.0, 0.4)
    y = rk4_step_response(spec, 0.1, 40.0)
    dy = spec.steady_state(0.1) - 2.9
    overshoot = (np.min(y) - 2.9) / dy - 1.0
    zeta = 0.4
    assert overshoot == pytest.approx(math.exp(-math.pi * zeta / math.sqrt(1 - zeta**2)), abs=1e-4)
    assert overshoot == pytest.approx(0.254, abs=1e-3)


@pytest.mark.parametrize("args", [(0.0, 2.0, 1.0), (0.1, -2.0, 1.0), (0.1, 2.0, 0.0), (0.1, float("nan"), 1.0)])
def test_msd_invalid(args):
    with pytest.raises(InvalidSpecError):
        make_msd_spec(*args)


@given(pos, pos, st.floats(min_value=0.05, max_value=1.0))
def test_msd_eigenvalues(k, tau, delta):
    Ai, *_ = make_msd_spec(k, tau, delta).matrices(0.0)
    ev = np.linalg.eigvals(Ai)
    np.testing.assert_allclose(ev.real, -delta / tau, rtol=1e-6, atol=1e-9 / tau)
    if delta < 1:
        np.testing.assert_allclose(np.abs(ev), 1 / tau, rtol=1e-9)


# ---------------------------------------------------------------- properties


@given(st.floats(min_value=0.0, max_value=5.0), pos)
def test_zero_force_returns_y0(y0, k):
    assert static(k, y0).output(1.0, [], 0.0) == y0
    assert make_msd_spec(k, 1.0, 0.7, y0).steady_state(0.0) == y0


@given(st.floats(min_value=-0.05, max_value=0.3), st.floats(min_value=1e-3, max_value=0.1))
def test_compressive_force_shortens(f, df):
    # forces keep every target inside the stroke
    for spec in (static(0.2), softening(), make_msd_spec(0.1, 2.0, 0.7)):
        assert spec.steady_state(f + df) < spec.steady_state(f)


def test_interaction_error():
    assert interaction_error(2.9, 2.9) == 0
    assert interaction_error(3.0, 2.9) == pytest.approx(0.1)


# ---------------------------------------------------------------- shaping filters


def test_filter_static_linear_row():
    _, Bs, Cs, Ds = make_shaping_filter(static(0.2), 15, 2).matrices(2.9)
    assert (Bs, Cs, Ds) == (1.0, pytest.approx(3.0), pytest.approx(0.1))


def test_filter_msd_row():
    As, Bs, Cs, Ds = make_shaping_filter(make_msd_spec(0.1, 2, 0.7), 1.5).matrices(2.9)
    assert (As, Bs, Ds) == (0.0, 1.0, 0.0)
    assert Cs == pytest.approx(0.15)


def test_filter_static_nonlinear_row():
    _, _, Cs, Ds = make_shaping_filter(softening(), 15, 2).matrices(2.5)
    assert Cs == pytest.approx(3.0) and Ds == pytest.approx(0.1)


@given(st.floats(min_value=0, max_value=5))
def test_shipped_filters_integrate(p):
    for spec in (static(0.013), softening(), make_msd_spec(0.1, 2, 0.4)):
        filt = make_shaping_filter(spec, 15, None if spec.kind == MSD else 2)
        As, _, Cs, _ = filt.matrices(p)
        assert As == 0.0 and np.isfinite(Cs)


def test_filter_rejects_bad_input():
    with pytest.raises(InvalidSpecError):
        make_shaping_filter(static(0.2), 0.0, 2)
    with pytest.raises(InvalidSpecError):
        make_shaping_filter(static(0.2), 15, None)
    with pytest.raises(InvalidSpecError):
        ImpedanceSpec("unknown", PolynomialFn.constant(1.0), 2.9)


def test_serialization_roundtrip():
    for spec in (static(0.013), softening(), make_msd_spec(0.1, 2, 0.4)):
        assert spec_from_dict(spec.to_dict()) == spec
        filt = make_shaping_filter(spec, 15, None if spec.kind == MSD else 2)
        assert filter_from_dict(filt.to_dict()) == filt
