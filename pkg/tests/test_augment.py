import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deaforge.augment import AssemblyError, build_augmented, dump_blocks_csv, partition
from deaforge.impedance import StiffnessProfile, make_msd_spec, make_shaping_filter, make_static_spec
from deaforge.plant import PolynomialFn, constant_test_plant, default_plant

PLANT = default_plant()


def static_aug(plant=PLANT, k=0.2):
    spec = make_static_spec(StiffnessProfile(PolynomialFn.constant(k), 2.9))
    return build_augmented(plant, spec, make_shaping_filter(spec, 15, 2))


def msd_aug(plant=PLANT):
    spec = make_msd_spec(0.1, 2.0, 0.7)
    return build_augmented(plant, spec, make_shaping_filter(spec, 1.5))


finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)


def test_dimensions():
    a = static_aug()
    assert (a.n_a, a.n_m) == (4, 3)
    b = msd_aug()
    assert (b.n_a, b.n_m) == (6, 5)
    assert b.index["x3"] == 5 and b.index["x1"] == 3


def test_static_hand_assembly_constant_plant():
    k, ws, Ms, m = 0.2, 15.0, 2.0, 2.05e-6
    mats = static_aug(constant_test_plant(), k).matrices(1.0)
    A = np.array(
        [
            [0, 1, 0, 0],
            [0, 0, 1, 0],
            [0, -1000, -10, 100],
            [0, 1, 0, -0.5],
        ],
        dtype=float,
    )
    np.testing.assert_array_equal(mats.A, A)
    np.testing.assert_allclose(mats.B_f, [1 / k, 0, -1 / m, 0])
    np.testing.assert_array_equal(mats.B_y0, [-1, 0, 0, 0])
    np.testing.assert_array_equal(mats.B_u, [0, 0, 50, 0])
    np.testing.assert_allclose(mats.C_z, [k * ws, k / Ms, 0, 0])
    assert mats.D_f == pytest.approx((k / Ms) / k)
    assert mats.D_y0 == pytest.approx(-k / Ms)


def test_msd_hand_assembly_constant_plant():
    mats = msd_aug(constant_test_plant()).matrices(2.0)
    ms, bs, k = 0.4, 0.28, 0.1
    A = np.zeros((6, 6))
    A[0, 1], A[0, 3] = -1.0, 1.0  # x_s' = e_i = x1 - x_i0
    A[1, 2] = 1.0
    A[2, 1], A[2, 2] = -k / ms, -bs / ms
    A[3, 4] = 1.0
    A[4, 3:] = [-1000, -10, 100]
    A[5, 3], A[5, 5] = 1.0, -0.5
    np.testing.assert_allclose(mats.A, A, rtol=1e-15)
    np.testing.assert_allclose(mats.B_f, [0, 0, -1 / ms, 0, -1 / 2.05e-6, 0])
    np.testing.assert_allclose(mats.B_y0, [0, 0, k / ms, 0, 0, 0])
    np.testing.assert_allclose(mats.C_z, [0.15, 0, 0, 0, 0, 0])
    assert mats.D_f == 0 and mats.D_y0 == 0


@settings(max_examples=30)
@given(st.floats(min_value=0.0, max_value=5.0))
def test_structural_invariants(y):
    for aug in (static_aug(), msd_aug()):
        mats = aug.matrices(y)
        n = aug.n_a
        ix = aug.index
        # selector: one 1 per row, x3 never selected
        assert np.all(mats.C_m.sum(axis=1) == 1) and np.all(mats.C_m[:, ix["x3"]] == 0)
        assert set(np.unique(mats.C_m)) <= {0.0, 1.0}
        nz = np.nonzero(mats.B_u)[0]
        assert list(nz) == [ix["x2"]]
        assert mats.C_z[ix["x3"]] == 0
        row3 = mats.A[ix["x3"]]
        assert set(np.nonzero(row3)[0]) <= {ix["x1"], ix["x3"]}
        assert mats.A.shape == (n, n)


@given(hnp.arrays(float, 6, elements=finite))
def test_selector_extracts_measured_states(x):
    aug = msd_aug()
    np.testing.assert_array_equal(aug.matrices(1.0).C_m @ x, x[:5])


def test_partition_zero_gain():
    aug = static_aug()
    pc = partition(aug, np.zeros(3), 2.0)
    np.testing.assert_array_equal(pc.A11_cl, pc.A11)
    np.testing.assert_array_equal(pc.B2u, [[0.0]])


@settings(max_examples=50)
@given(hnp.arrays(float, 5, elements=finite), st.floats(min_value=0, max_value=5))
def test_partition_roundtrip(K, y):
    aug = msd_aug()
    mats = aug.matrices(y)
    pc = partition(aug, K, y)
    full = mats.A - np.outer(mats.B_u, K) @ mats.C_m
    np.testing.assert_allclose(pc.reassemble(), full, rtol=0, atol=1e-9 * (1 + np.abs(full).max()))


def test_partition_unmeasured_block_is_relaxation_pole():
    aug = static_aug()
    for y in np.linspace(0, 5, 5):
        assert partition(aug, np.ones(3), y).A22[0, 0] == -0.5


def test_partition_wrong_gain_length():
    with pytest.raises(ValueError):
        partition(static_aug(), np.ones(4), 1.0)


def test_mismatched_filter_rejected():
    spec = make_msd_spec(0.1, 2.0, 0.7)
    other = make_static_spec(StiffnessProfile(PolynomialFn.constant(0.2), 2.9))
    with pytest.raises(AssemblyError):
        build_augmented(PLANT, spec, make_shaping_filter(other, 15, 2))


def test_block_dump(tmp_path):
    path = tmp_path / "blocks.csv"
    dump_blocks_csv(static_aug(), [0.0, 2.5], path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["y_mm", "block", "row", "col", "value"]
    a = {(r[0], r[1], r[2], r[3]): float(r[4]) for r in rows[1:]}
    assert a[("2.5", "A", "2", "1")] == pytest.approx(PLANT.a21(2.5))
