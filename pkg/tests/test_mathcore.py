import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimicsim import mathcore as mc

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def _rand_quats(n, seed=0):
    q = np.random.default_rng(seed).standard_normal((n, 4))
    return mc.quat_normalize(q)


def _mat_oracle(q):
    # textbook expansion, written independently of quat_to_mat
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def test_rot6d_identity():
    np.testing.assert_array_equal(mc.quat_to_rot6d(mc.IDENTITY_QUAT), [1, 0, 0, 0, 1, 0])


def test_rot6d_quarter_turn_about_z():
    s = math.sqrt(0.5)
    r = mc.quat_to_rot6d(np.array([s, 0, 0, s]))
    np.testing.assert_allclose(r, [0, 1, 0, -1, 0, 0], atol=1e-15)


def test_rot6d_matches_matrix_oracle():
    for q in _rand_quats(50):
        m = _mat_oracle(q)
        np.testing.assert_allclose(mc.quat_to_rot6d(q), np.concatenate([m[:, 0], m[:, 1]]), atol=1e-14)


def test_rot6d_sign_flip_is_exact():
    q = _rand_quats(100, 1)
    np.testing.assert_array_equal(mc.quat_to_rot6d(q), mc.quat_to_rot6d(-q))


def test_rot6d_columns_orthonormal_and_round_trip():
    q = _rand_quats(100, 2)
    r = mc.quat_to_rot6d(q)
    c0, c1 = r[:, :3], r[:, 3:]
    np.testing.assert_allclose(np.linalg.norm(c0, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(c1, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(c0 * c1, axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(mc.rot6d_to_mat(r), mc.quat_to_mat(q), atol=1e-12)


def test_rot6d_rejects_non_finite():
    with pytest.raises(ValueError):
        mc.quat_to_rot6d(np.array([np.nan, 0, 0, 0]))


def test_mat_to_quat_round_trip_is_canonical():
    q = mc.quat_canonical(_rand_quats(200, 3))
    back = mc.mat_to_quat(mc.quat_to_mat(q))
    np.testing.assert_allclose(back, q, atol=1e-12)
    assert np.all(back[:, 0] >= 0)


def test_integrate_zero_rate_is_identity():
    q = _rand_quats(1, 4)[0]
    np.testing.assert_allclose(mc.quat_integrate(q, np.zeros(3), 0.1), q, atol=1e-15)


def test_integrate_closed_form_quarter_turn():
    q = mc.quat_integrate(mc.IDENTITY_QUAT, np.array([0, 0, math.pi]), 0.5)
    s = math.sqrt(0.5)
    np.testing.assert_allclose(q, [s, 0, 0, s], atol=1e-9)


def test_integrate_half_steps_agree():
    rng = np.random.default_rng(5)
    q = _rand_quats(1, 5)[0]
    w = rng.standard_normal(3)
    dt = 1e-3
    full = mc.quat_integrate(q, w, dt)
    half = mc.quat_integrate(mc.quat_integrate(q, w, dt / 2), w, dt / 2)
    # constant rate: the exponential map composes exactly
    assert mc.quat_geodesic_angle(full, half) < 1e-5


def test_integrate_preserves_norm_over_many_steps():
    q = mc.IDENTITY_QUAT.copy()
    w = np.array([0.3, -1.7, 2.2])
    for _ in range(10_000):
        q = mc.quat_integrate(q, w, 1.0 / 480)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9


def test_geodesic_angle_examples():
    s = math.sqrt(0.5)
    a = _rand_quats(1, 6)[0]
    assert mc.quat_geodesic_angle(a, a) == pytest.approx(0.0, abs=1e-7)
    assert mc.quat_geodesic_angle(a, -a) == pytest.approx(0.0, abs=1e-7)
    assert mc.quat_geodesic_angle(mc.IDENTITY_QUAT, np.array([s, 0, 0, s])) == pytest.approx(math.pi / 2, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4), st.lists(finite, min_size=4, max_size=4))
def test_geodesic_angle_range_and_symmetry(a, b):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    a, b = mc.quat_normalize(a), mc.quat_normalize(b)
    ang = mc.quat_geodesic_angle(a, b)
    assert 0.0 <= ang <= math.pi
    assert ang == pytest.approx(mc.quat_geodesic_angle(b, a), abs=1e-12)


def test_slerp_endpoints_and_midpoint():
    a = mc.IDENTITY_QUAT
    b = mc.axis_angle_to_quat(np.array([0.0, 0.0, 1.0]), 1.0)
    np.testing.assert_allclose(mc.quat_slerp(a, b, 0.0), a, atol=1e-15)
    np.testing.assert_allclose(mc.quat_slerp(a, b, 1.0), b, atol=1e-15)
    mid = mc.quat_slerp(a, b, 0.5)
    np.testing.assert_allclose(mid, mc.axis_angle_to_quat(np.array([0.0, 0.0, 1.0]), 0.5), atol=1e-12)
    # shortest arc: the antipodal representative of b gives the same path
    np.testing.assert_allclose(mc.quat_canonical(mc.quat_slerp(a, -b, 0.5)), mc.quat_canonical(mid), atol=1e-12)


def test_axis_angle_matrix_agrees_with_quaternion():
    rng = np.random.default_rng(7)
    for _ in range(20):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(-3, 3)
        np.testing.assert_allclose(mc.axis_angle_to_mat(axis, ang), mc.quat_to_mat(mc.axis_angle_to_quat(axis, ang)), atol=1e-13)


def test_skew_is_cross_product():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((2, 3))
    np.testing.assert_allclose(mc.skew(a) @ b, np.cross(a, b), atol=1e-15)
