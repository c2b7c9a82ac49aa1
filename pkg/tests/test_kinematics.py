import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loggrasp.errors import InvalidArgumentError, LimitViolationError
from loggrasp.kinematics import (
    CRANE_DH,
    DEFAULT_MODEL,
    DhRow,
    clamp_to_limits,
    dh_transform,
    forward_kinematics,
    hanging_equilibrium,
    jaw_opening_width,
)
from oracles import crane_fk, elementary

# Computed once with tests/oracles.py::crane_fk at q = 0.
GOLDEN_ZERO_POSITION = np.array([3.07, 0.88, -0.70])
GOLDEN_ZERO_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def random_q(rng):
    lim = DEFAULT_MODEL.limits
    lo = np.where(np.isfinite(lim.lo), lim.lo, -np.pi)
    hi = np.where(np.isfinite(lim.hi), lim.hi, np.pi)
    return rng.uniform(lo, hi)


def test_dh_identity():
    pose = dh_transform(DhRow(0.0, 0.0, 0.0, 0.0, joint=0), 0.0)
    np.testing.assert_allclose(pose.matrix(), np.eye(4), atol=1e-15)


def test_dh_pure_rotation():
    pose = dh_transform(DhRow(np.pi / 2, 0.0, 0.0, 0.0))
    np.testing.assert_allclose(pose.rotation @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(pose.translation, 0.0, atol=1e-15)


def test_dh_first_row_against_oracle():
    pose = dh_transform(CRANE_DH[0], 0.0)
    np.testing.assert_allclose(pose.translation, [0.18, 0.0, 2.4], atol=1e-15)
    np.testing.assert_allclose(pose.matrix(), elementary(0.0, 2.4, 0.18, np.pi / 2), atol=1e-15)
    assert pose.is_valid()


def test_dh_rejects_nonfinite():
    with pytest.raises(InvalidArgumentError):
        dh_transform(CRANE_DH[0], float("nan"))


def test_fk_zero_golden():
    frame = forward_kinematics(np.zeros(8))
    np.testing.assert_allclose(frame.position, GOLDEN_ZERO_POSITION, atol=1e-12)
    np.testing.assert_allclose(frame.rotation, GOLDEN_ZERO_ROTATION, atol=1e-12)


def test_fk_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = random_q(rng)
        frame = forward_kinematics(q)
        p, R = crane_fk(q)
        assert np.abs(frame.position - p).max() <= 1e-9
        assert np.linalg.norm(frame.rotation - R) <= 1e-9


def test_fk_batched_matches_single():
    rng = np.random.default_rng(1)
    qs = np.stack([random_q(rng) for _ in range(7)])
    batch = forward_kinematics(qs)
    for i, q in enumerate(qs):
        single = forward_kinematics(q)
        np.testing.assert_array_equal(batch.position[i], single.position)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3.0, 3.0), st.integers(0, 10_000))
def test_base_rotation_symmetry(delta, seed):
    q = random_q(np.random.default_rng(seed))
    q[0] = 0.0
    q2 = q.copy()
    q2[0] = delta
    p0 = forward_kinematics(q).position
    p1 = forward_kinematics(q2).position
    assert p1[2] == pytest.approx(p0[2], abs=1e-12)
    c, s = math.cos(delta), math.sin(delta)
    np.testing.assert_allclose(p1[:2], [c * p0[0] - s * p0[1], s * p0[0] + c * p0[1]], atol=1e-12)


def test_telescope_moves_twice():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = random_q(rng)
        q[3] = min(q[3], 4.3)
        frame = forward_kinematics(q)
        # telescope axis is z of frame 4
        from loggrasp.kinematics import chain

        axis = chain(q)[4][:3, 2]
        q_up = q.copy()
        q_up[3] += 0.1
        moved = forward_kinematics(q_up).position - frame.position
        np.testing.assert_allclose(moved, 0.2 * axis, atol=1e-12)


def test_fk_rotation_valid_everywhere():
    rng = np.random.default_rng(3)
    qs = np.stack([random_q(rng) for _ in range(200)])
    R = forward_kinematics(qs).rotation
    eye = np.eye(3)
    assert np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() <= 1e-9


def test_fk_limit_violation_names_joint():
    q = np.zeros(8)
    q[1] = -1.3
    with pytest.raises(LimitViolationError) as err:
        forward_kinematics(q)
    assert err.value.joint == 2


def test_hanging_equilibrium_points_down():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = random_q(rng)
        q[1], q[2] = rng.uniform(0.0, 1.2), rng.uniform(0.0, 1.5)
        q[4:6] = hanging_equilibrium(q)
        ez = forward_kinematics(q).e_z
        np.testing.assert_allclose(ez, [0, 0, -1], atol=1e-12)


def test_clamp_examples():
    q = np.full(8, 0.5)
    q[7] = 3.5
    out, flags = clamp_to_limits(q)
    assert out[7] == 3.0 and flags[7] and flags.sum() == 1

    mid = (np.array([-3.71, -1.2, -0.91, 0, -1.57, -0.79, 0, 0]) + np.array([3.71, 1.56, 4.6, 4.47, 1.57, 2.36, 0, 3])) / 2
    out, flags = clamp_to_limits(mid)
    np.testing.assert_array_equal(out, mid)
    assert not flags.any()

    q = np.full(8, 0.5)
    q[1] = -1.3
    out, flags = clamp_to_limits(q)
    assert out[1] == -1.2 and flags[1] and flags.sum() == 1


def test_clamp_never_flags_rotator():
    q = np.full(8, 0.5)
    q[6] = 1e6
    out, flags = clamp_to_limits(q)
    assert out[6] == 1e6 and not flags[6]


def test_jaw_width_examples():
    assert jaw_opening_width(0.0) == pytest.approx(1.6)
    assert jaw_opening_width(3.0) == pytest.approx(0.0, abs=1e-15)
    assert jaw_opening_width(1.5) == pytest.approx(0.8)
    with pytest.raises(InvalidArgumentError):
        jaw_opening_width(3.2)


def test_jaw_width_strictly_decreasing():
    grid = np.linspace(0.0, 3.0, 1001)
    w = jaw_opening_width(grid)
    assert np.all(np.diff(w) < 0)
