import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from jointquad.rigid import (
    RigidTransform,
    exp_update,
    generator,
    generators,
    invert,
    read_trajectory,
    rotation_angle,
    se3_exp,
    transform_point,
    write_trajectory,
)

vec6 = st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6).map(np.array)


def random_transform(rng, scale=1.0):
    return RigidTransform.exp(rng.uniform(-scale, scale, 6))


def test_generator_translation_x():
    G = generator(3)
    expected = np.zeros((4, 4))
    expected[0, 3] = 1.0
    assert np.array_equal(G, expected)


def test_generator_rotation_x_is_skew():
    G = generator(0)
    assert G[1, 2] == -1.0 and G[2, 1] == 1.0
    assert np.count_nonzero(G) == 2


@pytest.mark.parametrize("i", range(6))
def test_generator_bottom_row_zero(i):
    assert np.all(generator(i)[3] == 0.0)


@pytest.mark.parametrize("bad", [-1, 6, 2.0, "x"])
def test_generator_rejects_bad_index(bad):
    with pytest.raises(ValueError):
        generator(bad)


def test_exp_update_zero_step():
    T = exp_update(RigidTransform(), np.zeros(6))
    assert np.array_equal(T.matrix, np.eye(4))


def test_exp_update_pure_translation():
    T = exp_update(RigidTransform(), [0, 0, 0, 0.1, 0, 0])
    assert np.allclose(T.R, np.eye(3), atol=0)
    assert np.allclose(T.t, [0.1, 0, 0], atol=1e-15)


def test_exp_update_quarter_turn_about_x():
    T = exp_update(RigidTransform(), [math.pi / 2, 0, 0, 0, 0, 0])
    Rx = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], float)
    assert np.allclose(T.R, Rx, atol=1e-12)


def test_exp_update_composes_on_the_left():
    T = RigidTransform.translation(1, 0, 0)
    d = np.array([0, 0, math.pi / 2, 0, 0, 0])
    assert np.allclose(exp_update(T, d).matrix, se3_exp(d) @ T.matrix)


def test_exp_update_rejects_non_finite():
    with pytest.raises(ValueError):
        exp_update(RigidTransform(), [np.nan, 0, 0, 0, 0, 0])


@given(vec6)
def test_closed_form_matches_series_exponential(d):
    A = np.einsum("i,ijk->jk", d, generators())
    assert np.allclose(se3_exp(d), expm(A), atol=1e-12)


@given(vec6)
def test_exp_update_round_trip(d):
    T0 = RigidTransform.exp(np.array([0.3, -0.2, 0.1, 1.0, 2.0, -0.5]))
    T = exp_update(exp_update(T0, d), -d)
    assert np.max(np.abs(T.matrix - T0.matrix)) < 1e-9


@given(vec6)
def test_rotation_block_stays_orthonormal(d):
    T = exp_update(RigidTransform.exp(d), d)
    assert np.max(np.abs(T.R.T @ T.R - np.eye(3))) < 1e-9
    assert np.linalg.det(T.R) > 0
    assert np.array_equal(T.matrix[3], [0, 0, 0, 1])


@pytest.mark.parametrize("i", range(6))
def test_finite_difference_tends_to_generator(i):
    errs = []
    for h in (1e-3, 1e-4):
        e = np.zeros(6)
        e[i] = h
        D = (exp_update(RigidTransform(), e).matrix - np.eye(4)) / h
        errs.append(np.max(np.abs(D - generator(i))))
    assert errs[1] < errs[0] or errs[0] < 1e-12
    assert errs[1] < 1e-3


def test_transform_point_examples():
    assert np.allclose(transform_point(RigidTransform(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(transform_point(RigidTransform.translation(0, 0, 1), [0, 0, 0]), [0, 0, 1])
    rz = RigidTransform.rotation([0, 0, 1], math.pi)
    assert np.allclose(transform_point(rz, [1, 0, 0]), [-1, 0, 0], atol=1e-12)


def test_invert_examples():
    assert np.array_equal(invert(RigidTransform()).matrix, np.eye(4))
    assert np.allclose(invert(RigidTransform.translation(1, 2, 3)).t, [-1, -2, -3])


def test_invert_random(rng):
    for _ in range(200):
        T = random_transform(rng, 2.0)
        assert np.max(np.abs((invert(T) @ T).matrix - np.eye(4))) < 1e-10


def test_long_composition_stays_rigid(rng):
    T = RigidTransform()
    step = RigidTransform.exp(rng.uniform(-0.1, 0.1, 6))
    for _ in range(500):
        T = step @ T
    assert np.max(np.abs(T.R.T @ T.R - np.eye(3))) < 1e-9


def test_rotation_angle():
    R = RigidTransform.rotation([1, 1, 0], math.pi / 2).R
    assert rotation_angle(R) == pytest.approx(math.pi / 2, abs=1e-12)
    assert rotation_angle(np.eye(3)) == 0.0


def test_trajectory_round_trip(tmp_path, rng):
    poses = [random_transform(rng) for _ in range(4)]
    p = tmp_path / "traj.txt"
    write_trajectory(p, poses)
    lines = p.read_text().splitlines()
    assert len(lines) == 4 and len(lines[0].split()) == 8 and lines[2].split()[0] == "2"
    back = read_trajectory(p)
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix, b.matrix, atol=1e-9)
