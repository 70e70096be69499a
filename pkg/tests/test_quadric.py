import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointquad.config import SolverConfig
from jointquad.quadric import (
    CurvatureMap,
    DegenerateFitError,
    Quadric,
    build_q_matrix,
    curvatures_from_abc,
    evaluate,
    fair_cost,
    fair_weight,
    fit_quadric_iterative,
    fit_quadrics,
    principal_curvatures,
    quadric_param_jacobian,
    quadric_residual,
    read_curvature_map,
    write_curvature_map,
    write_curvature_csv,
)
from jointquad.surface import Neighborhood, NeighborhoodBatch

finite = st.floats(-1.0, 1.0, allow_nan=False)
gammas = st.lists(finite, min_size=6, max_size=6).map(np.array)
points = st.lists(finite, min_size=3, max_size=3).map(np.array)


def patch(fn, n=7, extent=0.1, center=(0.0, 0.0, 2.0)):
    """Grid of points (x, y, fn(x, y)) shifted to ``center``."""
    g = np.linspace(-extent, extent, n)
    x, y = np.meshgrid(g, g)
    pts = np.stack([x.ravel(), y.ravel(), fn(x.ravel(), y.ravel())], -1) + np.asarray(center)
    c = np.asarray(center) + [0, 0, fn(np.zeros(1), np.zeros(1))[0]]
    return Neighborhood(c, pts, np.linalg.norm(pts - c, axis=1))


def sphere_patch(r, n=7, extent=0.1):
    # camera-facing cap of a sphere centred at (0, 0, 2 + r)
    return patch(lambda x, y: r - np.sqrt(r * r - x * x - y * y), n, extent)


def cylinder_patch(r, n=7, extent=0.1):
    return patch(lambda x, y: r - np.sqrt(r * r - x * x), n, extent)


# --- build_q_matrix ----------------------------------------------------------


def test_zero_quadric_has_only_plane_entries():
    Q = build_q_matrix(Quadric(np.zeros(6)))
    expected = np.zeros((4, 4))
    expected[2, 3] = expected[3, 2] = -0.5
    assert np.array_equal(Q, expected)


def test_anchor_on_surface_when_tz_zero():
    q = Quadric([0, 0, 0, 1, 0, 1])
    assert quadric_residual(q, [0, 0, 0, 1]) == 0.0


def test_paraboloid_point_has_zero_residual():
    q = Quadric([0, 0, 0, 1, 0, 1])
    x = y = 0.1
    # hand oracle: z = (a x^2 + 2 b x y + c y^2) / 2
    z = (x * x + y * y) / 2
    assert abs(quadric_residual(q, [x, y, z])) < 1e-15


@given(gammas, st.lists(finite, min_size=3, max_size=3))
def test_q_symmetric(g, anchor):
    Q = build_q_matrix(Quadric(g * 3, anchor))
    assert np.max(np.abs(Q - Q.T)) <= 1e-12


def test_angles_wrapped_into_range():
    q = Quadric([4.0, -7.0, 0, 0, 0, 0])
    assert abs(q.params[0]) <= math.pi and abs(q.params[1]) <= math.pi


# --- principal_curvatures ----------------------------------------------------


@pytest.mark.parametrize(
    "abc,expected", [((1, 0, 1), (1, 1)), ((0, 0, 0), (0, 0)), ((3, 0, 1), (3, 1))]
)
def test_principal_curvature_examples(abc, expected):
    k = principal_curvatures(Quadric([0, 0, 0, *abc]))
    assert (k.k1, k.k2) == pytest.approx(expected, abs=1e-15)


@given(gammas.map(lambda g: g * 10))
def test_curvatures_are_eigenvalues(g):
    k = principal_curvatures(Quadric(g))
    a, b, c = g[3:]
    ev = np.linalg.eigvalsh(np.array([[a, b], [b, c]]))
    assert k.k1 >= k.k2
    assert abs(k.k1 - ev[1]) <= 1e-12 * max(1.0, abs(ev[1])) * 10
    assert abs(k.k2 - ev[0]) <= 1e-12 * max(1.0, abs(ev[0])) * 10


@given(gammas, gammas)
def test_curvature_independent_of_alignment(g, h):
    mixed = np.concatenate([h[:3], g[3:]])
    assert principal_curvatures(Quadric(g)) == principal_curvatures(Quadric(mixed))


def test_radicand_clamped():
    k1, k2 = curvatures_from_abc(1.0, 0.0, 1.0 + 1e-17)
    assert np.isfinite(k1) and np.isfinite(k2)


# --- quadric_residual --------------------------------------------------------


@given(gammas, st.lists(finite, min_size=3, max_size=3))
def test_residual_zero_at_anchor(g, anchor):
    g = g.copy()
    g[2] = 0.0
    q = Quadric(g, anchor)
    assert abs(quadric_residual(q, anchor)) < 1e-12


def test_plane_offset_residual():
    # l = q + tz e_z -> eps = -(z + tz) = -0.1
    q = Quadric([0, 0, 0.1, 0, 0, 0])
    assert quadric_residual(q, [0, 0, 0]) == pytest.approx(-0.1, abs=1e-15)


@given(points, st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_residual_mirror_symmetry(p, a, b, c):
    q = Quadric([0, 0, 0, a, b, c])
    m = Quadric([0, 0, 0, c, b, a])
    mirrored = [p[1], p[0], p[2]]
    assert quadric_residual(q, p) == pytest.approx(quadric_residual(m, mirrored), abs=1e-12)


@given(gammas, st.lists(finite, min_size=3, max_size=3), points)
def test_matrix_form_matches_batched_evaluate(g, anchor, p):
    q = Quadric(g * 2, anchor)
    e = evaluate(q.params[None], q.anchor[None], np.asarray(p)[None, None])
    assert e.eps[0, 0] == pytest.approx(quadric_residual(q, p), abs=1e-10)


# --- quadric_param_jacobian ---------------------------------------------------


def fd_param_jacobian(q, p, h=1e-6):
    out = np.empty(6)
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        out[i] = (
            quadric_residual(Quadric(q.params + d, q.anchor), p)
            - quadric_residual(Quadric(q.params - d, q.anchor), p)
        ) / (2 * h)
    return out


def test_jacobian_a_component():
    q = Quadric(np.zeros(6))
    p = np.array([0.3, -0.2, 0.1])
    J = quadric_param_jacobian(q, p)
    assert J[3] == pytest.approx(0.3**2 / 2, rel=1e-12)
    assert np.allclose(J, fd_param_jacobian(q, p), rtol=1e-6, atol=1e-9)


def test_jacobian_tz_at_anchor():
    q = Quadric([0.2, -0.1, 0, 1, 0.5, 2], [0.1, 0.2, 1.0])
    J = quadric_param_jacobian(q, q.anchor)
    assert J[2] == pytest.approx(-1.0, abs=1e-12)
    assert J[2] == pytest.approx(fd_param_jacobian(q, q.anchor)[2], abs=1e-8)


def test_jacobian_zero_at_zero_point():
    q = Quadric([0.3, 0.1, 0.2, 1, 2, 3], [0.5, 0.5, 0.5])
    assert np.array_equal(quadric_param_jacobian(q, [0, 0, 0, 0]), np.zeros(6))


def test_rejects_malformed_point():
    with pytest.raises(ValueError):
        quadric_residual(Quadric(), [1, 2])


@given(gammas, st.lists(finite, min_size=3, max_size=3), points)
def test_param_jacobian_matches_finite_differences(g, anchor, p):
    q = Quadric(g, anchor)
    J = quadric_param_jacobian(q, p)
    fd = fd_param_jacobian(q, p)
    scale = max(1.0, np.max(np.abs(fd)))
    assert np.max(np.abs(J - fd)) / scale < 1e-5


@given(gammas, st.lists(finite, min_size=3, max_size=3), points)
def test_batched_jacobian_matches_single(g, anchor, p):
    q = Quadric(g, anchor)
    e = evaluate(q.params[None], q.anchor[None], np.asarray(p)[None, None])
    assert np.allclose(e.jac[0, 0], quadric_param_jacobian(q, p), atol=1e-10)


# --- fitting -----------------------------------------------------------------


def test_sphere_patch_recovers_inverse_radius():
    # the parabola is a second-order model, so 1e-6 needs a small patch
    rng = np.random.default_rng(5)
    xy = rng.uniform(-0.004, 0.004, (49, 2))
    z = 2.0 - np.sqrt(4.0 - (xy**2).sum(1))
    pts = np.vstack([[0, 0, 0], np.column_stack([xy, z])]) + [0, 0, 2.0]
    n = Neighborhood(pts[0], pts, np.linalg.norm(pts - pts[0], axis=1))
    assert len(n) == 50
    q, rep = fit_quadric_iterative(n)
    k = principal_curvatures(q)
    assert abs(k.k1 - 0.5) < 1e-6 and abs(k.k2 - 0.5) < 1e-6
    assert rep.converged[0]


@pytest.mark.parametrize("extent", [0.01, 0.1, 1.0])
def test_plane_patch_has_zero_curvature(extent):
    n = patch(lambda x, y: 0.3 * x - 0.2 * y, extent=extent)
    q, _ = fit_quadric_iterative(n)
    k = principal_curvatures(q)
    assert abs(k.k1) < 1e-8 and abs(k.k2) < 1e-8


def test_cylinder_patch():
    q, _ = fit_quadric_iterative(cylinder_patch(0.5, n=9, extent=0.005))
    k = principal_curvatures(q)
    assert abs(k.k1 - 2.0) < 1e-4 and abs(k.k2) < 1e-4


def test_fit_cost_non_increasing():
    rng = np.random.default_rng(3)
    n = sphere_patch(1.0, n=9, extent=0.1)
    n = Neighborhood(n.center, n.members + rng.normal(0, 2e-3, n.members.shape), n.distances)
    _, rep = fit_quadric_iterative(n)
    t = np.array(rep.cost_trace)
    assert np.all(np.diff(t) <= 0)


def test_fit_requires_six_members():
    n = sphere_patch(1.0, n=2)
    with pytest.raises(ValueError):
        fit_quadric_iterative(n)


def test_collinear_points_are_degenerate():
    pts = np.stack([np.linspace(-0.1, 0.1, 10), np.zeros(10), np.full(10, 2.0)], -1)
    n = Neighborhood(pts[5], pts, np.linalg.norm(pts - pts[5], axis=1))
    with pytest.raises(DegenerateFitError) as info:
        fit_quadric_iterative(n)
    assert info.value.rank < 6


def test_batched_fit_matches_single():
    ns = [sphere_patch(r, extent=0.01 * r) for r in (0.5, 1.0, 3.0)]
    k = max(len(n) for n in ns)
    pts = np.zeros((3, k, 3))
    mask = np.zeros((3, k), bool)
    dist = np.zeros((3, k))
    for i, n in enumerate(ns):
        pts[i, : len(n)], mask[i, : len(n)], dist[i, : len(n)] = n.members, True, n.distances
    anchors = np.array([n.center for n in ns])
    params, rep, _ = fit_quadrics(NeighborhoodBatch(pts, mask, dist, -np.ones((3, k), int)), anchors)
    for i, r in enumerate((0.5, 1.0, 3.0)):
        k1, k2 = curvatures_from_abc(*params[i, 3:])
        assert abs(k1 - 1 / r) < 1e-4 and abs(k2 - 1 / r) < 1e-4
    assert rep.valid.all()


# --- fair function -------------------------------------------------------------


def test_fair_weight_values():
    assert fair_weight(0.0, 0.0, 1.0) == 1.0
    assert fair_weight(1.0, 0.0, 1.0) == 0.5
    assert fair_weight(0.0, 1.0, 1.0) == 0.5
    with pytest.raises(ValueError):
        fair_weight(0.0, 0.0, 0.0)


@given(st.floats(-1, 1), st.floats(0, 1), st.floats(1e-3, 1))
def test_fair_cost_derivative_is_weighted_residual(r, d, n):
    h = 1e-7
    num = (fair_cost(r + h, d, n) - fair_cost(r - h, d, n)) / (2 * h)
    assert num == pytest.approx(fair_weight(r, d, n) * r, abs=1e-6)


# --- curvature maps -------------------------------------------------------------


def test_curvature_map_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cm = CurvatureMap(rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.random((4, 5)) > 0.5)
    write_curvature_map(tmp_path / "c.curv", cm)
    back = read_curvature_map(tmp_path / "c.curv")
    assert np.allclose(back.k1, cm.k1, rtol=1e-6) and np.array_equal(back.valid, cm.valid)
    write_curvature_csv(tmp_path / "c.csv", cm)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "k1,k2,valid" and len(rows) == 21


def test_curvature_map_bad_magic(tmp_path):
    (tmp_path / "x.curv").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        read_curvature_map(tmp_path / "x.curv")
