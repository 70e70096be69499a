import numpy as np
import pytest

from jointquad.rigid import RigidTransform, invert
from jointquad.surface import DepthFrame, Intrinsics
from jointquad.synth import (
    Cylinder,
    NoiseModel,
    Plane,
    Scene,
    Sphere,
    add_noise,
    load_scene,
    make_sequence,
    rail_trajectory,
    render_depth,
    scene_from_dict,
    shipped_scenes,
)

K = Intrinsics(100.0, 100.0, 40.0, 30.0)


def test_frontal_plane_depth():
    f, gt = render_depth(Scene([Plane([0, 0, 2], [0, 0, -1])]), RigidTransform(), K, (80, 60))
    assert f.depth[30, 40] == 2.0
    assert np.all(f.depth >= 2.0)
    assert np.all(gt.curvature.k1 == 0) and np.all(gt.curvature.k2 == 0)
    assert gt.curvature.valid.all()


def test_tilted_plane_hits_lie_on_plane():
    n = np.array([0.3, 0.0, -1.0])
    f, gt = render_depth(Scene([Plane([0, 0, 2], n)]), RigidTransform(), K, (80, 60))
    v, u = np.mgrid[0:60, 0:80]
    pts = np.stack([(u - K.cx) * f.depth / K.fx, (v - K.cy) * f.depth / K.fy, f.depth], -1)
    assert np.max(np.abs((pts - [0, 0, 2]) @ n)) < 1e-12


def test_sphere_curvature_exact():
    f, gt = render_depth(Scene([Sphere([0, 0, 3], 0.5)]), RigidTransform(), K, (80, 60))
    hit = gt.curvature.valid
    assert hit.sum() > 100 and not hit.all()
    assert np.all(gt.curvature.k1[hit] == 2.0) and np.all(gt.curvature.k2[hit] == 2.0)
    assert np.all(f.depth[~hit] == 0)


def test_cylinder_curvature_exact():
    f, gt = render_depth(Scene([Cylinder([0, 0, 3], [0, 1, 0], 0.25)]), RigidTransform(), K, (80, 60))
    hit = gt.curvature.valid
    assert hit.sum() > 100
    assert np.all(gt.curvature.k1[hit] == 4.0) and np.all(gt.curvature.k2[hit] == 0.0)


def test_sphere_depth_analytic():
    f, gt = render_depth(Scene([Sphere([0, 0, 3], 0.5)]), RigidTransform(), K, (80, 60))
    assert f.depth[30, 40] == pytest.approx(2.5, abs=1e-12)
    p = np.array([0, 0, 2.5])
    assert np.allclose(gt.normals[30, 40], [0, 0, -1])


def test_moved_camera_sees_shifted_scene():
    scene = Scene([Plane([0, 0, 2], [0, 0, -1])])
    f, _ = render_depth(scene, RigidTransform.translation(0, 0, 0.5), K, (80, 60))
    assert f.depth[30, 40] == pytest.approx(1.5, abs=1e-12)


def test_zero_noise_identical():
    f, _ = render_depth(load_scene("synth1"), RigidTransform())
    assert add_noise(f, NoiseModel(0, 7)) is f


def test_noise_statistics():
    z = np.full((250, 400), 2.0)
    f = DepthFrame(z, Intrinsics(100, 100, 200, 125))
    g = add_noise(f, NoiseModel(1, 11))
    eta = g.depth - z
    assert eta.size == 10**5
    assert abs(eta.std() - 0.02) < 0.02 * 0.02
    assert abs(eta.mean()) < 3 * 0.02 / np.sqrt(eta.size)


def test_noise_deterministic_and_stream_dependent():
    f, _ = render_depth(load_scene("synth2"), RigidTransform())
    a = add_noise(f, NoiseModel(2, 5), stream=1)
    b = add_noise(f, NoiseModel(2, 5), stream=1)
    c = add_noise(f, NoiseModel(2, 5), stream=2)
    assert np.array_equal(a.depth, b.depth)
    assert not np.array_equal(a.depth, c.depth)
    assert np.array_equal(a.depth > 0, f.depth > 0)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(-1)


def test_rail_examples():
    r = rail_trajectory(0.010, 3)
    assert [p.t[0] for p in r] == pytest.approx([0.0, 0.010, 0.020])
    assert all(np.array_equal(p.R, np.eye(3)) for p in r)
    one = rail_trajectory(0.3, 1)
    assert len(one) == 1 and np.array_equal(one[0].matrix, np.eye(4))


def test_rail_uniform_relative_motion():
    r = rail_trajectory(0.01, 6)
    rel = [(invert(a) @ b).matrix for a, b in zip(r, r[1:])]
    for m in rel[1:]:
        assert np.allclose(m, rel[0], atol=1e-15)


def test_rail_validation():
    with pytest.raises(ValueError):
        rail_trajectory(0.0, 3)
    with pytest.raises(ValueError):
        rail_trajectory(0.01, 0)


@pytest.mark.parametrize("name", ["synth1", "synth2", "synth3"])
def test_shipped_scenes_in_depth_range(name):
    assert name in shipped_scenes()
    seq = make_sequence(name, 10)
    for f in seq.frames:
        d = f.depth[f.depth > 0]
        assert d.size > 0.9 * f.depth.size
        assert d.min() > 0.3 and d.max() < 10.0
    labels = np.unique(seq.truth[0].label)
    assert len(labels[labels >= 0]) >= 3


def test_scene_validation(tmp_path):
    with pytest.raises(ValueError):
        scene_from_dict({"primitives": []})
    with pytest.raises(ValueError):
        scene_from_dict({"primitives": [{"type": "torus"}]})
    with pytest.raises(ValueError):
        Sphere([0, 0, 1], -1.0)
    with pytest.raises(ValueError):
        load_scene("nope")
    p = tmp_path / "s.yaml"
    p.write_text("primitives:\n  - {type: sphere, center: [0, 0, 2], radius: 0.5}\n")
    assert isinstance(load_scene(p).primitives[0], Sphere)
