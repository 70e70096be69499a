"""Ray-traced synthetic depth frames with exact ground truth.

Scenes are built from planes, spheres and finite cylinders expressed in the
world frame (the frame of camera 0).  Camera poses map camera coordinates to
world coordinates.  Every hit pixel carries its analytic principal curvatures:
spheres ``(1/r, 1/r)``, cylinders ``(1/r, 0)``, planes ``(0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .quadric import CurvatureMap
from .rigid import RigidTransform
from .surface import DEPTH_MAX, DEPTH_MIN, DepthFrame, Intrinsics, pixel_grid

KINECT = Intrinsics(525.0, 525.0, 319.5, 239.5)
DEFAULT_SIZE = (160, 120)


def default_intrinsics(width: int = DEFAULT_SIZE[0], height: int = DEFAULT_SIZE[1]) -> Intrinsics:
    """Kinect-like intrinsics rescaled to ``width`` x ``height``."""
    return KINECT.scaled(width / 640.0)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray

    kind = "plane"

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, float))
        object.__setattr__(self, "normal", _unit(self.normal))

    def intersect(self, o, d):
        den = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.point - o) @ self.normal) / den
        s = np.where(np.abs(den) > 1e-12, s, np.inf)
        hit = o + s[:, None] * d
        return s, np.broadcast_to(self.normal, hit.shape)

    def curvature(self, n):
        return np.zeros(n), np.zeros(n)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    kind = "sphere"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, o, d):
        oc = o - self.center
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * d @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            s = (-b - np.sqrt(disc)) / (2 * a)
        s = np.where(disc >= 0, s, np.inf)
        hit = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
        return s, (hit - self.center) / self.radius

    def curvature(self, n):
        k = 1.0 / self.radius
        return np.full(n, k), np.full(n, k)


@dataclass(frozen=True)
class Cylinder:
    point: np.ndarray
    axis: np.ndarray
    radius: float
    half_length: float = np.inf

    kind = "cylinder"

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, float))
        object.__setattr__(self, "axis", _unit(self.axis))
        if not self.radius > 0:
            raise ValueError("cylinder radius must be positive")

    def intersect(self, o, d):
        ax = self.axis
        oc = o - self.point
        dp = d - np.outer(d @ ax, ax)
        op = oc - (oc @ ax) * ax
        a = np.einsum("ij,ij->i", dp, dp)
        b = 2.0 * dp @ op
        c = op @ op - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (-b - np.sqrt(disc)) / (2 * a)
        s = np.where((disc >= 0) & (a > 1e-15), s, np.inf)
        hit = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
        along = (hit - self.point) @ ax
        s = np.where(np.abs(along) <= self.half_length, s, np.inf)
        radial = hit - self.point - along[:, None] * ax
        return s, radial / self.radius

    def curvature(self, n):
        return np.full(n, 1.0 / self.radius), np.zeros(n)


Primitive = Plane | Sphere | Cylinder


@dataclass
class Scene:
    primitives: list
    name: str = "scene"
    description: str = ""


@dataclass
class GroundTruth:
    depth: np.ndarray  # exact depth, 0 on misses
    normals: np.ndarray  # (H, W, 3) camera frame, camera facing
    curvature: CurvatureMap
    label: np.ndarray  # primitive index, -1 on misses


def _primitive_from_dict(d: dict):
    kind = d.get("type")
    if kind == "plane":
        return Plane(d["point"], d["normal"])
    if kind == "sphere":
        return Sphere(d["center"], float(d["radius"]))
    if kind == "cylinder":
        return Cylinder(d["point"], d["axis"], float(d["radius"]), float(d.get("half_length", np.inf)))
    raise ValueError(f"unknown primitive type {kind!r}")


def scene_from_dict(d: dict) -> Scene:
    prims = d.get("primitives")
    if not prims:
        raise ValueError("scene has no primitives")
    return Scene([_primitive_from_dict(p) for p in prims], d.get("name", "scene"), d.get("description", ""))


def load_scene(name_or_path: str | Path) -> Scene:
    """Load a shipped scene by name (``synth1`` ...) or a YAML scene file."""
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml") or p.exists():
        if not p.exists():
            raise FileNotFoundError(p)
        return scene_from_dict(yaml.safe_load(p.read_text()))
    res = resources.files("jointquad") / "scenes" / f"{name_or_path}.yaml"
    if not res.is_file():
        raise ValueError(f"unknown scene {name_or_path!r}")
    return scene_from_dict(yaml.safe_load(res.read_text()))


def shipped_scenes() -> list[str]:
    root = resources.files("jointquad") / "scenes"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def render_depth(
    scene: Scene,
    camera: RigidTransform,
    intrinsics: Intrinsics | None = None,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> tuple[DepthFrame, GroundTruth]:
    """Nearest-hit ray casting of every pixel centre."""
    w, h = size
    k = intrinsics or default_intrinsics(w, h)
    u, v = pixel_grid(h, w)
    dirs_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], -1).reshape(-1, 3)
    # parameterising rays by camera depth: hit = o + depth * R d_cam
    d = dirs_cam @ camera.R.T
    o = camera.t
    best = np.full(len(d), np.inf)
    normal = np.zeros_like(d)
    label = -np.ones(len(d), int)
    for i, prim in enumerate(scene.primitives):
        s, nrm = prim.intersect(o, d)
        closer = (s > 1e-9) & (s < best)
        best[closer] = s[closer]
        normal[closer] = nrm[closer]
        label[closer] = i
    hit = np.isfinite(best) & (best > DEPTH_MIN) & (best < DEPTH_MAX)
    label[~hit] = -1
    depth = np.where(hit, best, 0.0)
    n_cam = normal @ camera.R
    flip = np.einsum("ij,ij->i", n_cam, dirs_cam) > 0
    n_cam[flip] *= -1
    n_cam[~hit] = 0.0
    k1 = np.zeros(len(d))
    k2 = np.zeros(len(d))
    for i, prim in enumerate(scene.primitives):
        sel = label == i
        k1[sel], k2[sel] = prim.curvature(int(sel.sum()))
    curv = CurvatureMap(k1.reshape(h, w), k2.reshape(h, w), hit.reshape(h, w))
    gt = GroundTruth(depth.reshape(h, w), n_cam.reshape(h, w, 3), curv, label.reshape(h, w))
    return DepthFrame(depth.reshape(h, w), k), gt


@dataclass(frozen=True)
class NoiseModel:
    sigma_level: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_level < 0:
            raise ValueError("sigma_level must be >= 0")


def add_noise(frame: DepthFrame, model: NoiseModel, stream: int = 0) -> DepthFrame:
    """Depth-proportional Gaussian noise along the viewing rays.

    Each level adds 1 % of the depth as standard deviation.  Draws come from a
    counter-based Philox stream keyed by ``(seed, stream)`` in row-major pixel
    order, so results do not depend on how the work is scheduled.
    """
    if model.sigma_level == 0:
        return frame
    key = np.array([model.seed, stream], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    eta = rng.standard_normal(frame.depth.shape)
    z = frame.depth
    valid = z > 0
    noisy = z + eta * 0.01 * model.sigma_level * z
    lo, hi = np.nextafter(DEPTH_MIN, np.inf), np.nextafter(DEPTH_MAX, -np.inf)
    noisy = np.where(valid, np.clip(noisy, lo, hi), 0.0)
    return DepthFrame(noisy, frame.intrinsics)


def rail_trajectory(step: float, count: int) -> list[RigidTransform]:
    """Pure translations along the camera x-axis, ``k * step`` for frame ``k``."""
    if not step > 0:
        raise ValueError("step must be positive")
    if count < 1:
        raise ValueError("count must be >= 1")
    return [RigidTransform.translation(k * step, 0.0, 0.0) for k in range(count)]


@dataclass
class SyntheticSequence:
    frames: list  # noisy DepthFrames
    truth: list  # GroundTruth per frame
    poses: list  # true camera-to-world poses
    noise: NoiseModel = field(default_factory=NoiseModel)


def make_sequence(
    scene: Scene | str,
    count: int,
    step: float = 0.010,
    noise: NoiseModel = NoiseModel(),
    size: tuple[int, int] = DEFAULT_SIZE,
    intrinsics: Intrinsics | None = None,
) -> SyntheticSequence:
    if isinstance(scene, str):
        scene = load_scene(scene)
    poses = rail_trajectory(step, count)
    frames, truth = [], []
    for k, T in enumerate(poses):
        f, gt = render_depth(scene, T, intrinsics, size)
        frames.append(add_noise(f, noise, stream=k))
        truth.append(gt)
    return SyntheticSequence(frames, truth, poses, noise)
