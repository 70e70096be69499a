"""Organized point sets: depth back-projection, normals, neighborhoods, association."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rigid import RigidTransform

DEPTH_MIN, DEPTH_MAX = 0.1, 20.0
_MAGIC = b"DFRM"
_HEADER = struct.Struct("<4sII4d")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) of (..., 3) points."""
        z = points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points[..., 0] / z + self.cx
            v = self.fy * points[..., 1] / z + self.cy
        return u, v

    def scaled(self, factor: float) -> Intrinsics:
        """Intrinsics for an image resized by ``factor`` (pixel centres preserved)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


@dataclass(frozen=True)
class DepthFrame:
    depth: np.ndarray  # (H, W) metres, 0 = invalid
    intrinsics: Intrinsics

    def __post_init__(self) -> None:
        d = np.asarray(self.depth, dtype=float)
        if d.ndim != 2:
            raise ValueError("depth must be a 2-D grid")
        bad = (d != 0) & ~((d > DEPTH_MIN) & (d < DEPTH_MAX))
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} depth values outside ({DEPTH_MIN}, {DEPTH_MAX}) m")
        k = self.intrinsics
        h, w = d.shape
        if not (k.fx > 0 and k.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= k.cx < w and 0 <= k.cy < h):
            raise ValueError("principal point outside the image")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def write_depth_frame(path: str | Path, frame: DepthFrame) -> None:
    k = frame.intrinsics
    header = _HEADER.pack(_MAGIC, frame.width, frame.height, k.fx, k.fy, k.cx, k.cy)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frame.depth.astype("<f4").tobytes())


def read_depth_frame(path: str | Path) -> DepthFrame:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated depth frame header")
    magic, w, h, fx, fy, cx, cy = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * w * h:
        raise ValueError(f"{path}: expected {w * h} depths, got {len(body) // 4}")
    depth = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(float)
    return DepthFrame(depth, Intrinsics(fx, fy, cx, cy))


@dataclass(frozen=True)
class Surface:
    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool
    intrinsics: Intrinsics
    normals: np.ndarray | None = None  # (H, W, 3), unit, camera facing
    normal_valid: np.ndarray | None = None
    frame_id: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:height, 0:width]
    return u.astype(float), v.astype(float)


def backproject(frame: DepthFrame, frame_id: int = 0) -> Surface:
    z = frame.depth
    k = frame.intrinsics
    u, v = pixel_grid(*z.shape)
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)
    valid = z > 0
    pts[~valid] = 0.0
    return Surface(pts, valid, k, frame_id=frame_id)


def _window_stack(arr: np.ndarray, half: int, fill) -> np.ndarray:
    """Stack every (2*half+1)^2 shifted copy of ``arr`` along a new axis 2."""
    h, w = arr.shape[:2]
    pad = [(half, half), (half, half)] + [(0, 0)] * (arr.ndim - 2)
    p = np.pad(arr, pad, constant_values=fill)
    out = []
    for dv in range(2 * half + 1):
        for du in range(2 * half + 1):
            out.append(p[dv:dv + h, du:du + w])
    return np.stack(out, axis=2)


def estimate_normals(s: Surface, window: int = 7, depth_gate: float = 0.1) -> Surface:
    """Covariance normals over a square pixel window, oriented toward the camera.

    Neighbours whose depth differs from the centre by more than ``depth_gate``
    metres are ignored so that normals do not mix across occlusion edges.
    Points with fewer than 6 supporting neighbours are marked normal-invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    half = window // 2
    P = _window_stack(s.points, half, 0.0)  # (H, W, K, 3)
    V = _window_stack(s.valid, half, False)
    V &= np.abs(P[..., 2] - s.points[..., 2][..., None]) <= depth_gate
    V &= s.valid[..., None]
    cnt = V.sum(axis=2)
    wts = V.astype(float)
    denom = np.maximum(cnt, 1)[..., None]
    mean = np.einsum("hwk,hwkc->hwc", wts, P) / denom
    D = (P - mean[:, :, None, :]) * wts[..., None]
    cov = np.einsum("hwki,hwkj->hwij", D, D) / denom[..., None]
    ok = cnt >= 6
    cov[~ok] = np.eye(3)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[..., :, 0]
    flip = np.einsum("hwc,hwc->hw", n, s.points) > 0
    n[flip] *= -1.0
    n[~ok] = 0.0
    return replace(s, normals=n, normal_valid=ok)


@dataclass
class Neighborhood:
    """Points around a centre with their distances; all in one frame."""

    center: np.ndarray
    members: np.ndarray  # (K, 3)
    distances: np.ndarray  # (K,)
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=float)
        self.members = np.asarray(self.members, dtype=float).reshape(-1, 3)
        self.distances = np.asarray(self.distances, dtype=float)
        if self.weights is None:
            self.weights = np.ones(len(self.members))

    def __len__(self) -> int:
        return len(self.members)


def _window_half_size(intr: Intrinsics, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Conservative pixel half-width covering a ball of ``radii`` around ``centers``."""
    z = centers[..., 2]
    zmin = np.maximum(z - radii, 1e-6)
    f = max(intr.fx, intr.fy)
    lateral = np.maximum(np.abs(centers[..., 0]), np.abs(centers[..., 1]))
    half = f * radii * (z + lateral) / (zmin * np.maximum(z, 1e-6))
    return np.ceil(half).astype(int) + 1


@dataclass
class NeighborhoodBatch:
    """Padded neighbourhoods for many centres gathered from one surface.

    ``points`` is (N, K, 3), ``mask`` marks real members, ``dist`` holds the
    Euclidean distance of every member to its centre.  ``pixel`` is the flat
    pixel index of each member (or -1).
    """

    points: np.ndarray
    mask: np.ndarray
    dist: np.ndarray
    pixel: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def gather_neighborhoods(
    s: Surface,
    centers: np.ndarray,
    radii: np.ndarray | float,
    max_half: int = 40,
) -> NeighborhoodBatch:
    """Vectorised ``neighborhood`` for an (N, 3) array of centres.

    Centres behind the camera or projecting outside the image yield empty
    rows.  Each centre scans its own conservative pixel window (clipped at
    ``max_half`` pixels); rows sharing a window size are processed together.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = len(centers)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (n,))
    h, w = s.shape
    z = centers[:, 2]
    front = z > 1e-6
    u, v = s.intrinsics.project(np.where(front[:, None], centers, 1.0))
    ui = np.where(front, np.round(u), -1).astype(int)
    vi = np.where(front, np.round(v), -1).astype(int)
    inside = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    if not np.any(inside):
        k = 1
        return NeighborhoodBatch(
            np.zeros((n, k, 3)), np.zeros((n, k), bool), np.zeros((n, k)), -np.ones((n, k), int)
        )
    halves = np.zeros(n, int)
    halves[inside] = np.minimum(_window_half_size(s.intrinsics, centers[inside], radii[inside]), max_half)
    # rows with the same window size are scanned together
    parts = []
    for half in np.unique(halves[inside]):
        rows = np.flatnonzero(inside & (halves == half))
        parts.append((rows, _scan(s, centers[rows], radii[rows], ui[rows], vi[rows], int(half))))
    k = max(p[1][0].shape[1] for p in parts)
    pts = np.zeros((n, k, 3))
    ok = np.zeros((n, k), bool)
    d = np.zeros((n, k))
    pix = -np.ones((n, k), int)
    for rows, (p_, o_, d_, x_) in parts:
        c = p_.shape[1]
        pts[rows, :c], ok[rows, :c], d[rows, :c], pix[rows, :c] = p_, o_, d_, x_
    return NeighborhoodBatch(pts, ok, d, pix)


def _scan(s: Surface, centers, radii, ui, vi, half: int):
    h, w = s.shape
    offs = np.arange(-half, half + 1)
    dv, du = np.meshgrid(offs, offs, indexing="ij")
    uu = ui[:, None] + du.ravel()[None, :]
    vv = vi[:, None] + dv.ravel()[None, :]
    inb = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
    flat = np.where(inb, vv * w + uu, 0)
    ok = inb & s.valid.reshape(-1)[flat]
    pts = s.points.reshape(-1, 3)[flat]
    diff = pts - centers[:, None, :]
    d = np.sqrt(np.einsum("nkc,nkc->nk", diff, diff))
    ok &= d <= radii[:, None]
    # pack members to the front of each row, then cut to the largest count
    kmax = max(int(ok.sum(axis=1).max()), 1)
    order = np.argsort(~ok, axis=1, kind="stable")[:, :kmax]
    ok = np.take_along_axis(ok, order, axis=1)
    pts = np.take_along_axis(pts, order[..., None], axis=1) * ok[..., None]
    d = np.take_along_axis(d, order, axis=1) * ok
    pix = np.where(ok, np.take_along_axis(flat, order, axis=1), -1)
    return pts, ok, d, pix


def neighborhood(s: Surface, center: np.ndarray, radius: float) -> Neighborhood:
    """All valid points of ``s`` within ``radius`` metres of ``center``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    b = gather_neighborhoods(s, np.asarray(center, dtype=float)[None], radius, max_half=10**6)
    m = b.mask[0]
    return Neighborhood(center, b.points[0][m], b.dist[0][m])


def default_radius(depth: np.ndarray | float, radius_scale: float) -> np.ndarray:
    return radius_scale * np.asarray(depth, dtype=float)


@dataclass
class Association:
    """Result of projective data association for a batch of query points."""

    ok: np.ndarray  # (N,) bool
    pixel: np.ndarray  # (N,) flat pixel index, -1 where not ok
    points: np.ndarray  # (N, 3) associated target points
    normals: np.ndarray  # (N, 3) associated target normals
    gap: np.ndarray  # (N,) Euclidean gap


def associate(
    s: Surface,
    points: np.ndarray,
    normals: np.ndarray | None = None,
    gap_reject: float = 0.10,
    angle_reject: float = math.radians(30.0),
) -> Association:
    """Projective association of (N, 3) points (already in ``s``'s frame).

    Optional ``normals`` (N, 3) enable the normal-angle gate.
    """
    if s.normals is None:
        raise ValueError("target surface has no normals; call estimate_normals first")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    h, w = s.shape
    z = points[:, 2]
    front = z > 1e-6
    safe = np.where(front[:, None], points, 1.0)
    u, v = s.intrinsics.project(safe)
    ui = np.round(u).astype(int)
    vi = np.round(v).astype(int)
    ok = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    flat = np.where(ok, vi * w + ui, 0)
    q = s.points.reshape(-1, 3)[flat]
    n = s.normals.reshape(-1, 3)[flat]
    ok &= s.valid.reshape(-1)[flat] & s.normal_valid.reshape(-1)[flat]
    gap = np.linalg.norm(points - q, axis=1)
    ok &= gap <= gap_reject
    if normals is not None:
        cosang = np.einsum("ij,ij->i", np.asarray(normals).reshape(-1, 3), n)
        ok &= cosang >= math.cos(angle_reject)
    return Association(ok, np.where(ok, flat, -1), q, n, np.where(ok, gap, np.inf))


def closest_point_projective(
    s: Surface,
    p: np.ndarray,
    gap_reject: float = 0.10,
    angle_reject: float = math.radians(30.0),
    normal: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray] | None:
    a = associate(
        s,
        np.asarray(p, dtype=float)[None],
        None if normal is None else np.asarray(normal, dtype=float)[None],
        gap_reject,
        angle_reject,
    )
    if not a.ok[0]:
        return None
    return a.points[0].copy(), a.normals[0].copy()


def transformed_normals(T: RigidTransform, normals: np.ndarray) -> np.ndarray:
    return normals @ T.R.T


def write_ply(path: str | Path, s: Surface) -> None:
    """ASCII PLY with x y z nx ny nz for every valid point."""
    pts = s.points[s.valid]
    if s.normals is not None:
        nrm = s.normals[s.valid]
    else:
        nrm = np.zeros_like(pts)
    header = "\n".join(
        [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(pts)}",
            *(f"property float {c}" for c in ("x", "y", "z", "nx", "ny", "nz")),
            "end_header",
        ]
    )
    body = "\n".join(" ".join(f"{x:.9g}" for x in row) for row in np.hstack([pts, nrm]))
    Path(path).write_text(header + "\n" + body + ("\n" if len(pts) else ""))
