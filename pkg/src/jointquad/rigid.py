"""Rigid-motion algebra: 4x4 transforms, se(3) generators and the exponential map.

Motion vectors are ordered ``(theta_x, theta_y, theta_z, t_x, t_y, t_z)``; every
Jacobian column in the package follows the same ordering.  Updates compose on
the left, ``T_new = exp(sum_i delta_i G_i) @ T``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

REORTHONORMALIZE_EVERY = 50

_GENERATORS = np.zeros((6, 4, 4))
# rotation generators: skew(e_i) in the upper-left block
_GENERATORS[0, 1, 2], _GENERATORS[0, 2, 1] = -1.0, 1.0
_GENERATORS[1, 0, 2], _GENERATORS[1, 2, 0] = 1.0, -1.0
_GENERATORS[2, 0, 1], _GENERATORS[2, 1, 0] = -1.0, 1.0
# translation generators: single 1 in the last column
_GENERATORS[3, 0, 3] = 1.0
_GENERATORS[4, 1, 3] = 1.0
_GENERATORS[5, 2, 3] = 1.0
_GENERATORS.setflags(write=False)


def generator(index: int) -> np.ndarray:
    """Return the constant basis matrix ``G_index`` of se(3)."""
    if not isinstance(index, (int, np.integer)) or not 0 <= index < 6:
        raise ValueError(f"generator index must be in 0..5, got {index!r}")
    return _GENERATORS[index].copy()


def generators() -> np.ndarray:
    """All six generators stacked as a (6, 4, 4) read-only array."""
    return _GENERATORS


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor terms keep the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def se3_exp(delta: np.ndarray) -> np.ndarray:
    """Closed-form exponential of ``sum_i delta_i G_i`` as a 4x4 matrix."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise ValueError("motion vector must be finite")
    w, v = delta[:3], delta[3:]
    theta = float(np.linalg.norm(w))
    K = skew(w)
    K2 = K @ K
    if theta < 1e-8:
        R = np.eye(3) + K + 0.5 * K2
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + s / theta * K + (1.0 - c) / theta**2 * K2
        V = np.eye(3) + (1.0 - c) / theta**2 * K + (theta - s) / theta**3 * K2
    out = np.eye(4)
    out[:3, :3] = R
    out[:3, 3] = V @ v
    return out


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


class RigidTransform:
    """Immutable element of SE(3) stored as a homogeneous 4x4 matrix."""

    __slots__ = ("_m", "_compositions")

    def __init__(self, matrix: np.ndarray | None = None, *, _compositions: int = 0):
        m = np.eye(4) if matrix is None else np.array(matrix, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform contains non-finite entries")
        m[3] = (0.0, 0.0, 0.0, 1.0)
        if _compositions >= REORTHONORMALIZE_EVERY:
            m[:3, :3] = orthonormalize(m[:3, :3])
            _compositions = 0
        m.setflags(write=False)
        self._m = m
        self._compositions = _compositions

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Sequence[float]) -> RigidTransform:
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = t
        return cls(m)

    @classmethod
    def translation(cls, x: float, y: float, z: float) -> RigidTransform:
        return cls.from_rt(np.eye(3), (x, y, z))

    @classmethod
    def rotation(cls, axis: Sequence[float], angle: float) -> RigidTransform:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls.from_rt(so3_exp(axis * angle), (0.0, 0.0, 0.0))

    @classmethod
    def exp(cls, delta: np.ndarray) -> RigidTransform:
        return cls(se3_exp(delta))

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def R(self) -> np.ndarray:
        return self._m[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self._m[:3, 3]

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        n = max(self._compositions, other._compositions) + 1
        return RigidTransform(self._m @ other._m, _compositions=n)

    def inverse(self) -> RigidTransform:
        return invert(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def __repr__(self) -> str:
        return f"RigidTransform(t={np.array2string(self.t, precision=6)})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RigidTransform) and np.array_equal(self._m, other._m)

    def __hash__(self) -> int:
        return hash(self._m.tobytes())


def exp_update(T: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Left-compose the exponential of ``delta`` onto ``T``."""
    return RigidTransform.exp(delta) @ T


def transform_point(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    return T.apply(p)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.R.T
    return RigidTransform.from_rt(Rt, -Rt @ T.t)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = 0.5 * (np.trace(R) - 1.0)
    # acos is ill-conditioned near 0; use the sine from the skew part instead
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def write_trajectory(path: str | Path, poses: Iterable[RigidTransform]) -> None:
    """Write ``frame_index tx ty tz qx qy qz qw`` lines (scalar-last quaternion)."""
    lines = []
    for k, T in enumerate(poses):
        q = Rotation.from_matrix(T.R).as_quat()
        vals = " ".join(f"{v:.17g}" for v in (*T.t, *q))
        lines.append(f"{k} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> list[RigidTransform]:
    poses: dict[int, RigidTransform] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        idx = int(fields[0])
        vals = np.array([float(f) for f in fields[1:]])
        R = Rotation.from_quat(vals[3:]).as_matrix()
        poses[idx] = RigidTransform.from_rt(R, vals[:3])
    if sorted(poses) != list(range(len(poses))):
        raise ValueError(f"{path}: frame indices must be 0..N-1")
    return [poses[k] for k in range(len(poses))]
