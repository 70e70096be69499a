"""Block-sparse Schur-complement solver for ``[[A, B], [B^T, C]] [x; y] = [a; b]``.

``A`` holds one 6x6 block per free pose, ``C`` one 6x6 block per quadric, and
``B`` only the (pose, quadric) blocks that share at least one residual.  The
pose system ``G = A - B C^-1 B^T`` is solved first, then the quadric updates
are back-substituted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK = 6
COND_LIMIT = 1e12


class SingularBlockError(np.linalg.LinAlgError):
    """One or more C blocks cannot be inverted; ``indices`` lists them."""

    def __init__(self, indices):
        self.indices = np.asarray(indices, dtype=int)
        super().__init__(f"{self.indices.size} singular quadric block(s): {self.indices[:10].tolist()}")


class RankDeficientPoseError(np.linalg.LinAlgError):
    """The reduced pose matrix G is not positive definite."""


@dataclass
class BlockSystem:
    A: np.ndarray  # (P, 6, 6)
    C: np.ndarray  # (N, 6, 6)
    B_pose: np.ndarray  # (K,) pose index of each stored B block
    B_quad: np.ndarray  # (K,) quadric index of each stored B block
    B: np.ndarray  # (K, 6, 6)
    a: np.ndarray  # (P, 6)
    b: np.ndarray  # (N, 6)

    @property
    def num_poses(self) -> int:
        return len(self.A)

    @property
    def num_quadrics(self) -> int:
        return len(self.C)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Assemble the full matrix and right-hand side (tests and debugging only)."""
        P, N = self.num_poses, self.num_quadrics
        n = BLOCK * (P + N)
        M = np.zeros((n, n))
        for i in range(P):
            M[6 * i:6 * i + 6, 6 * i:6 * i + 6] = self.A[i]
        for q in range(N):
            o = 6 * (P + q)
            M[o:o + 6, o:o + 6] = self.C[q]
        for p, q, blk in zip(self.B_pose, self.B_quad, self.B):
            r, c = 6 * p, 6 * (P + q)
            M[r:r + 6, c:c + 6] += blk
            M[c:c + 6, r:r + 6] += blk.T
        return M, np.concatenate([self.a.ravel(), self.b.ravel()])


@dataclass
class SchurStats:
    largest_array: int = 0  # element count of the largest intermediate
    full_size: int = 0  # element count the dense system would need
    G: np.ndarray | None = field(default=None, repr=False)

    def note(self, arr: np.ndarray) -> None:
        self.largest_array = max(self.largest_array, int(arr.size))


def _jacobi(blocks: np.ndarray) -> np.ndarray:
    d = np.einsum("...ii->...i", blocks)
    return np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 1.0)


def block_condition(blocks: np.ndarray) -> np.ndarray:
    s = _jacobi(blocks)
    scaled = blocks * s[..., :, None] * s[..., None, :]
    ev = np.linalg.eigvalsh(scaled)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ev[..., 0] > 0, ev[..., -1] / ev[..., 0], np.inf)


def invert_blocks(blocks: np.ndarray) -> np.ndarray:
    """Invert symmetric positive-definite 6x6 blocks via scaled Cholesky."""
    s = _jacobi(blocks)
    scaled = blocks * s[..., :, None] * s[..., None, :]
    L = np.linalg.cholesky(scaled)
    eye = np.broadcast_to(np.eye(blocks.shape[-1]), blocks.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    return inv * s[..., :, None] * s[..., None, :]


def _cholesky_solve(G: np.ndarray, r: np.ndarray) -> np.ndarray:
    s = _jacobi(G)
    Gs = G * s[:, None] * s[None, :]
    try:
        L = np.linalg.cholesky(Gs)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientPoseError("reduced pose matrix is not positive definite") from exc
    ev = np.diag(L) ** 2
    if ev.min() <= ev.max() / COND_LIMIT:
        raise RankDeficientPoseError("reduced pose matrix is numerically singular")
    z = np.linalg.solve(L, r * s)
    return np.linalg.solve(L.T, z) * s


def solve_schur(sys: BlockSystem, stats: SchurStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x, y)`` with shapes (P, 6) and (N, 6).

    Raises :class:`SingularBlockError` naming every C block whose scaled
    condition number exceeds 1e12, and :class:`RankDeficientPoseError` when
    the reduced pose matrix cannot be factorised.
    """
    P, N = sys.num_poses, sys.num_quadrics
    stats = stats if stats is not None else SchurStats()
    stats.full_size = (BLOCK * (P + N)) ** 2
    if N:
        cond = block_condition(sys.C)
        bad = np.flatnonzero(~(cond < COND_LIMIT))
        if bad.size:
            raise SingularBlockError(bad)
        try:
            Cinv = invert_blocks(sys.C)
        except np.linalg.LinAlgError:
            raise SingularBlockError(np.arange(N)) from None
    else:
        Cinv = np.zeros((0, BLOCK, BLOCK))
    stats.note(Cinv)

    bp, bq = np.asarray(sys.B_pose, int), np.asarray(sys.B_quad, int)
    H = sys.B @ Cinv[bq] if len(bq) else np.zeros((0, BLOCK, BLOCK))  # B C^-1 per stored block
    stats.note(H)

    # G = A - B C^-1 B^T, accumulated pose-pair by pose-pair in a fixed order
    G = np.zeros((BLOCK * P, BLOCK * P))
    stats.note(G)
    for i in range(P):
        G[6 * i:6 * i + 6, 6 * i:6 * i + 6] = sys.A[i]
    if len(bq):
        slot = -np.ones((N, P), int)
        slot[bq, bp] = np.arange(len(bq))
        stats.note(slot)
        for i in range(P):
            for j in range(i, P):
                both = (slot[:, i] >= 0) & (slot[:, j] >= 0)
                if not both.any():
                    continue
                ki, kj = slot[both, i], slot[both, j]
                blk = np.einsum("kab,kcb->ac", H[ki], sys.B[kj])
                G[6 * i:6 * i + 6, 6 * j:6 * j + 6] -= blk
                if j != i:
                    G[6 * j:6 * j + 6, 6 * i:6 * i + 6] -= blk.T
    G = 0.5 * (G + G.T)
    stats.G = G

    r = sys.a.reshape(-1).astype(float).copy()
    if len(bq):
        hb = np.einsum("kab,kb->ka", H, sys.b[bq])
        np.add.at(r.reshape(P, BLOCK), bp, -hb)
    x = _cholesky_solve(G, r).reshape(P, BLOCK) if P else np.zeros((0, BLOCK))

    # y = C^-1 (b - B^T x)
    rhs_q = sys.b.astype(float).copy()
    if len(bq):
        btx = np.einsum("kba,kb->ka", sys.B, x[bp])
        np.add.at(rhs_q, bq, -btx)
    y = np.einsum("nab,nb->na", Cinv, rhs_q)
    return x, y


@dataclass(frozen=True)
class MemoryEstimate:
    block_bytes: int
    dense_bytes: int


def memory_estimate(num_poses: int, num_quadrics: int, nnz_B: int) -> MemoryEstimate:
    """Bytes for block storage at 8-byte reals, plus the dense hypothetical."""
    if min(num_poses, num_quadrics, nnz_B) < 0:
        raise ValueError("counts must be non-negative")
    blocks = num_poses + num_quadrics + nnz_B
    rhs = BLOCK * (num_poses + num_quadrics)
    dense = (BLOCK * (num_poses + num_quadrics)) ** 2
    return MemoryEstimate(8 * (BLOCK * BLOCK * blocks + rhs), 8 * dense)
