"""Shared builders for the test-suite."""

import numpy as np

from jointquad.schur import BlockSystem


def random_block_system(rng, P, N, density=0.6, ridge=0.5):
    """SPD block system assembled from random residual blocks.

    Every stored (pose, quadric) pair receives an 8x12 Jacobian, so A, C and
    B are consistent with a real least-squares problem.  ``ridge`` keeps the
    blocks well conditioned.
    """
    A = np.zeros((P, 6, 6))
    C = np.zeros((N, 6, 6))
    pairs = [(p, q) for q in range(N) for p in range(P) if rng.random() < density]
    B = np.zeros((len(pairs), 6, 6))
    for k, (p, q) in enumerate(pairs):
        J = rng.normal(size=(8, 12))
        A[p] += J[:, :6].T @ J[:, :6]
        C[q] += J[:, 6:].T @ J[:, 6:]
        B[k] = J[:, :6].T @ J[:, 6:]
    A += ridge * np.eye(6)
    C += ridge * np.eye(6)
    bp = np.array([p for p, _ in pairs], int)
    bq = np.array([q for _, q in pairs], int)
    return BlockSystem(A, C, bp, bq, B, rng.normal(size=(P, 6)), rng.normal(size=(N, 6)))


def relative_max_error(got, want):
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300))
