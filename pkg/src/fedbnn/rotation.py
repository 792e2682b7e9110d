"""Bi-rotation alignment of weights before binarization.

A flat weight vector w of length n1*n2 is viewed row-major as an
n1 x n2 matrix W. The full rotation R = R1 (x) R2 (Kronecker) is never
materialized: with the row-major convention,

    R^T w  ==  vec(R1^T @ W @ R2)         (the rotated weight)
    R   g  ==  vec(R1   @ G @ R2^T)       (the adjoint, used by gradients)

Alternating closed-form updates (sign step + two orthogonal Procrustes
steps) maximize trace(Wb @ R2^T @ W^T @ R1), which is equivalent to
maximizing the cosine between the rotated weight and its sign vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import sign, svd


@dataclass(frozen=True)
class RotationPair:
    """Orthogonal factor pair; r1 is n1 x n1, r2 is n2 x n2."""

    r1: np.ndarray
    r2: np.ndarray

    @property
    def n1(self) -> int:
        return self.r1.shape[0]

    @property
    def n2(self) -> int:
        return self.r2.shape[0]

    @classmethod
    def identity(cls, n1: int, n2: int) -> "RotationPair":
        return cls(np.eye(n1), np.eye(n2))


def matricize(w: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Row-major reshape of a flat vector to n1 x n2; inverse of vectorize."""
    w = np.asarray(w, dtype=np.float64)
    if w.size != n1 * n2:
        raise ValueError(f"cannot matricize length {w.size} as {n1}x{n2}")
    return w.reshape(n1, n2)


def vectorize(wbar: np.ndarray) -> np.ndarray:
    return np.asarray(wbar, dtype=np.float64).reshape(-1)


def rotate(w: np.ndarray, rot: RotationPair) -> np.ndarray:
    """Rotated weight R^T w for flat w, via the matricized form."""
    wbar = matricize(w, rot.n1, rot.n2)
    return (rot.r1.T @ wbar @ rot.r2).reshape(-1)


def rotate_adjoint(g: np.ndarray, rot: RotationPair) -> np.ndarray:
    """Apply R (the adjoint of rotate) to a flat vector."""
    gbar = matricize(g, rot.n1, rot.n2)
    return (rot.r1 @ gbar @ rot.r2.T).reshape(-1)


def binary_target(wbar: np.ndarray, rot: RotationPair) -> np.ndarray:
    """Closed-form +-1 matrix maximizing the trace objective for fixed R1, R2."""
    return sign(rot.r1.T @ wbar @ rot.r2)


def trace_objective(wbar: np.ndarray, wb: np.ndarray, rot: RotationPair) -> float:
    """trace(wb @ R2^T @ wbar^T @ R1) = <wb, R1^T wbar R2> elementwise."""
    return float(np.sum(wb * (rot.r1.T @ wbar @ rot.r2)))


def update_r1(wbar: np.ndarray, wb: np.ndarray, rot: RotationPair) -> np.ndarray:
    """Procrustes step for R1: SVD(wb R2^T wbar^T) = U S V^T, R1 = V U^T."""
    u, _, vt = svd(wb @ rot.r2.T @ wbar.T)
    return vt.T @ u.T


def update_r2(wbar: np.ndarray, wb: np.ndarray, rot: RotationPair) -> np.ndarray:
    """Procrustes step for R2: SVD(wbar^T R1 wb) = U S V^T, R2 = U V^T."""
    u, _, vt = svd(wbar.T @ rot.r1 @ wb)
    return u @ vt


def optimize_rotation(wbar: np.ndarray, rot: RotationPair, n_iters: int = 3,
                      objective_log: list | None = None) -> tuple[RotationPair, np.ndarray]:
    """Alternate (binary target, R1, R2) updates for n_iters passes.

    Returns the final pair and the last binary target. The objective is
    non-decreasing at every sub-step; pass a list as objective_log to
    record it after each of the 3*n_iters updates. An all-zero wbar has
    no well-defined alignment, so the current rotations are kept.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    wbar = np.asarray(wbar, dtype=np.float64)
    if not np.any(wbar):
        return rot, binary_target(wbar, rot)
    for _ in range(n_iters):
        wb = binary_target(wbar, rot)
        if objective_log is not None:
            objective_log.append(trace_objective(wbar, wb, rot))
        rot = RotationPair(update_r1(wbar, wb, rot), rot.r2)
        if objective_log is not None:
            objective_log.append(trace_objective(wbar, wb, rot))
        rot = RotationPair(rot.r1, update_r2(wbar, wb, rot))
        if objective_log is not None:
            objective_log.append(trace_objective(wbar, wb, rot))
    return rot, wb


def cos_phi(w: np.ndarray, rot: RotationPair) -> float:
    """Cosine of the angle between the rotated weight and its sign vector.

    Equals sum|v| / (sqrt(n) * ||w||) for v = R^T w; always in (0, 1]
    for nonzero w because ||R^T w|| = ||w||.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError("cos_phi undefined for a zero weight vector")
    v = rotate(w, rot)
    return float(np.sum(np.abs(v)) / (np.sqrt(w.size) * norm))
