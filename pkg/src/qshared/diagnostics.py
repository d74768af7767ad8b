"""Hat-matrix diagnostics for the stacked design.

The Q-shared iteration maps ``Y*`` through the projector ``H = Z (Z'Z)^{-1} Z'``.
If ``H`` expands in the infinity norm (max absolute row sum above one), the
iteration is not guaranteed to converge.  A norm above one does not mean
the fit will diverge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ExpansionReport",
    "hat_matrix",
    "inf_operator_norm",
    "projector_row_sums",
    "nonexpansion_check",
]

RANK_TOL = 1e-10
MATERIALIZE_LIMIT = 5000


@dataclass(frozen=True)
class ExpansionReport:
    inf_op_norm: float
    is_nonexpansion: bool
    worst_row: int
    rank: int

    @property
    def message(self) -> str:
        if self.is_nonexpansion:
            return "hat matrix is an infinity-norm non-expansion"
        return "hat matrix expands in the infinity norm: convergence not guaranteed"

    def as_dict(self) -> dict:
        return {
            "inf_op_norm": self.inf_op_norm,
            "is_nonexpansion": self.is_nonexpansion,
            "worst_row": self.worst_row,
            "rank": self.rank,
            "message": self.message,
        }


def _orthonormal_basis(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] == 0 or Z.shape[1] == 0:
        raise ValueError("design must be a non-empty matrix")
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * s[0])) if s[0] > 0 else 0
    if rank < Z.shape[1]:
        raise np.linalg.LinAlgError(f"singular design: rank {rank} < {Z.shape[1]} columns")
    return U


def hat_matrix(Z: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the column space of a full-rank ``Z``."""
    U = _orthonormal_basis(Z)
    return U @ U.T


def inf_operator_norm(H: np.ndarray) -> float:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {H.shape}")
    return float(np.abs(H).sum(axis=1).max())


def projector_row_sums(U: np.ndarray, block: int = 1024) -> np.ndarray:
    """Absolute row sums of ``U U'`` computed a block of rows at a time."""
    n = U.shape[0]
    out = np.empty(n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        out[start:stop] = np.abs(U[start:stop] @ U.T).sum(axis=1)
    return out


def nonexpansion_check(Z: np.ndarray, materialize_limit: int = MATERIALIZE_LIMIT) -> ExpansionReport:
    U = _orthonormal_basis(Z)
    if U.shape[0] <= materialize_limit:
        sums = np.abs(U @ U.T).sum(axis=1)
    else:
        sums = projector_row_sums(U)
    worst = int(np.argmax(sums))
    norm = float(sums[worst])
    return ExpansionReport(norm, norm <= 1.0, worst, U.shape[1])
