"""Differentiable and hard permutation machinery.

SoftSort relaxes argsort into a row-stochastic matrix; the row/column entropy
penalty drives that matrix toward a hard permutation (it is zero exactly on
permutation matrices, given double stochasticity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SoftPermutation:
    """Row-stochastic relaxation of a permutation matrix."""

    matrix: np.ndarray
    tau: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("SoftPermutation must be square")
        if np.any(m < -1e-9) or np.any(m > 1 + 1e-9):
            raise ValueError("SoftPermutation entries must lie in [0, 1]")
        if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("SoftPermutation rows must sum to 1")


@dataclass
class PermutationMatrix:
    """A hard 0/1 permutation matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        m = self.matrix
        ok = (
            m.ndim == 2
            and m.shape[0] == m.shape[1]
            and np.all((m == 0) | (m == 1))
            and np.all(m.sum(axis=0) == 1)
            and np.all(m.sum(axis=1) == 1)
        )
        if not ok:
            raise ValueError("not a permutation matrix")


def softsort_matrix(scores: Tensor, tau: float, additive_mask: np.ndarray | None = None) -> Tensor:
    """SoftSort on the tape: rowwise softmax of -|sort_desc(s) 1^T - 1 s^T| / tau.

    ``scores`` is (..., n); the result is (..., n, n) with rows summing to 1.
    Row i concentrates on the index of the i-th largest score as tau -> 0.
    ``additive_mask`` is added to the pre-softmax logits (used to pin padded
    slots to the identity in batched inputs).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite(scores.data)):
        raise ValueError("softsort scores must be finite")
    srt = ad.sort_descending(scores, axis=-1)
    left = ad.reshape(srt, srt.shape + (1,))
    right = ad.reshape(scores, scores.shape[:-1] + (1, scores.shape[-1]))
    dist = ad.abs_(ad.sub(left, right))
    return ad.softmax(ad.mul(dist, -1.0 / tau), axis=-1, additive_mask=additive_mask)


def softsort(scores, tau: float) -> SoftPermutation:
    """SoftSort of a 1-D score vector; non-differentiable convenience wrapper."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("softsort expects a non-empty 1-D score vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("softsort scores must be finite")
    mat = softsort_matrix(Tensor(s), tau).data
    return SoftPermutation(mat, tau)


def hard_perm_from_scores(scores) -> PermutationMatrix:
    """Hard argsort permutation: row i selects the i-th largest score.

    Ties break toward the smaller original index (stable).
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    order = np.argsort(-s, kind="stable")
    mat = np.zeros((s.size, s.size))
    mat[np.arange(s.size), order] = 1.0
    return PermutationMatrix(mat)


def _normalized_entropy(p: np.ndarray, axis: int) -> float:
    sums = p.sum(axis=axis, keepdims=True)
    if np.any(sums == 0):
        raise ValueError("entropy_penalty: all-zero row or column")
    q = p / sums
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(q), 0.0)
    return float(-terms.sum())


def entropy_penalty(p) -> float:
    """Row- plus column-wise Shannon entropy of a nonnegative matrix, in nats.

    Rows and columns are normalized to probability vectors first; 0 log 0 = 0.
    Zero exactly on permutation matrices.
    """
    if isinstance(p, (SoftPermutation, PermutationMatrix)):
        p = p.matrix
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("entropy_penalty expects a matrix")
    if np.any(p < 0):
        raise ValueError("entropy_penalty expects nonnegative entries")
    return _normalized_entropy(p, axis=1) + _normalized_entropy(p, axis=0)


def entropy_penalty_batched(p: Tensor, eps: float = 1e-12) -> Tensor:
    """Differentiable row+column entropy of a (B, N, N) nonnegative Tensor -> (B,).

    Uses p log(p + eps), which agrees with 0 log 0 := 0 at machine precision.
    """
    row_sum = ad.sum_(p, axis=-1, keepdims=True)
    col_sum = ad.sum_(p, axis=-2, keepdims=True)
    rows = ad.div(p, row_sum)
    cols = ad.div(p, col_sum)
    h_rows = ad.mul(ad.sum_(ad.mul(rows, ad.log(ad.add(rows, eps))), axis=(-2, -1)), -1.0)
    h_cols = ad.mul(ad.sum_(ad.mul(cols, ad.log(ad.add(cols, eps))), axis=(-2, -1)), -1.0)
    return ad.add(h_rows, h_cols)


def is_permutation(p, tol: float = 1e-6) -> bool:
    """True iff ``p`` is doubly stochastic within ``tol`` and has C(p) < tol."""
    if isinstance(p, (SoftPermutation, PermutationMatrix)):
        p = p.matrix
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("is_permutation expects a square matrix")
    if np.any(p < -tol):
        return False
    if np.max(np.abs(p.sum(axis=0) - 1.0)) > tol:
        return False
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > tol:
        return False
    return entropy_penalty(np.clip(p, 0.0, None)) < tol


def apply_soft_perm(p, rows):
    """Reorder row vectors by a (soft) permutation: P @ rows."""
    if isinstance(p, (SoftPermutation, PermutationMatrix)):
        p = p.matrix
    if isinstance(p, Tensor) or isinstance(rows, Tensor):
        p_t = p if isinstance(p, Tensor) else Tensor(p)
        rows_t = rows if isinstance(rows, Tensor) else Tensor(rows)
        return ad.matmul(p_t, rows_t)
    p = np.asarray(p)
    rows = np.asarray(rows)
    if p.shape[-1] != rows.shape[0]:
        raise ValueError(f"size mismatch: {p.shape} @ {rows.shape}")
    return p @ rows


def sinkhorn_normalize(m, iters: int = 200) -> np.ndarray:
    """Alternate row/column normalization of a positive matrix (test utility).

    Converges to a doubly stochastic matrix; generic random inputs land in the
    interior of the Birkhoff polytope, i.e. not at a permutation.
    """
    m = np.asarray(m, dtype=np.float64).copy()
    if np.any(m <= 0):
        raise ValueError("sinkhorn_normalize needs strictly positive entries")
    for _ in range(iters):
        m /= m.sum(axis=1, keepdims=True)
        m /= m.sum(axis=0, keepdims=True)
    return m
