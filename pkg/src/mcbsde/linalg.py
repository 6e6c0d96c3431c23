"""Small dense linear algebra: matrix exponential and Moore-Penrose pseudoinverse.

The matrices here are desk scale (N of a few up to a few dozen), so a plain
scaling-and-squaring exponential with a fixed-order Taylor kernel is accurate
to ~1e-12 relative error for ||A * dt|| up to ~10, which covers any sane
generator cell. The pseudoinverse delegates to SVD with a hard relative
threshold because the chain's Psi matrices are always rank deficient.
"""

from __future__ import annotations

import numpy as np

__all__ = ["expm", "pseudoinverse", "PINV_RTOL"]

# Singular values below PINV_RTOL * sigma_max are treated as exact zeros.
PINV_RTOL = 1e-12

_TAYLOR_ORDER = 20
_SCALE_TARGET = 0.25


def expm(a: np.ndarray) -> np.ndarray:
    """exp(a) by scaling and squaring with an order-20 Taylor kernel.

    The matrix is scaled by 2**-s until its 1-norm is at most 0.25; the
    order-20 Taylor remainder at that radius is ~1e-33, far below the
    round-off floor, so squaring error dominates and stays near 1e-14
    for the norms used here.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expm expects a square matrix, got shape {a.shape}")
    n = a.shape[0]
    norm = np.linalg.norm(a, 1)
    if norm == 0.0:
        return np.eye(n)
    s = max(0, int(np.ceil(np.log2(norm / _SCALE_TARGET))))
    b = a / (2.0**s)
    acc = np.eye(n)
    term = np.eye(n)
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ b / k
        acc = acc + term
    for _ in range(s):
        acc = acc @ acc
    return acc


def pseudoinverse(m: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with a hard rank cutoff.

    Singular values below 1e-12 times the largest are zeroed rather than
    inverted; without the cutoff the null direction of a Psi matrix would
    blow up into noise of order 1e+12.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"pseudoinverse expects a square matrix, got shape {m.shape}")
    return np.linalg.pinv(m, rcond=PINV_RTOL)
