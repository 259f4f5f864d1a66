"""Gaussian designs and the projection / solve kernels used by clients and oracles.

Designs are ``p x n`` with samples in columns.  Gram systems are solved through
a Cholesky factorization; no explicit inverse is formed.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import RankDeficient

COND_LIMIT = 1e12


def sample_design(p: int, n: int, seed) -> np.ndarray:
    """``p x n`` matrix of i.i.d. N(0, 1) entries; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((p, n))


def _gram_factor(G: np.ndarray):
    w = np.linalg.eigvalsh(G)
    if w[0] <= 0 or w[-1] / w[0] > COND_LIMIT:
        raise RankDeficient(f"Gram matrix condition number exceeds {COND_LIMIT:g}")
    return cho_factor(G, lower=True, check_finite=False)


def orthogonal_projector_apply(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Project ``v`` onto the column span of ``X`` (``X (X^T X)^{-1} X^T v``)."""
    c = _gram_factor(X.T @ X)
    return X @ cho_solve(c, X.T @ v, check_finite=False)


def least_squares_solve(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimizer of ``||y - X^T w||^2`` for a tall-sample design (n > p)."""
    c = _gram_factor(X @ X.T)
    return cho_solve(c, X @ y, check_finite=False)


def min_norm_update(X: np.ndarray, y: np.ndarray, w_prev: np.ndarray, method: str = "cholesky") -> np.ndarray:
    """Closest point to ``w_prev`` on the affine set ``{w : X^T w = y}``.

    ``method="qr"`` takes the orthogonal-decomposition route instead of the
    normal equations; both give the same point.
    """
    r = y - X.T @ w_prev
    if method == "cholesky":
        c = _gram_factor(X.T @ X)
        return w_prev + X @ cho_solve(c, r, check_finite=False)
    if method == "qr":
        Q, R = np.linalg.qr(X, mode="reduced")
        d = np.abs(np.diag(R))
        if d.min() == 0 or (d.max() / d.min()) ** 2 > COND_LIMIT:
            raise RankDeficient(f"Gram matrix condition number exceeds {COND_LIMIT:g}")
        return w_prev + Q @ solve_triangular(R, r, trans="T", check_finite=False)
    raise ValueError(f"unknown method {method!r}")
