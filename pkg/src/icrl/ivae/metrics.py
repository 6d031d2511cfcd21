from __future__ import annotations

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment


def spearman_matrix(A, B) -> np.ndarray:
    """Absolute Spearman correlations between columns of ``A`` (rows) and ``B`` (columns).

    A constant column correlates 0 with everything.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"need two 2-D arrays with equal rows, got {A.shape} and {B.shape}")
    RA = stats.rankdata(A, axis=0)
    RB = stats.rankdata(B, axis=0)
    RA -= RA.mean(axis=0)
    RB -= RB.mean(axis=0)
    na = np.linalg.norm(RA, axis=0)
    nb = np.linalg.norm(RB, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        C = (RA.T @ RB) / np.outer(na, nb)
    C[~np.isfinite(C)] = 0.0
    return np.clip(np.abs(C), 0.0, 1.0)


def mcc_score(X_true, X_hat) -> tuple[float, np.ndarray]:
    """Mean matched absolute rank correlation and the matching.

    ``perm[i]`` is the column of ``X_hat`` assigned to true column ``i``.
    """
    X_true = np.asarray(X_true, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X_true.ndim != 2 or X_true.shape != X_hat.shape:
        raise ValueError(f"shapes must match, got {X_true.shape} and {X_hat.shape}")
    C = spearman_matrix(X_true, X_hat)
    rows, cols = linear_sum_assignment(-C)
    return float(C[rows, cols].mean()), cols
