"""Soft-margin kernel SVM trained by SMO with second-order working-set selection.

Solves  min_a 1/2 a'Qa - e'a  s.t. y'a = 0, 0 <= a <= C,  Q_ij = y_i y_j K_ij,
following the LIBSVM update rules. Labels are +1/-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAU = 1e-12


@dataclass
class SMOResult:
    alpha: np.ndarray
    bias: float
    iterations: int
    gap: float


def smo(K: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-3, max_iter: int = 200_000) -> SMOResult:
    """Dual solution for a precomputed kernel matrix ``K``.

    The decision function is ``sum_i alpha_i y_i K(x_i, x) + bias``. Stops
    when the maximal KKT violation m(a) - M(a) drops below ``tol``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if K.shape != (n, n):
        raise ValueError(f"kernel is {K.shape}, expected {(n, n)}")
    if not np.all(np.abs(y) == 1):
        raise ValueError("labels must be +1/-1")
    Q = K * np.outer(y, y)
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    gap = np.inf
    while it < max_iter:
        ygrad = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            gap = 0.0
            break
        up_idx = np.flatnonzero(up)
        i = up_idx[np.argmax(ygrad[up_idx])]
        m = ygrad[i]
        low_idx = np.flatnonzero(low)
        gap = m - ygrad[low_idx].min()
        if gap < tol:
            break
        cand = low_idx[ygrad[low_idx] < m]
        b = m - ygrad[cand]
        a = QD[i] + QD[cand] - 2.0 * y[i] * y[cand] * Q[i, cand]
        a = np.where(a > 0, a, TAU)
        j = cand[np.argmin(-(b * b) / a)]
        it += 1

        ai_old, aj_old = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Q[i, j]
            delta = (-G[i] - G[j]) / max(quad, TAU)
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Q[i, j]
            delta = (G[i] - G[j]) / max(quad, TAU)
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        G += Q[:, i] * (ai - ai_old) + Q[:, j] * (aj - aj_old)
    return SMOResult(alpha, _bias(alpha, G, y, C), it, float(gap))


def _bias(alpha, G, y, C) -> float:
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yG[free].mean()
    else:
        # no free vectors: midpoint of the feasible interval for rho
        at_upper = alpha >= C
        lb_mask = ((y > 0) & at_upper) | ((y < 0) & ~at_upper)
        ub_mask = ~lb_mask
        ub = yG[ub_mask].min() if ub_mask.any() else np.inf
        lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
        if np.isfinite(ub) and np.isfinite(lb):
            rho = (ub + lb) / 2
        else:
            rho = ub if np.isfinite(ub) else lb
    return float(-rho)
