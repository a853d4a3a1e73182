"""Projections onto the probability simplex and its capped variant.

The reduced weight vector of an m-state mixture lives in the capped
simplex {v >= 0, sum(v) <= 1}; the full weight vector lives on the unit
simplex itself.
"""

from __future__ import annotations

import numpy as np


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto {x >= 0, sum(x) = total}.

    Sort-based O(m log m) algorithm: find the largest rho such that
    u_rho - (cumsum(u)_rho - total) / rho > 0 for the descending sort u,
    then shift and clip.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("cannot project an empty vector onto the simplex")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    # the first sorted entry satisfies the condition identically
    # (u1 - (u1 - total) = total > 0); enforce it against cancellation
    # when entries dwarf the total
    cond[0] = True
    rho = np.nonzero(cond)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_capped_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto {x >= 0, sum(x) <= 1}.

    Clipping at zero is the solution whenever the clipped point already
    satisfies the sum constraint; otherwise the sum constraint is active
    and the projection coincides with the unit-simplex projection.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    clipped = np.maximum(v, 0.0)
    if clipped.sum() <= 1.0:
        return clipped
    return project_simplex(v)


def in_capped_simplex(v: np.ndarray, tol: float = 0.0) -> bool:
    """Membership test for {x >= 0, sum(x) <= 1}, slack ``tol`` on both sides."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return True
    return bool(v.min() >= -tol and v.sum() <= 1.0 + tol)
