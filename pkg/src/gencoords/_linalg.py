"""Small dense linear-algebra helpers shared by the noise model and the filter."""

from __future__ import annotations

import numpy as np
import scipy.linalg

JITTER_LEVELS = tuple(10.0 ** -k for k in range(12, 5, -1))  # 1e-12 ... 1e-6


def jittered_cholesky(matrix: np.ndarray):
    """Lower Cholesky factor of ``matrix``, adding diagonal jitter if needed.

    Jitter is ``eps * trace / n`` with ``eps`` escalating through
    :data:`JITTER_LEVELS`. Returns ``(L, eps_used)`` where ``eps_used`` is 0.0
    when no jitter was needed, or ``(None, None)`` when every level failed.
    """
    a = np.asarray(matrix, dtype=float)
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    scale = np.trace(a) / n
    if not np.isfinite(scale) or scale <= 0:
        return None, None
    for eps in JITTER_LEVELS:
        try:
            return np.linalg.cholesky(a + eps * scale * np.eye(n)), eps
        except np.linalg.LinAlgError:
            continue
    return None, None


def inverse_from_cholesky(L: np.ndarray) -> np.ndarray:
    inv = scipy.linalg.cho_solve((L, True), np.eye(L.shape[0]))
    return 0.5 * (inv + inv.T)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)
