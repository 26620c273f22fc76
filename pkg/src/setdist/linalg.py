"""Dense symmetric eigendecomposition (cyclic Jacobi) and PSD square roots."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

MAX_SWEEPS = 100
OFFDIAG_RTOL = 1e-12


def as_symmetric(a, atol: float = 1e-12) -> np.ndarray:
    """Validate a square, finite, (near-)symmetric matrix and symmetrize it exactly."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > atol * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + a.T)


@nb.njit(cache=True)
def _jacobi(a, max_sweeps, rtol):
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    fro = math.sqrt(np.sum(a * a))
    target = rtol * fro
    sweeps = 0
    while sweeps < max_sweeps:
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if math.sqrt(off) <= target:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return np.diag(a).copy(), v, sweeps


def sym_eigen(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors (columns) of ``a``.

    Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
    ``1e-12 * ||a||_F`` or 100 sweeps have run.
    """
    a = as_symmetric(a)
    if a.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    w, v, _ = _jacobi(a, MAX_SWEEPS, OFFDIAG_RTOL)
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def psd_sqrt(a, clamp_tol: float | None = None) -> np.ndarray:
    """Symmetric PSD square root R with R @ R == a.

    Eigenvalues in ``[-clamp_tol, 0)`` are treated as roundoff and set to 0;
    anything more negative raises.  ``clamp_tol`` defaults to
    ``1e-10 * ||a||_F``.
    """
    a = as_symmetric(a)
    if clamp_tol is None:
        clamp_tol = 1e-10 * float(np.linalg.norm(a))
    if clamp_tol < 0:
        raise ValueError("clamp_tol must be nonnegative")
    w, v = sym_eigen(a)
    if w.size and w[0] < -clamp_tol:
        raise ValueError(f"matrix not PSD (smallest eigenvalue {w[0]:.3e})")
    root = np.sqrt(np.clip(w, 0.0, None))
    r = (v * root) @ v.T
    return 0.5 * (r + r.T)
