"""Dense double-precision linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  The
decompositions come in two flavours: a LAPACK-backed path (default, fast,
used in inner loops) and a self-contained Jacobi path (one-sided Jacobi for
the SVD, cyclic Jacobi for symmetric eigenproblems) that needs nothing but
elementwise numpy.  Both return results in the same conventions: singular
values and eigenvalues sorted in descending order with ties kept in their
original (stable) order.
"""

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import (
    ConvergenceError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    ShapeError,
)

SYMMETRY_TOL = 1e-10
NEGATIVE_EIG_TOL = 1e-8
MIN_EPS = 1e-12

__all__ = [
    "SvdResult",
    "as_matrix",
    "center_columns",
    "inv_sqrt_psd",
    "solve_spd",
    "svd",
    "sym_eig",
]


class SvdResult(NamedTuple):
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with ``r = min(m, n)``."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


def as_matrix(a, name="a", finite=True):
    """Coerce ``a`` to a 2-D float64 array, optionally rejecting NaN/Inf."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_symmetric(a, name="a"):
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise NotSymmetricError(
            f"{name} is not symmetric: max |a - a^T| = {asym:.3e}"
        )


def _descending(values):
    return np.argsort(-values, kind="stable")


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------


def _complete_orthonormal(u, keep):
    """Replace the columns of ``u`` not flagged in ``keep`` by an orthonormal
    completion of the kept columns."""
    m, r = u.shape
    if keep.all():
        return u
    good = u[:, keep]
    q, _ = np.linalg.qr(np.hstack([good, np.eye(m)]))
    g = good.shape[1]
    # qr may flip signs of the kept block; restore them
    signs = np.sign(np.sum(q[:, :g] * good, axis=0))
    signs[signs == 0] = 1.0
    out = u.copy()
    out[:, keep] = q[:, :g] * signs
    out[:, ~keep] = q[:, g : g + int((~keep).sum())]
    return out


def _jacobi_svd_tall(a, max_sweeps, tol):
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    # columns below this squared norm are numerically zero; rotating them
    # only shuffles rounding noise
    floor = (np.finfo(float).eps * max(m, n) * np.linalg.norm(a)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp = w[:, p]
                wq = w[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if alpha <= floor or beta <= floor:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                w[:, [p, q]] = np.column_stack([c * wp - s * wq, s * wp + c * wq])
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, [p, q]] = np.column_stack([c * vp - s * vq, s * vp + c * vq])
        if not rotated:
            break
    else:
        cond = np.linalg.cond(a) if a.size else np.nan
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge in {max_sweeps} sweeps "
            f"(shape {a.shape}, condition number {cond:.3e})"
        )
    sigma = np.linalg.norm(w, axis=0)
    order = _descending(sigma)
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    cutoff = np.finfo(float).eps * max(m, n) * (sigma[0] if n else 0.0)
    keep = sigma > cutoff
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / sigma[keep]
    u = _complete_orthonormal(u, keep)
    return SvdResult(u, sigma, v.T)


def svd(a, method="lapack", max_sweeps=60, tol=1e-15):
    """Thin singular value decomposition.

    Parameters
    ----------
    a : array_like, shape (m, n)
    method : {"lapack", "jacobi"}
        ``"jacobi"`` runs one-sided (Hestenes) Jacobi rotations until a full
        sweep makes no rotation or ``max_sweeps`` is exhausted.

    Returns
    -------
    SvdResult
        ``u`` is m x r, ``sigma`` has length r (descending), ``vt`` is r x n.
    """
    a = as_matrix(a)
    m, n = a.shape
    if method == "jacobi":
        if m >= n:
            return _jacobi_svd_tall(a, max_sweeps, tol)
        res = _jacobi_svd_tall(a.T, max_sweeps, tol)
        return SvdResult(res.vt.T, res.sigma, res.u.T)
    if method != "lapack":
        raise ValueError(f"unknown svd method {method!r}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(
            f"LAPACK SVD did not converge (shape {a.shape}, "
            f"max |a| = {np.max(np.abs(a)):.3e})"
        ) from exc
    order = _descending(s)
    return SvdResult(u[:, order], s[order], vt[order])


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition
# ---------------------------------------------------------------------------


def _jacobi_eig(a, max_sweeps, tol):
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    eps = np.finfo(float).eps
    scale = max(np.linalg.norm(a), np.finfo(float).tiny) if n else 1.0
    stop = max(tol, n * eps) * scale
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= stop:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= eps * scale * 1e-2:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(
            f"cyclic Jacobi eigensolver did not converge in {max_sweeps} sweeps"
        )
    return np.diag(a).copy(), v


def sym_eig(a, method="lapack", max_sweeps=100, tol=1e-15):
    """Eigen-decomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues descending and
    eigenvectors as columns.  Asymmetric input raises ``NotSymmetricError``.
    """
    a = as_matrix(a)
    _check_symmetric(a)
    if method == "jacobi":
        w, v = _jacobi_eig(a, max_sweeps, tol)
    elif method == "lapack":
        try:
            w, v = np.linalg.eigh(a)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("LAPACK eigh did not converge") from exc
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    order = _descending(w)
    return w[order], v[:, order]


def inv_sqrt_psd(a, eps):
    """``(a + eps*I)^(-1/2)`` for a symmetric positive semi-definite ``a``.

    Eigenvalues in ``[-1e-8, 0)`` are clamped to zero before ``eps`` is
    added; anything more negative is rejected.  ``eps == 0`` is promoted to
    ``MIN_EPS``.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    eps = max(float(eps), MIN_EPS)
    w, v = sym_eig(a)
    if w.size and w[-1] < -NEGATIVE_EIG_TOL:
        raise NotPositiveDefiniteError(
            f"matrix has eigenvalue {w[-1]:.3e} below -{NEGATIVE_EIG_TOL:g}"
        )
    w = np.maximum(w, 0.0) + eps
    b = (v / np.sqrt(w)) @ v.T
    return 0.5 * (b + b.T)


def center_columns(a):
    """Multiply by the centering matrix ``I - 11^T/n`` on the right: every row
    of the result sums to zero."""
    a = as_matrix(a)
    if a.shape[1] < 1:
        raise ShapeError("need at least one column")
    return a - a.mean(axis=1, keepdims=True)


def solve_spd(a, b):
    """Solve ``a x = b`` for symmetric positive definite ``a`` via Cholesky."""
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    _check_symmetric(a)
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"cannot solve {a.shape} system with rhs {b.shape}")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"Cholesky factorization failed: {exc}"
        ) from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)
