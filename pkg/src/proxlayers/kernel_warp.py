"""Quadratic-regularizer proximal maps in a Gaussian RKHS, via Nystrom.

Functions in the RKHS are represented by finite coordinates
``f~ = K_W^{-1/2} f_W`` where ``f_W`` are the values of ``f`` on ``p``
landmarks.  A quadratic penalty ``1/2 sum_i <z_i, f>^2`` becomes
``1/2 ||Z~^T v||^2`` in these coordinates, so the proximal map of the
representer ``k(x, .)`` is the linear solve

    argmin_v 1/2 ||Z~^T v||^2 + lam/2 ||v - phi~(x)||^2
        = (I + Z~ Z~^T / lam)^{-1} phi~(x).

Two families of representers ``z_i`` are provided: partial derivatives of
the kernel at anchor points (penalizing ``sum_i ||grad f(x_i)||^2``) and
edge differences ``sqrt(w_ij) (k(x_i, .) - k(x_j, .))`` (a graph Laplacian).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import linalg
from .errors import ShapeError

NYSTROM_JITTER = 1e-8

__all__ = [
    "NystromMap",
    "gaussian_kernel",
    "gradient_representers",
    "kpca_top2",
    "laplacian_penalty",
    "laplacian_representers",
    "median_bandwidth",
    "nystrom_embed",
    "warp_prox",
    "warp_prox_sqrt",
    "warped_distance",
]


def _points(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a point or a stack of points, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def gaussian_kernel(a, b, gamma):
    """``exp(-gamma ||a_i - b_j||^2)`` for all row pairs."""
    return np.exp(-gamma * cdist(_points(a, "a"), _points(b, "b"), "sqeuclidean"))


def median_bandwidth(x):
    """``1 / median`` of the squared distances over distinct pairs of rows."""
    x = _points(x)
    if x.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    med = float(np.median(pdist(x, "sqeuclidean")))
    if med <= 0:
        raise ValueError("median pairwise distance is zero")
    return 1.0 / med


@dataclass(frozen=True)
class NystromMap:
    """Landmarks ``W`` (p x d), bandwidth ``gamma`` and ``(K_W + jitter I)^{-1/2}``."""

    landmarks: np.ndarray
    gamma: float
    k_w_inv_sqrt: np.ndarray

    @classmethod
    def fit(cls, landmarks, gamma, jitter=NYSTROM_JITTER):
        w = _points(landmarks, "landmarks")
        if not gamma > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {gamma}")
        k_w = gaussian_kernel(w, w, gamma)
        return cls(w, float(gamma), linalg.inv_sqrt_psd(k_w, jitter))

    @classmethod
    def from_data(cls, x, n_landmarks, rng, gamma=None):
        """Landmarks sampled without replacement from the rows of ``x``;
        ``gamma`` defaults to the median heuristic on ``x``."""
        x = _points(x)
        if not 1 <= n_landmarks <= x.shape[0]:
            raise ValueError(f"cannot draw {n_landmarks} landmarks from {x.shape[0]} points")
        idx = np.sort(rng.choice(x.shape[0], size=n_landmarks, replace=False))
        return cls.fit(x[idx], median_bandwidth(x) if gamma is None else gamma)

    @property
    def p(self):
        return self.landmarks.shape[0]


def nystrom_embed(nmap, x):
    """Rows ``phi~(x_i) = K_W^{-1/2} k_W(x_i)``; a single point gives a vector."""
    single = np.ndim(x) == 1
    k = gaussian_kernel(x, nmap.landmarks, nmap.gamma)
    out = k @ nmap.k_w_inv_sqrt
    return out[0] if single else out


def gradient_representers(nmap, anchors):
    """Columns ``K_W^{-1/2} (d k(x_i, w) / d x_ij)_w`` for every anchor ``i`` and
    coordinate ``j``, ordered anchor-major (column ``i * d + j``).

    For the Gaussian kernel ``d k(x, w) / dx = -2 gamma (x - w) k(x, w)``.
    """
    a = _points(anchors, "anchors")
    if a.shape[0] == 0:
        raise ValueError("need at least one anchor")
    w = nmap.landmarks
    k = gaussian_kernel(a, w, nmap.gamma)  # (n, p)
    diff = a[:, None, :] - w[None, :, :]  # (n, p, d)
    deriv = -2.0 * nmap.gamma * diff * k[:, :, None]
    # (p, n*d): column i*d + j holds the landmark vector for anchor i, coord j
    cols = deriv.transpose(1, 0, 2).reshape(w.shape[0], -1)
    return nmap.k_w_inv_sqrt @ cols


def laplacian_representers(nmap, edges, points):
    """Columns ``sqrt(w_ij) (phi~(x_i) - phi~(x_j))`` for edges ``(i, j, w_ij)``."""
    pts = _points(points, "points")
    edges = list(edges)
    if not edges:
        return np.zeros((nmap.p, 0))
    ii = np.array([e[0] for e in edges], dtype=np.int64)
    jj = np.array([e[1] for e in edges], dtype=np.int64)
    ww = np.array([e[2] for e in edges], dtype=np.float64)
    if np.any(ww < 0):
        raise ValueError("edge weights must be non-negative")
    phi = nystrom_embed(nmap, pts)
    return (np.sqrt(ww)[:, None] * (phi[ii] - phi[jj])).T


def laplacian_penalty(values, edges):
    """``sum_ij w_ij (f(x_i) - f(x_j))^2`` from function values at the nodes."""
    values = np.asarray(values, dtype=np.float64)
    return float(sum(w * (values[i] - values[j]) ** 2 for i, j, w in edges))


def _check_shapes(z, phi):
    z = np.asarray(z, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"representers must be a p x m matrix, got {z.shape}")
    if phi.shape[-1] != z.shape[0]:
        raise ShapeError(f"embedding length {phi.shape[-1]} does not match p={z.shape[0]}")
    return z, phi


def warp_prox(z, phi, lam=1.0, method="auto"):
    """``(I + Z Z^T / lam)^{-1} phi`` for a vector or for each row of ``phi``.

    ``method="direct"`` factors the p x p matrix; ``"woodbury"`` uses
    ``I - Z (lam I + Z^T Z)^{-1} Z^T`` with an m x m solve; ``"auto"`` picks
    whichever system is smaller.
    """
    z, phi = _check_shapes(z, phi)
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    p, m = z.shape
    if method == "auto":
        method = "woodbury" if m < p else "direct"
    rhs = phi.T if phi.ndim == 2 else phi
    if method == "direct":
        out = linalg.solve_spd(np.eye(p) + (z @ z.T) / lam, rhs)
    elif method == "woodbury":
        inner = lam * np.eye(m) + z.T @ z
        out = rhs - z @ linalg.solve_spd(inner, z.T @ rhs)
    else:
        raise ValueError(f"unknown method {method!r}")
    return out.T if phi.ndim == 2 else out


def warp_prox_sqrt(z, phi, lam=1.0):
    """``(I + Z Z^T / lam)^{-1/2} phi``, the kernel-warping embedding."""
    z, phi = _check_shapes(z, phi)
    mu, v = linalg.sym_eig(z @ z.T / lam)
    scale = 1.0 / np.sqrt(1.0 + np.maximum(mu, 0.0))
    op = (v * scale) @ v.T
    return phi @ op  # op is symmetric, so this covers vectors and row stacks


def warped_distance(a_out, b_out):
    return float(np.linalg.norm(np.asarray(a_out) - np.asarray(b_out)))


def kpca_top2(outputs):
    """Scores of the rows of ``outputs`` on their top two principal directions.

    The columns of the result have non-increasing norms.  Outputs with
    fewer than two columns, or whose second singular value is exactly zero,
    are rejected; numerically collinear data passes with a near-zero second
    column.
    """
    x = linalg.as_matrix(outputs, "outputs")
    if x.shape[0] < 3:
        raise ValueError(f"need at least 3 points, got {x.shape[0]}")
    xc = x - x.mean(axis=0)
    res = linalg.svd(xc)
    if res.sigma.size < 2 or res.sigma[1] == 0.0:
        raise ValueError("outputs have rank below 2")
    return res.u[:, :2] * res.sigma[:2]
