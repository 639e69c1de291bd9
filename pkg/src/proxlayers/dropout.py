"""Dropout viewed as a proximal map, and the adaptive-regularizer baseline.

The per-point map is

    c_x = argmin_c  sum_i p (1 - p) x_i^2 c_i^2 + lam/2 ||c - x||^2,   p = sigmoid(x^T c).

Fixing ``s = x^T c`` freezes ``p`` and leaves a separable quadratic with one
linear constraint; its solution is

    c_i = (lam + mu) x_i / (lam + alpha_s x_i^2),   alpha_s = 2 / (2 + e^s + e^-s),

with the multiplier ``mu`` set so that ``x^T c = s``.  The map is then a
one-dimensional search over ``s``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

from .errors import ConvergenceError, ShapeError

__all__ = [
    "DropoutProxConfig",
    "alpha_s",
    "compare_discriminants",
    "dropout_objective",
    "logistic_loss",
    "prox_dropout",
    "prox_dropout_batch",
    "prox_pipeline_train",
    "ridge_logistic_train",
    "rrm_dropout_train",
    "rrm_objective",
    "shape_coordinates",
    "solve_mu",
    "solve_mu_bisect",
]


@dataclass(frozen=True)
class DropoutProxConfig:
    """``lam``: proximity weight.  ``s_max``: half-width of the search
    interval, widened per point to the bound ``2 ||x||^2`` when that is
    larger.  ``grid_points``: coarse grid size.  ``s_tol``: refinement
    tolerance on ``s``.  ``mu_tol``: bisection tolerance for the multiplier."""

    lam: float = 0.5
    s_max: float = 10.0
    grid_points: int = 401
    s_tol: float = 1e-6
    mu_tol: float = 1e-10

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not self.s_max > 0:
            raise ValueError(f"s_max must be positive, got {self.s_max}")
        if self.grid_points < 3:
            raise ValueError("grid needs at least 3 points")
        if not 0 < self.s_tol <= 1e-3:
            raise ValueError(f"s_tol must lie in (0, 1e-3], got {self.s_tol}")


def _vector(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    return x


def alpha_s(s):
    """``2 / (2 + e^s + e^-s)``, i.e. ``2 p (1 - p)`` for ``p = sigmoid(s)``."""
    # sigmoid(-s) in place of 1 - sigmoid(s) avoids cancellation for large s
    return 2.0 * expit(s) * expit(-s)


def dropout_objective(c, x, lam):
    c, x = _vector(c), _vector(x)
    p = expit(x @ c)
    return float(p * (1 - p) * np.sum(x**2 * c**2) + 0.5 * lam * np.sum((c - x) ** 2))


def _weight_sum(x2, lam, a):
    # x^T c(mu) = (lam + mu) * sum_i x_i^2 / (lam + a x_i^2)
    return np.sum(x2 / (lam + np.multiply.outer(a, x2)), axis=-1)


def solve_mu(x, s, lam):
    """Multiplier with ``x^T c(mu) = s``.  ``x^T c`` is affine in ``mu`` with
    positive slope, so the root is explicit."""
    x = _vector(x)
    x2 = x**2
    return s / _weight_sum(x2, lam, alpha_s(s)) - lam


def solve_mu_bisect(x, s, lam, tol=1e-10, max_expand=200):
    """Same root by bisection on ``x^T c(mu) - s``; the bracket starts at
    ``[-lam, lam (1 + max_i alpha x_i^2) ||x||^2]`` and grows geometrically."""
    x = _vector(x)
    x2 = x**2
    a = alpha_s(s)
    w = _weight_sum(x2, lam, a)

    def resid(mu):
        return (lam + mu) * w - s

    lo, hi = -lam, lam * (1 + a * x2.max()) * x2.sum()
    width = hi - lo
    for _ in range(max_expand):
        if resid(lo) <= 0 <= resid(hi):
            break
        lo, hi = lo - width, hi + width
        width *= 2
    else:
        raise ConvergenceError(
            f"no sign change on [{lo:.3g}, {hi:.3g}]: residuals {resid(lo):.3g}, {resid(hi):.3g}",
            residual=float("nan"),
        )
    while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        if resid(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _c_of_s(x, s, lam):
    # rows of the result are c(s) for each entry of s
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    x2 = x**2
    a = alpha_s(s)
    denom = lam + np.multiply.outer(a, x2)
    mu = s / np.sum(x2 / denom, axis=-1) - lam
    return (lam + mu)[:, None] * x / denom, mu


def _objective_of_s(x, s, lam):
    c, _ = _c_of_s(x, s, lam)
    a = alpha_s(np.atleast_1d(s))
    return 0.5 * a * np.sum(x**2 * c**2, axis=1) + 0.5 * lam * np.sum((c - x) ** 2, axis=1)


def prox_dropout(x, cfg=None):
    """Return ``(c_x, s, mu)``: the proximal point, ``x^T c_x`` and the multiplier."""
    cfg = DropoutProxConfig() if cfg is None else cfg
    x = _vector(x)
    if not np.any(x):
        return np.zeros_like(x), 0.0, 0.0
    if not np.any(x**2):
        # the penalty underflows entirely; the map is the identity to working precision
        return x.copy(), float(x @ x), 0.0
    lam = cfg.lam
    # comparing with c = 0 gives ||c - x|| <= ||x||, hence |x^T c| <= 2 ||x||^2
    s_max = max(cfg.s_max, 2.0 * float(x @ x))
    grid = np.linspace(-s_max, s_max, cfg.grid_points)
    vals = _objective_of_s(x, grid, lam)
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda s: float(_objective_of_s(x, s, lam)[0]),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": cfg.s_tol},
    )
    s_best = float(res.x) if res.fun <= vals[k] else float(grid[k])
    c, mu = _c_of_s(x, s_best, lam)
    return c[0], s_best, float(mu[0])


def prox_dropout_batch(xs, cfg=None):
    """Row-wise ``prox_dropout``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2:
        raise ShapeError(f"expected a matrix of points, got shape {xs.shape}")
    return np.array([prox_dropout(row, cfg)[0] for row in xs]).reshape(xs.shape)


def shape_coordinates(beta, x, s, mu, lam):
    """``h_i = beta_i (lam + alpha_s x_i^2) / (lam + mu)``, for which
    ``h^T c_x = beta^T x``."""
    beta, x = _vector(beta), _vector(x)
    return beta * (lam + alpha_s(s) * x**2) / (lam + mu)


def _check_labels(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError(f"need an (n, d) design and n labels, got {x.shape} and {y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    return x, y


def logistic_loss(w, x, y):
    return float(np.mean(np.logaddexp(0.0, -y * (x @ w))))


def _logistic_parts(w, x, y):
    m = y * (x @ w)
    loss = float(np.mean(np.logaddexp(0.0, -m)))
    grad = -(x.T @ (y * expit(-m))) / x.shape[0]
    return loss, grad


def _descend(fun_grad, w0, tol, max_iter, memory=10, patience=50):
    """Gradient descent with Barzilai-Borwein steps and a non-monotone Armijo
    test; stops once ``||grad|| <= tol``."""
    w = w0.copy()
    f, g = fun_grad(w)
    history = [f]
    t = 1.0
    rising = 0
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return w
        f_ref = max(history[-memory:])
        a = t
        for _ in range(60):
            wn = w - a * g
            fn, gn = fun_grad(wn)
            if np.isfinite(fn) and fn <= f_ref - 1e-4 * a * gnorm**2:
                break
            a *= 0.5
        else:
            raise ConvergenceError("line search failed", residual=gnorm)
        rising = rising + 1 if fn > f else 0
        if rising >= patience:
            raise ConvergenceError(f"loss rose for {patience} consecutive steps", residual=gnorm)
        s, yv = wn - w, gn - g
        sy = float(s @ yv)
        t = float(np.clip(s @ s / sy, 1e-10, 1e10)) if sy > 0 else 1e10
        w, f, g = wn, fn, gn
        history.append(f)
    raise ConvergenceError(
        f"gradient norm {np.linalg.norm(g):.3g} above {tol:g} after {max_iter} steps",
        residual=float(np.linalg.norm(g)),
    )


def rrm_objective(beta, x, y, mu):
    """Logistic loss plus ``mu sum_j a_j beta_j^2``, where
    ``a_j = mean_i p_i (1 - p_i) x_ij^2`` and ``p_i = sigmoid(beta^T x_i)``."""
    return _rrm_parts(np.asarray(beta, dtype=np.float64), *_check_labels(x, y), mu)[0]


def _rrm_parts(beta, x, y, mu):
    loss, grad = _logistic_parts(beta, x, y)
    p = expit(x @ beta)
    v = p * (1 - p)
    x2 = x**2
    q = x2 @ beta**2  # sum_j x_ij^2 beta_j^2
    n = x.shape[0]
    pen = mu * float(v @ q) / n
    # d/dbeta of v_i q_i: v_i (1 - 2 p_i) q_i x_i + 2 v_i x_i^2 * beta
    gpen = mu * (x.T @ (v * (1 - 2 * p) * q) + 2 * beta * (x2.T @ v)) / n
    return loss + pen, grad + gpen


def rrm_dropout_train(x, y, mu, tol=1e-6, max_iter=100_000):
    """Minimize the logistic loss with the dropout-induced adaptive ridge.
    The weights ``a_j`` move with ``beta``, and the gradient includes their
    dependence on it."""
    x, y = _check_labels(x, y)
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    return _descend(lambda b: _rrm_parts(b, x, y, mu), np.zeros(x.shape[1]), tol, max_iter)


def ridge_logistic_train(z, y, c_reg, tol=1e-6, max_iter=100_000):
    """Minimize ``mean log(1 + exp(-y alpha^T z)) + c ||alpha||^2``."""
    z, y = _check_labels(z, y)
    if c_reg < 0:
        raise ValueError(f"c_reg must be non-negative, got {c_reg}")

    def parts(a):
        loss, grad = _logistic_parts(a, z, y)
        return loss + c_reg * float(a @ a), grad + 2 * c_reg * a

    return _descend(parts, np.zeros(z.shape[1]), tol, max_iter)


def prox_pipeline_train(x, y, cfg, c_reg, tol=1e-6, max_iter=100_000):
    """Ridge logistic regression on the proximal outputs ``P_R(x_i)``.
    Returns ``(alpha, outputs)``."""
    x, y = _check_labels(x, y)
    outputs = prox_dropout_batch(x, cfg)
    return ridge_logistic_train(outputs, y, c_reg, tol, max_iter), outputs


def compare_discriminants(x, beta, alpha, cfg=None, outputs=None):
    """Pairs ``(beta^T x_i, alpha^T P_R(x_i))`` and their Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    if outputs is None:
        outputs = prox_dropout_batch(x, cfg)
    pairs = np.column_stack([x @ beta, outputs @ alpha])
    if np.any(np.std(pairs, axis=0) == 0):
        raise ValueError("a discriminant has zero variance; correlation undefined")
    return pairs, float(np.corrcoef(pairs.T)[0, 1])
