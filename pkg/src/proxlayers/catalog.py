"""Common activations written as proximal maps, and a generic numeric prox.

A proximal map here is

    P(x) = argmin_{z in C}  R(z) + (lam / 2) * ||z - x||^2

for a regularizer ``R`` and a feasible set ``C``.  With the right choice of
``R`` and ``C`` the map reproduces familiar layers:

=============  ==========================================  ======================
activation     R(z)                                        C
=============  ==========================================  ======================
sigmoid        sum_i  int_{1/2}^{z_i} logit(t) dt - z_i^2/2  (0, 1)^n
softmax        sum_i  z_i log z_i - z_i^2 / 2              probability simplex
ReLU           0                                           [0, inf)^n
hard tanh      0                                           [-1, 1]^n
batch norm     0                                           {||z|| = sqrt(n), mean 0}
=============  ==========================================  ======================

The closed forms are cheap; :func:`prox_numeric` solves the same problems by
projected gradient descent and serves as the independent check.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.special import expit, logit, softmax as _softmax

from .errors import ConvergenceError, ShapeError

# open-interval guard for regularizers with log singularities at 0 and 1
DOMAIN_LO = 1e-12
DOMAIN_HI = 1.0 - 1e-12

__all__ = [
    "Box",
    "ProxOperator",
    "Simplex",
    "SphereHyperplane",
    "Unconstrained",
    "batchnorm_as_prox",
    "batchnorm_operator",
    "hardtanh_as_prox",
    "hardtanh_operator",
    "project_simplex",
    "prox_numeric",
    "prox_residual",
    "relu_as_prox",
    "relu_operator",
    "sigmoid_as_prox",
    "sigmoid_operator",
    "sigmoid_regularizer",
    "softmax_as_prox",
    "softmax_operator",
]


def _as_vector(x, name="x"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


# ---------------------------------------------------------------------------
# Feasible sets
# ---------------------------------------------------------------------------


class Unconstrained:
    convex = True

    def project(self, v):
        return v

    def contains(self, z, tol=1e-8):
        return bool(np.all(np.isfinite(z)))

    def __repr__(self):
        return "Unconstrained()"


class Box:
    """Coordinatewise interval ``[lo, hi]``; either end may be infinite."""

    convex = True

    def __init__(self, lo=-np.inf, hi=np.inf):
        if not lo < hi:
            raise ValueError(f"empty box [{lo}, {hi}]")
        self.lo = float(lo)
        self.hi = float(hi)

    def project(self, v):
        return np.clip(v, self.lo, self.hi)

    def contains(self, z, tol=1e-8):
        return bool(np.all(z >= self.lo - tol) and np.all(z <= self.hi + tol))

    def __repr__(self):
        return f"Box({self.lo:g}, {self.hi:g})"


def project_simplex(v, floor=0.0):
    """Euclidean projection onto ``{z : sum(z) = 1, z >= floor}`` by the
    sort-and-threshold rule."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    mass = 1.0 - n * floor
    if mass <= 0:
        raise ValueError(f"floor {floor} leaves no mass for dimension {n}")
    w = v - floor
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - mass
    idx = np.arange(1, n + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(w - tau, 0.0) + floor


class Simplex:
    """Probability simplex, optionally with every coordinate bounded below by
    ``floor`` (used to keep ``z log z`` away from zero)."""

    convex = True

    def __init__(self, floor=0.0):
        self.floor = float(floor)

    def project(self, v):
        return project_simplex(v, self.floor)

    def contains(self, z, tol=1e-8):
        return bool(abs(z.sum() - 1.0) <= tol and np.all(z >= self.floor - tol))

    def __repr__(self):
        return f"Simplex(floor={self.floor:g})"


class SphereHyperplane:
    """``{z : mean(z) = 0, ||z|| = sqrt(n)}``.  Not convex; the projection
    centers then rescales, and is undefined for constant vectors."""

    convex = False

    def project(self, v):
        c = v - v.mean()
        norm = np.linalg.norm(c)
        if norm <= 1e-12 * max(1.0, np.abs(v).max()):
            raise ValueError(
                "projection onto the centered sphere is not unique for a "
                "constant vector (zero variance)"
            )
        return c * (np.sqrt(v.size) / norm)

    def contains(self, z, tol=1e-8):
        return bool(
            abs(z.mean()) <= tol and abs(np.linalg.norm(z) - np.sqrt(z.size)) <= tol
        )

    def __repr__(self):
        return "SphereHyperplane()"


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProxOperator:
    """A regularizer/feasible-set pair with weight ``lam``.

    ``regularizer`` returns ``R(z)`` and ``gradient`` returns ``R'(z)``;
    both must accept any point of ``feasible``.
    """

    regularizer: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    feasible: object
    lam: float = 1.0
    closed_form: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "prox"
    regularizer_convex: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")

    @property
    def convex(self):
        return self.regularizer_convex and self.feasible.convex

    def objective(self, z, x):
        z = _as_vector(z, "z")
        x = _as_vector(x)
        return float(self.regularizer(z)) + 0.5 * self.lam * float(np.sum((z - x) ** 2))

    def __call__(self, x):
        x = _as_vector(x)
        if self.closed_form is not None:
            return self.closed_form(x)
        return prox_numeric(self, x)


def prox_residual(op, z, x):
    """Unit-step projected-gradient residual ``||z - P_C(z - grad)||_inf``;
    zero exactly at first-order stationary points."""
    g = op.gradient(z) + op.lam * (z - x)
    return float(np.max(np.abs(z - op.feasible.project(z - g))))


def prox_numeric(op, x, z0=None, max_iter=10_000, tol=1e-10, memory=10):
    """Solve the prox problem by spectral projected gradient.

    Each iteration moves along ``d = P_C(z - t g) - z`` with a
    Barzilai-Borwein trial step ``t``, backtracking on a non-monotone Armijo
    rule against the largest of the last ``memory`` objective values (or,
    for a convex problem, until the slope at the trial point along ``d`` is
    non-positive).  On a nonconvex set the backtracking follows the
    projected arc ``P_C(z - a t g)`` instead of the segment, so iterates
    stay feasible.

    Iteration stops when :func:`prox_residual` drops to ``tol``.  If the
    iterate stops moving in floating point first, the point is accepted when
    its residual is within 100 * ``tol``; otherwise, and at the iteration
    cap, :class:`ConvergenceError` is raised with the last residual.
    """
    x = _as_vector(x)
    proj = op.feasible.project
    lam = op.lam
    along_segment = op.feasible.convex
    slope_test = op.convex

    def grad(z):
        return op.gradient(z) + lam * (z - x)

    def objective(z):
        return float(op.regularizer(z)) + 0.5 * lam * float(np.sum((z - x) ** 2))

    z = proj(x.copy() if z0 is None else _as_vector(z0, "z0").copy())
    g = grad(z)
    f = objective(z)
    history = [f]
    t = 1.0 / lam
    res = np.inf
    for _ in range(max_iter):
        res = float(np.max(np.abs(z - proj(z - g))))
        if res <= tol:
            return z
        d = proj(z - t * g) - z
        slope = float(g @ d)
        f_ref = max(history[-memory:])
        a = 1.0
        while True:
            zn = z + a * d if along_segment else proj(z - a * t * g)
            if np.array_equal(zn, z):
                break
            fn = objective(zn)
            gn = grad(zn)
            # near the optimum objective differences drown in rounding; a
            # non-positive end slope still certifies descent on a segment
            if fn <= f_ref + 1e-4 * a * slope or (slope_test and gn @ d <= 0):
                break
            a *= 0.5
        if np.array_equal(zn, z):
            if res <= 100 * tol:
                return z
            raise ConvergenceError(
                f"{op.name}: iterate stalled with residual {res:.3e}", residual=res
            )
        s = zn - z
        sy = float(s @ (gn - g))
        t = min(max(float(s @ s) / sy, 1e-12), 1e12) if sy > 0 else 1e12
        z, g, f = zn, gn, fn
        history.append(f)
    raise ConvergenceError(
        f"{op.name}: no convergence in {max_iter} iterations (residual {res:.3e})",
        residual=res,
    )


# -- sigmoid ----------------------------------------------------------------


def _logit_minus_identity(t):
    return logit(t) - t


def _binary_entropy_minus_sq(z):
    # antiderivative of logit(t) - t, shifted to vanish at t = 1/2
    return float(
        np.sum(z * np.log(z) + (1.0 - z) * np.log1p(-z) + np.log(2.0) - 0.5 * z * z + 0.125)
    )


def sigmoid_regularizer(z):
    """``sum_i int_{1/2}^{z_i} (logit(t) - t) dt`` by adaptive quadrature.

    Independent of the closed-form antiderivative the sigmoid operator uses."""
    z = np.clip(_as_vector(z, "z"), DOMAIN_LO, DOMAIN_HI)
    total = 0.0
    for zi in z:
        val, _ = integrate.quad(_logit_minus_identity, 0.5, zi, epsabs=1e-12, epsrel=1e-10)
        total += val
    return total


def sigmoid_operator(lam=1.0):
    """Logistic sigmoid as a prox; the closed form applies only at ``lam=1``."""
    return ProxOperator(
        regularizer=_binary_entropy_minus_sq,
        gradient=_logit_minus_identity,
        feasible=Box(DOMAIN_LO, DOMAIN_HI),
        lam=lam,
        closed_form=expit if lam == 1.0 else None,
        name="sigmoid",
    )


def sigmoid_as_prox(x):
    return expit(_as_vector(x))


# -- softmax ----------------------------------------------------------------


def _neg_entropy_minus_sq(z):
    return float(np.sum(z * np.log(z) - 0.5 * z * z))


def _neg_entropy_minus_sq_grad(z):
    return np.log(z) + 1.0 - z


def softmax_operator(lam=1.0):
    return ProxOperator(
        regularizer=_neg_entropy_minus_sq,
        gradient=_neg_entropy_minus_sq_grad,
        feasible=Simplex(floor=DOMAIN_LO),
        lam=lam,
        closed_form=_softmax if lam == 1.0 else None,
        name="softmax",
    )


def softmax_as_prox(x):
    x = _as_vector(x)
    if x.size < 1:
        raise ShapeError("softmax needs at least one entry")
    return _softmax(x)


# -- projections ------------------------------------------------------------


def _zero(z):
    return 0.0


def _zero_grad(z):
    return np.zeros_like(z)


def relu_operator(lam=1.0):
    box = Box(0.0, np.inf)
    return ProxOperator(_zero, _zero_grad, box, lam, box.project, "relu")


def relu_as_prox(x):
    return np.maximum(_as_vector(x), 0.0)


def hardtanh_operator(lam=1.0):
    box = Box(-1.0, 1.0)
    return ProxOperator(_zero, _zero_grad, box, lam, box.project, "hardtanh")


def hardtanh_as_prox(x):
    return np.clip(_as_vector(x), -1.0, 1.0)


def batchnorm_operator(lam=1.0):
    sphere = SphereHyperplane()
    return ProxOperator(_zero, _zero_grad, sphere, lam, sphere.project, "batchnorm")


def batchnorm_as_prox(x):
    """``(x - mean) / std`` with the population standard deviation, which is
    exactly the nearest point on the centered sphere of radius ``sqrt(n)``.
    Zero-variance input has no unique nearest point and is rejected."""
    x = _as_vector(x)
    return SphereHyperplane().project(x)
