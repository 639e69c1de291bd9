"""Mini-batch proximal CCA layer and generalized CCA.

Views are stored feature-major: ``X`` and ``Y`` are ``d x n`` with one
column per sample, rows centered.  The correlation objective is

    L(X, Y) = -sum_{i<=k} sigma_i(T),
    T = (X X^T + eps I)^{-1/2} X Y^T (Y Y^T + eps I)^{-1/2},

and the layer maps a batch to

    (P, Q) = argmin  lam/(2n) ||P - X||^2 + lam/(2n) ||Q - Y||^2 + L(P, Q).

Its backward pass perturbs the inputs along the upstream adjoints and
re-solves, which is exact in the limit because the Jacobian of a proximal
map is symmetric.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import ConvergenceError, DegenerateSpectrumError, ShapeError
from .optim import AdamState, adam_update

__all__ = [
    "CcaProxLayer",
    "GccaResult",
    "OBJECTIVE_NOISE",
    "SPECTRAL_GAP",
    "MultiviewEpoch",
    "MultiviewTrainConfig",
    "TwoTower",
    "cca_objective",
    "cca_objective_grad",
    "gcca_alternating",
    "gcca_objective",
    "gcca_solve",
    "lambda_schedule",
    "multiview_forward",
    "multiview_predict",
    "prox_cca",
    "prox_cca_backward",
    "prox_cca_node",
    "prox_objective",
    "train_multiview",
]

SPECTRAL_GAP = 1e-8
_ROUNDING = 1e-14
OBJECTIVE_NOISE = 1e-12


def _pair(x, y):
    x = linalg.as_matrix(x, "X")
    y = linalg.as_matrix(y, "Y")
    if x.shape != y.shape:
        raise ShapeError(f"views must have equal shapes, got {x.shape} and {y.shape}")
    return x, y


def _check_k(k, d):
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d={d}, got k={k}")


def _check_eps(eps):
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")


def _cca_parts(x, y, eps, k, grad):
    a_half = linalg.inv_sqrt_psd(x @ x.T, eps)
    b_half = linalg.inv_sqrt_psd(y @ y.T, eps)
    t = a_half @ (x @ y.T) @ b_half
    res = linalg.svd(t)
    loss = -float(res.sigma[:k].sum())
    if not grad:
        return loss, t, res, None, None
    sig = res.sigma
    nxt = sig[k] if k < sig.size else 0.0
    if sig[k - 1] - nxt < SPECTRAL_GAP:
        raise DegenerateSpectrumError(
            f"sigma_{k} = {sig[k - 1]:.3g} and sigma_{k + 1} = {nxt:.3g} are not separated"
        )
    u = res.u[:, :k]
    v = res.vt[:k].T
    dk = sig[:k]
    # d(sum sigma) = tr(U^T dT V); the inverse square roots contribute
    # -1/2 A^{-1/2} U D U^T A^{-1/2} against dA = dX X^T + X dX^T
    cross = a_half @ u @ v.T @ b_half
    self_x = -0.5 * a_half @ (u * dk) @ u.T @ a_half
    self_y = -0.5 * b_half @ (v * dk) @ v.T @ b_half
    gx = 2 * self_x @ x + cross @ y
    gy = 2 * self_y @ y + cross.T @ x
    return loss, t, res, -gx, -gy


def cca_objective(x, y, eps, k):
    """Return ``(L, T, svd(T))``."""
    x, y = _pair(x, y)
    _check_k(k, x.shape[0])
    _check_eps(eps)
    return _cca_parts(x, y, eps, k, grad=False)[:3]


def cca_objective_grad(x, y, eps, k):
    """``(dL/dX, dL/dY)``.  Requires ``sigma_k - sigma_{k+1} >= SPECTRAL_GAP``
    (with ``sigma_{d+1} = 0``); otherwise the sum of the top ``k`` singular
    values is not differentiable and ``DegenerateSpectrumError`` is raised."""
    x, y = _pair(x, y)
    _check_k(k, x.shape[0])
    _check_eps(eps)
    return _cca_parts(x, y, eps, k, grad=True)[3:]


def lambda_schedule(k_sched, alpha0, epoch):
    """``(1 + k t) alpha0``."""
    if k_sched < 0:
        raise ValueError(f"k must be non-negative, got {k_sched}")
    if not alpha0 > 0:
        raise ValueError(f"alpha0 must be positive, got {alpha0}")
    return (1 + k_sched * epoch) * alpha0


@dataclass(frozen=True)
class CcaProxLayer:
    """``k`` components, T-matrix stabilizer ``eps``, schedule
    ``lam_t = (1 + k_sched t) alpha0``, inner-solver settings, Domke step
    ``domke_eps`` (relative to the adjoint scale) and the fade-out threshold
    above which the layer is the identity."""

    k: int = 2
    eps: float = 1e-4
    k_sched: float = 0.5
    alpha0: float = 0.1
    max_iter: int = 2000
    tol: float = 1e-6
    domke_eps: float = 1e-5
    domke_tol: float = 1e-13
    fade_threshold: float = 1e6

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.alpha0 > 0:
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")
        if self.k_sched < 0:
            raise ValueError(f"k_sched must be non-negative, got {self.k_sched}")
        for name in ("tol", "domke_eps", "domke_tol", "fade_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")

    def lam(self, epoch):
        return lambda_schedule(self.k_sched, self.alpha0, epoch)


def prox_objective(layer, p, q, x, y, lam):
    n = x.shape[1]
    disp = 0.5 * lam / n * (np.sum((p - x) ** 2) + np.sum((q - y) ** 2))
    return disp + cca_objective(p, q, layer.eps, layer.k)[0]


def _objective_and_grad(layer, z, x, y, lam):
    d = x.shape[0]
    n = x.shape[1]
    p, q = z[:d], z[d:]
    loss, _, _, gp, gq = _cca_parts(p, q, layer.eps, layer.k, grad=True)
    r = np.vstack([x, y])
    return 0.5 * lam / n * np.sum((z - r) ** 2) + loss, np.vstack([gp, gq]) + lam / n * (z - r)


def _lbfgs_direction(g, pairs):
    """Two-loop recursion; the initial scaling comes from the newest pair."""
    q = g.copy()
    coefs = []
    for s, yv, rho in reversed(pairs):
        a = rho * np.sum(s * q)
        q -= a * yv
        coefs.append(a)
    s, yv, _ = pairs[-1]
    q *= np.sum(s * yv) / np.sum(yv * yv)
    for (s, yv, rho), a in zip(pairs, reversed(coefs)):
        q += (a - rho * np.sum(yv * q)) * s
    return -q


def _newton_direction(layer, z, g, x, y, lam, max_cg=200):
    """Truncated conjugate gradients on ``H p = -g``; Hessian-vector products
    are central differences of the gradient."""
    span = 1e-5 * max(1.0, np.abs(z).max())

    def hess(v):
        t = span / np.abs(v).max()
        return (_objective_and_grad(layer, z + t * v, x, y, lam)[1]
                - _objective_and_grad(layer, z - t * v, x, y, lam)[1]) / (2 * t)  # fmt: skip

    p = np.zeros_like(g)
    r = -g
    v = r.copy()
    rr = np.sum(r * r)
    target = 1e-4 * rr
    for _ in range(max_cg):
        hv = hess(v)
        curv = np.sum(v * hv)
        if curv <= 0:
            return p if np.any(p) else -g
        a = rr / curv
        p += a * v
        r -= a * hv
        rr_new = np.sum(r * r)
        if rr_new <= target:
            break
        v = r + (rr_new / rr) * v
        rr = rr_new
    return p


def _line_search(layer, z, f, g, direction, a, x, y, lam):
    """Armijo backtracking (``c = 1e-4``, halving).  Returns ``(z, f, g)`` at
    the accepted point or ``None``."""
    slope = np.sum(direction * g)
    scale = _ROUNDING * max(1.0, abs(f))
    gsq = np.sum(g * g)
    for _ in range(60):
        zn = z + a * direction
        try:
            fn, gn = _objective_and_grad(layer, zn, x, y, lam)
        except DegenerateSpectrumError:
            fn = np.inf
        required = -1e-4 * a * slope
        if required > scale:
            if fn <= f - required:
                return zn, fn, gn
        elif fn <= f + OBJECTIVE_NOISE * max(1.0, abs(f)) and np.sum(gn * gn) < gsq:
            # the decrease is below the rounding of f; demand a smaller
            # gradient instead and only guard against increases above the
            # evaluation noise of f
            return zn, fn, gn
        a *= 0.5
    return None


def prox_cca(layer, x, y, lam, tol=None, start=None, history=None, memory=10):
    """Solve the proximal CCA problem by a descent method with Armijo
    backtracking.  Directions are limited-memory quasi-Newton, with a
    steepest-descent retry whenever they fail, so the objective never
    increases beyond floating-point rounding.  Stops when the gradient's
    max-abs entry is at most ``tol``.  ``history``, if a list, receives the
    objective after every accepted step."""
    x, y = _pair(x, y)
    _check_k(layer.k, x.shape[0])
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    tol = layer.tol if tol is None else tol
    d, n = x.shape
    z = np.vstack([x, y]) if start is None else np.vstack(start).astype(np.float64)
    f, g = _objective_and_grad(layer, z, x, y, lam)
    if history is not None:
        history.append(f)
    pairs = []
    for _ in range(layer.max_iter):
        gmax = np.abs(g).max()
        if gmax <= tol:
            return z[:d].copy(), z[d:].copy()
        step = None
        if pairs:
            direction = _lbfgs_direction(g, pairs)
            slope = np.sum(direction * g)
            if -1e-4 * slope <= _ROUNDING * max(1.0, abs(f)):
                # f can no longer rank the steps; use a Newton direction and
                # the gradient norm instead
                direction = _newton_direction(layer, z, g, x, y, lam)
                slope = np.sum(direction * g)
            if slope < 0:
                step = _line_search(layer, z, f, g, direction, 1.0, x, y, lam)
        if step is None:
            pairs = []
            # the displacement term alone fixes the initial scale
            step = _line_search(layer, z, f, g, -g, n / lam, x, y, lam)
        if step is None:
            if gmax <= 100 * tol:
                # rounding floor of the gradient reached
                return z[:d].copy(), z[d:].copy()
            raise ConvergenceError(f"prox_cca: line search stalled with gradient {gmax:.3g}", residual=gmax)
        zn, fn, gn = step
        s, yv = zn - z, gn - g
        sy = np.sum(s * yv)
        if sy > 1e-12 * np.sqrt(np.sum(s * s) * np.sum(yv * yv)):
            pairs.append((s, yv, 1.0 / sy))
            pairs = pairs[-memory:]
        z, f, g = zn, fn, gn
        if history is not None:
            history.append(f)
    gmax = np.abs(g).max()
    if gmax <= tol:
        return z[:d].copy(), z[d:].copy()
    raise ConvergenceError(
        f"prox_cca: gradient {gmax:.3g} above {tol:g} after {layer.max_iter} iterations", residual=gmax
    )


def _domke_tol(layer, lam, n):
    return layer.domke_tol * max(1.0, lam / n)


def prox_cca_backward(layer, x, y, dp, dq, lam, solution=None):
    """Adjoints ``(dJ/dX, dJ/dY)`` by one-sided perturbation of the inputs
    along ``(dJ/dP, dJ/dQ)``.  Both solves stop at gradient
    ``domke_tol * max(1, lam/n)``, which bounds the solution error rather
    than the gradient; the perturbed solve starts from the unperturbed
    solution."""
    x, y = _pair(x, y)
    dp, dq = _pair(dp, dq)
    scale = max(np.abs(dp).max(), np.abs(dq).max())
    if scale == 0:
        return np.zeros_like(x), np.zeros_like(y)
    h = layer.domke_eps / max(1.0, scale)
    tol = _domke_tol(layer, lam, x.shape[1])
    if solution is None:
        solution = prox_cca(layer, x, y, lam, tol=tol)
    p0, q0 = solution
    p1, q1 = prox_cca(layer, x + h * dp, y + h * dq, lam, tol=tol, start=(p0, q0))
    return (p1 - p0) / h, (q1 - q0) / h


def prox_cca_node(layer, x, y, lam, tol=None):
    """Tape node holding ``[P; Q]`` (2d x n) computed from nodes ``x``, ``y``;
    its backward pass is :func:`prox_cca_backward`.  The forward solve
    defaults to the backward tolerance so both solves match."""
    xv, yv = x.value, y.value
    d = xv.shape[0]
    tol = _domke_tol(layer, lam, xv.shape[1]) if tol is None else tol
    p, q = prox_cca(layer, xv, yv, lam, tol=tol)

    def backward(g):
        return prox_cca_backward(layer, xv, yv, g[:d], g[d:], lam, solution=(p, q))

    return ad.custom_node((x, y), np.vstack([p, q]), backward, name="prox_cca")


# ---------------------------------------------------------------------------
# Generalized CCA
# ---------------------------------------------------------------------------

GCCA_RIDGE = 1e-8


@dataclass(frozen=True)
class GccaResult:
    g: np.ndarray
    u: list
    objective: float


def _gcca_views(views):
    views = [linalg.as_matrix(v, f"view {j}") for j, v in enumerate(views)]
    if not views:
        raise ValueError("need at least one view")
    n = views[0].shape[0]
    if any(v.shape[0] != n for v in views):
        raise ShapeError(f"views must share the sample count, got {[v.shape for v in views]}")
    return views


def gcca_objective(views, g, us):
    return float(sum(np.sum((g - x @ u) ** 2) for x, u in zip(views, us)))


def gcca_solve(views, r, ridge=GCCA_RIDGE):
    """``min sum_j ||G - X_j U_j||^2`` subject to ``G^T G = I``.  ``G`` holds
    the top ``r`` eigenvectors of ``sum_j X_j (X_j^T X_j + ridge I)^{-1} X_j^T``."""
    views = _gcca_views(views)
    n = views[0].shape[0]
    m = np.zeros((n, n))
    for x in views:
        m += x @ linalg.solve_spd(x.T @ x + ridge * np.eye(x.shape[1]), x.T)
    m = 0.5 * (m + m.T)
    w, vecs = linalg.sym_eig(m)
    rank = int(np.sum(w > 1e-10 * max(1.0, w[0])))
    if not 1 <= r <= rank:
        raise ValueError(f"core dimension r={r} must lie in [1, rank(M)={rank}]")
    g = vecs[:, :r]
    us = [linalg.solve_spd(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ g) for x in views]
    return GccaResult(g, us, gcca_objective(views, g, us))


def _polar(a):
    res = linalg.svd(a)
    return res.u @ res.vt


def gcca_alternating(views, r, rng, max_iter=10_000, tol=1e-13):
    """Alternating minimization: least-squares ``U_j`` given ``G``, then ``G``
    as the orthogonal polar factor of ``sum_j X_j U_j``.  Starts from a random
    orthonormal ``G``."""
    views = _gcca_views(views)
    n = views[0].shape[0]
    g = _polar(rng.standard_normal((n, r)))
    prev = np.inf
    for _ in range(max_iter):
        us = [np.linalg.lstsq(x, g, rcond=None)[0] for x in views]
        obj = gcca_objective(views, g, us)
        if prev - obj <= tol * max(1.0, abs(obj)):
            break
        prev = obj
        g = _polar(sum(x @ u for x, u in zip(views, us)))
    us = [np.linalg.lstsq(x, g, rcond=None)[0] for x in views]
    return GccaResult(g, us, gcca_objective(views, g, us))


# ---------------------------------------------------------------------------
# Two-tower pipeline
# ---------------------------------------------------------------------------


@dataclass
class TwoTower:
    """One tanh layer per view (``wf``, ``bf``, ``wg``, ``bg``) and a shared
    linear head (``wh``, ``bh``) applied to both prox outputs."""

    wf: np.ndarray
    bf: np.ndarray
    wg: np.ndarray
    bg: np.ndarray
    wh: np.ndarray
    bh: np.ndarray

    @classmethod
    def init(cls, dx, dy, d, classes, rng):
        def draw(rows, cols):
            a = 1.0 / np.sqrt(cols)
            return rng.uniform(-a, a, size=(rows, cols))

        return cls(
            draw(d, dx), np.zeros((d, 1)), draw(d, dy), np.zeros((d, 1)),
            draw(classes, d), np.zeros((classes, 1)),
        )  # fmt: skip

    NAMES = ("wf", "bf", "wg", "bg", "wh", "bh")

    def arrays(self):
        return [getattr(self, k) for k in self.NAMES]

    def copy(self):
        return TwoTower(*(a.copy() for a in self.arrays()))

    def map(self, fn, *others):
        return TwoTower(*(fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others))))


def multiview_forward(tape, leaves, layer, xb, yb, epoch, use_prox=True, tol=None):
    """Build the two-view graph on ``tape``.  ``leaves`` are tape variables
    for the ``TwoTower`` arrays; ``xb``, ``yb`` are samples-by-features.
    Returns ``(logits_x, logits_y, averaged)`` as n x classes nodes.  The
    prox layer is skipped when ``use_prox`` is false or ``lam_t`` reaches
    the fade threshold."""
    wf, bf, wg, bg, wh, bh = leaves
    xt = tape.constant(np.asarray(xb, dtype=np.float64).T)
    yt = tape.constant(np.asarray(yb, dtype=np.float64).T)
    x = ad.center(ad.tanh(ad.add(ad.matmul(wf, xt), bf)))
    y = ad.center(ad.tanh(ad.add(ad.matmul(wg, yt), bg)))
    lam = layer.lam(epoch)
    if use_prox and lam < layer.fade_threshold:
        d = x.shape[0]
        pq = prox_cca_node(layer, x, y, lam, tol)
        x = ad.center(ad.slice_rows(pq, 0, d))
        y = ad.center(ad.slice_rows(pq, d, 2 * d))
    logits_x = ad.transpose(ad.add(ad.matmul(wh, x), bh))
    logits_y = ad.transpose(ad.add(ad.matmul(wh, y), bh))
    averaged = ad.scale(ad.add(logits_x, logits_y), 0.5)
    return logits_x, logits_y, averaged


def _forward_loss(model, layer, xb, yb, labels, epoch, use_prox):
    tape = ad.Tape()
    leaves = [tape.variable(a) for a in model.arrays()]
    _, _, averaged = multiview_forward(tape, leaves, layer, xb, yb, epoch, use_prox)
    loss = ad.cross_entropy_loss(averaged, labels)
    tape.backward(loss)
    zero = np.zeros_like
    grads = TwoTower(*(zero(a) if v.grad is None else v.grad for a, v in zip(model.arrays(), leaves)))
    return loss.value.item(), averaged.value, grads


def multiview_predict(model, layer, x, y, epoch, use_prox=True):
    """Averaged logits for a whole split treated as one batch; the prox
    solve uses the layer's forward tolerance."""
    tape = ad.Tape()
    leaves = [tape.constant(a) for a in model.arrays()]
    return multiview_forward(tape, leaves, layer, x, y, epoch, use_prox, layer.tol)[2].value


def _tower_outputs(model, x, y):
    fx = np.tanh(model.wf @ np.asarray(x).T + model.bf)
    gy = np.tanh(model.wg @ np.asarray(y).T + model.bg)
    return fx - fx.mean(axis=1, keepdims=True), gy - gy.mean(axis=1, keepdims=True)


@dataclass(frozen=True)
class MultiviewTrainConfig:
    """Adam on the two-tower model with cross-entropy on averaged logits.
    ``use_prox=False`` trains the plain two-tower baseline."""

    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-2
    weight_decay: float = 1e-4
    use_prox: bool = True
    jitter: float = 1e-8


class MultiviewEpoch(NamedTuple):
    epoch: int
    lam: float
    loss: float
    train_accuracy: float
    test_accuracy: float
    correlation: float


def train_multiview(model, layer, cfg, train, test, rng):
    """Train in place of a copy of ``model``; returns ``(records, model)``.

    ``train`` and ``test`` are ``(x, y, labels)`` triples with samples in
    rows.  The recorded ``lam`` is ``layer.lam(epoch)`` and ``correlation``
    is ``-L`` of the centered tower features on the test split.  A batch
    whose spectrum is degenerate is retried once with ``cfg.jitter`` noise
    added to both views."""
    x_tr, y_tr, l_tr = train
    x_te, y_te, l_te = test
    model = model.copy()
    state = AdamState.zeros_like(model)
    n = x_tr.shape[0]
    records = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            try:
                loss, _, grads = _forward_loss(model, layer, xb, yb, l_tr[idx], epoch, cfg.use_prox)
            except DegenerateSpectrumError:
                xb = xb + cfg.jitter * rng.standard_normal(xb.shape)
                yb = yb + cfg.jitter * rng.standard_normal(yb.shape)
                loss, _, grads = _forward_loss(model, layer, xb, yb, l_tr[idx], epoch, cfg.use_prox)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}, batch {batches}")
            model = adam_update(model, grads, state, cfg.lr, cfg.weight_decay)
            total += loss
            batches += 1
        pred_tr = multiview_predict(model, layer, x_tr, y_tr, epoch, cfg.use_prox)
        pred_te = multiview_predict(model, layer, x_te, y_te, epoch, cfg.use_prox)
        train_acc = float(np.mean(np.argmax(pred_tr, axis=1) == l_tr))
        test_acc = float(np.mean(np.argmax(pred_te, axis=1) == l_te))
        fx, gy = _tower_outputs(model, x_te, y_te)
        corr = -cca_objective(fx, gy, layer.eps, layer.k)[0]
        records.append(MultiviewEpoch(epoch, layer.lam(epoch), total / batches, train_acc, test_acc, corr))
    return records, model
