"""LSTM cell with a robustness proximal map on the cell state.

Each step computes the usual candidate state and output

    s_t = f * c_{t-1} + i * g,        h_t = o * tanh(s_t),

and then carries ``c_t = (I + rho G_t G_t^T)^{-1} s_t`` forward, where
``G_t = d s_t / d x_t`` and ``rho = delta^2 / lam``.  The proximal step pulls
the state toward directions that small input perturbations cannot move.
With ``rho = 0`` the cell is a vanilla LSTM.

Arrays are batched: inputs ``(B, T, D)``, states ``(B, H)``, Jacobians
``(B, H, D)``.  Gate blocks are stacked in the order input, forget, output,
candidate.
"""

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import ShapeError
from .optim import AdamState, adam_update

__all__ = [
    "AdamState",
    "LstmParams",
    "ProxStepCache",
    "TrainConfig",
    "accuracy",
    "adam_update",
    "bptt",
    "input_jacobian",
    "jacobian_adjoint",
    "lstm_step",
    "predict",
    "prox_lstm_layer",
    "prox_step",
    "prox_step_backward",
    "sequence_forward",
    "train_sequence_classifier",
    "vanilla_lstm_layer",
]


@dataclass
class LstmParams:
    """``w`` (4H, D) input weights, ``u`` (4H, H) recurrent weights, ``b`` (4H,)
    biases, and a linear head ``v`` (K, H), ``bv`` (K,) on the last output."""

    w: np.ndarray
    u: np.ndarray
    b: np.ndarray
    v: np.ndarray
    bv: np.ndarray

    def __post_init__(self):
        h4, d = self.w.shape
        if h4 % 4:
            raise ShapeError(f"w must have 4H rows, got {h4}")
        h = h4 // 4
        if self.u.shape != (h4, h) or self.b.shape != (h4,):
            raise ShapeError(f"u must be {(h4, h)} and b {(h4,)}, got {self.u.shape}, {self.b.shape}")
        if self.v.ndim != 2 or self.v.shape[1] != h or self.bv.shape != (self.v.shape[0],):
            raise ShapeError(f"head shapes {self.v.shape}, {self.bv.shape} do not fit H={h}")

    @classmethod
    def init(cls, d_in, hidden, classes, rng):
        """Uniform on ``[-1/sqrt(H), 1/sqrt(H)]`` for every entry."""
        a = 1.0 / np.sqrt(hidden)

        def draw(*shape):
            return rng.uniform(-a, a, size=shape)

        return cls(
            draw(4 * hidden, d_in), draw(4 * hidden, hidden), draw(4 * hidden),
            draw(classes, hidden), draw(classes),
        )  # fmt: skip

    @property
    def hidden(self):
        return self.u.shape[1]

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def copy(self):
        return LstmParams(*(a.copy() for a in self.arrays()))

    def map(self, fn, *others):
        return LstmParams(*(fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others))))


class Gates(NamedTuple):
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray


def _split(z, h):
    return Gates(expit(z[:, :h]), expit(z[:, h : 2 * h]), expit(z[:, 2 * h : 3 * h]), np.tanh(z[:, 3 * h :]))


def _batch(c_prev, h_prev, x):
    # promote a single sample to a batch of one
    single = np.ndim(x) == 1
    c_prev, h_prev, x = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (c_prev, h_prev, x))
    return single, c_prev, h_prev, x


def _check(params, c_prev, h_prev, x):
    h, d = params.hidden, params.w.shape[1]
    if c_prev.shape[1:] != (h,) or h_prev.shape[1:] != (h,) or x.shape[1:] != (d,):
        raise ShapeError(
            f"expected states of width {h} and inputs of width {d}, "
            f"got {c_prev.shape}, {h_prev.shape}, {x.shape}"
        )
    if not c_prev.shape[0] == h_prev.shape[0] == x.shape[0]:
        raise ShapeError("batch sizes differ")


def _gates(params, h_prev, x):
    return _split(x @ params.w.T + h_prev @ params.u.T + params.b, params.hidden)


def lstm_step(params, c_prev, h_prev, x):
    """Return ``(s, h, gates)`` for one step, before the proximal map."""
    single, c_prev, h_prev, x = _batch(c_prev, h_prev, x)
    _check(params, c_prev, h_prev, x)
    gt = _gates(params, h_prev, x)
    s = gt.f * c_prev + gt.i * gt.g
    h = gt.o * np.tanh(s)
    if single:
        return s[0], h[0], Gates(*(a[0] for a in gt))
    return s, h, gt


def _jacobian_weights(gt, c_prev):
    # d s / d z for the three gates that feed s
    u_f = c_prev * gt.f * (1 - gt.f)
    u_i = gt.g * gt.i * (1 - gt.i)
    u_g = gt.i * (1 - gt.g**2)
    return u_f, u_i, u_g


def _blocks(m, h):
    return m[:h], m[h : 2 * h], m[2 * h : 3 * h], m[3 * h :]


def _jacobian(params, gt, c_prev):
    w_i, w_f, _, w_g = _blocks(params.w, params.hidden)
    u_f, u_i, u_g = _jacobian_weights(gt, c_prev)
    return u_f[:, :, None] * w_f + u_i[:, :, None] * w_i + u_g[:, :, None] * w_g


def input_jacobian(params, c_prev, h_prev, x):
    """``G = d s / d x``, shape (H, D) per sample."""
    single, c_prev, h_prev, x = _batch(c_prev, h_prev, x)
    _check(params, c_prev, h_prev, x)
    out = _jacobian(params, _gates(params, h_prev, x), c_prev)
    return out[0] if single else out


def _jacobian_pullback(params, gt, c_prev, a):
    """Gradient of ``<A, G>`` for ``G = diag(u_f) W_f + diag(u_i) W_i + diag(u_g) W_g``:
    returns adjoints of the gate pre-activations (i, f, g), of ``c_prev`` and
    of the weight blocks (i, f, g).  These are the directional second
    derivatives of ``s`` in ``x`` and the recurrent inputs."""
    i, f, _, g = gt
    w_i, w_f, _, w_g = _blocks(params.w, params.hidden)
    u_f, u_i, u_g = _jacobian_weights(gt, c_prev)
    r_f = (a * w_f).sum(axis=2)
    r_i = (a * w_i).sum(axis=2)
    r_g = (a * w_g).sum(axis=2)
    sig_i, sig_f, tanh_g = i * (1 - i), f * (1 - f), 1 - g**2
    dz_f = r_f * c_prev * sig_f * (1 - 2 * f)
    dz_i = r_i * g * sig_i * (1 - 2 * i) + r_g * sig_i * tanh_g
    dz_g = r_i * tanh_g * sig_i - r_g * 2 * i * g * tanh_g
    dc = r_f * sig_f
    dw_i = (u_i[:, :, None] * a).sum(axis=0)
    dw_f = (u_f[:, :, None] * a).sum(axis=0)
    dw_g = (u_g[:, :, None] * a).sum(axis=0)
    return dz_i, dz_f, dz_g, dc, dw_i, dw_f, dw_g


def jacobian_adjoint(params, c_prev, h_prev, x, a):
    """Gradients of ``<A, G(c_prev, h_prev, x)>`` in ``h_prev`` and ``c_prev``
    for a single sample."""
    single, c_prev, h_prev, x = _batch(c_prev, h_prev, x)
    _check(params, c_prev, h_prev, x)
    a = np.asarray(a, dtype=np.float64)
    a = a[None] if a.ndim == 2 else a
    gt = _gates(params, h_prev, x)
    dz_i, dz_f, dz_g, dc, *_ = _jacobian_pullback(params, gt, c_prev, a)
    dz = np.concatenate([dz_i, dz_f, np.zeros_like(dz_i), dz_g], axis=1)
    dh = dz @ params.u
    return (dh[0], dc[0]) if single else (dh, dc)


class ProxStepCache(NamedTuple):
    s: np.ndarray  # (B, H)
    g: np.ndarray  # (B, H, D)
    c: np.ndarray  # (B, H)
    rho: float
    m_inv: np.ndarray  # (B, H, H) inverse of I + rho G G^T; empty when rho = 0


def _prox_inverse(g, rho):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("input Jacobian has non-finite entries")
    m = np.eye(g.shape[1]) + rho * (g @ g.transpose(0, 2, 1))
    # M is SPD with spectrum >= 1, so the explicit inverse is well conditioned
    return np.linalg.inv(m)


def _prox_cached(s, g, rho):
    if rho == 0:
        return ProxStepCache(s, g, s.copy(), rho, np.zeros((s.shape[0], 0, 0)))
    m_inv = _prox_inverse(g, rho)
    return ProxStepCache(s, g, (m_inv @ s[:, :, None])[:, :, 0], rho, m_inv)


def _prox(s, g, rho):
    return _prox_cached(s, g, rho).c


def _rho(lam, delta):
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if delta < 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    return delta**2 / lam


def prox_step(s, g, lam, delta):
    """``(I + delta^2 / lam G G^T)^{-1} s``, the minimizer of
    ``lam ||c - s||^2 + delta^2 ||c^T G||^2``."""
    single = np.ndim(s) == 1
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    g = np.asarray(g, dtype=np.float64)
    g = g[None] if g.ndim == 2 else g
    if g.shape[:2] != s.shape:
        raise ShapeError(f"G of shape {g.shape} does not match states {s.shape}")
    c = _prox(s, g, _rho(lam, delta))
    return c[0] if single else c


def _prox_backward(cache, dc):
    if cache.rho == 0:
        return dc.copy(), np.zeros_like(cache.g)
    a = (cache.m_inv @ dc[:, :, None])[:, :, 0]
    sym = a[:, :, None] * cache.c[:, None, :] + cache.c[:, :, None] * a[:, None, :]
    return a, -cache.rho * (sym @ cache.g)


def prox_step_backward(cache, dc):
    """Adjoints ``(dJ/ds, dJ/dG)`` of the proximal step given ``dJ/dc``:
    ``a = M^{-1} dJ/dc`` and ``dJ/dG = -rho (a c^T + c a^T) G``."""
    single = cache.s.ndim == 1
    if single:
        cache = ProxStepCache(*(a[None] for a in cache[:3]), cache.rho, cache.m_inv[None])
    ds, dg = _prox_backward(cache, np.atleast_2d(np.asarray(dc, dtype=np.float64)))
    return (ds[0], dg[0]) if single else (ds, dg)


def make_cache(s, g, lam, delta):
    """Run the proximal step and keep what its backward pass needs."""
    single = np.ndim(s) == 1
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    g = np.asarray(g, dtype=np.float64)
    g = g[None] if g.ndim == 2 else g
    cache = _prox_cached(s, g, _rho(lam, delta))
    if single:
        return ProxStepCache(*(a[0] for a in cache[:3]), cache.rho, cache.m_inv[0])
    return cache


class _StepRecord(NamedTuple):
    x: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    gates: Gates
    prox: ProxStepCache


def _sequence_inputs(params, xs):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[2] != params.w.shape[1]:
        raise ShapeError(f"sequences must be (B, T, {params.w.shape[1]}), got {xs.shape}")
    if xs.shape[1] == 0:
        raise ValueError("sequence length must be positive")
    return xs


def sequence_forward(params, xs, rho):
    """Run the cell over ``xs`` (B, T, D) from zero state.  Returns the
    final output ``h_T`` (B, H) and the per-step records for backward."""
    xs = _sequence_inputs(params, xs)
    bsz = xs.shape[0]
    c = np.zeros((bsz, params.hidden))
    h = np.zeros((bsz, params.hidden))
    records = []
    for t in range(xs.shape[1]):
        x = xs[:, t]
        gt = _gates(params, h, x)
        s = gt.f * c + gt.i * gt.g
        h_new = gt.o * np.tanh(s)
        g = _jacobian(params, gt, c) if rho else np.zeros((bsz, params.hidden, 0))
        cache = _prox_cached(s, g, rho)
        records.append(_StepRecord(x, c, h, gt, cache))
        c, h = cache.c, h_new
    return h, records


def sequence_backward(params, records, dh_last):
    """Gradients ``(dw, du, db)`` of the recurrent weights given ``dJ/dh_T``."""
    hid = params.hidden
    dw = np.zeros_like(params.w)
    du = np.zeros_like(params.u)
    db = np.zeros_like(params.b)
    dwi, dwf, _, dwg = _blocks(dw, hid)  # views into dw
    dh = dh_last
    dc = np.zeros_like(dh_last)  # c_T feeds nothing
    for rec in reversed(records):
        gt, c_prev = rec.gates, rec.c_prev
        i, f, o, g = gt
        rho = rec.prox.rho
        if rho:
            ds, dgm = _prox_backward(rec.prox, dc)
        else:
            ds = dc
        tanh_s = np.tanh(rec.prox.s)
        do = dh * tanh_s
        ds = ds + dh * o * (1 - tanh_s**2)
        di_a, df_a, dg_a = ds * g, ds * c_prev, ds * i
        dc_prev = ds * f
        di_sig, df_sig, do_sig, dg_tanh = i * (1 - i), f * (1 - f), o * (1 - o), 1 - g**2
        dzi = di_a * di_sig
        dzf = df_a * df_sig
        dzo = do * do_sig
        dzg = dg_a * dg_tanh
        if rho:
            pz_i, pz_f, pz_g, pc, pw_i, pw_f, pw_g = _jacobian_pullback(params, gt, c_prev, dgm)
            dzi, dzf, dzg = dzi + pz_i, dzf + pz_f, dzg + pz_g
            dc_prev = dc_prev + pc
            dwi += pw_i
            dwf += pw_f
            dwg += pw_g
        dz = np.concatenate([dzi, dzf, dzo, dzg], axis=1)
        dw += dz.T @ rec.x
        du += dz.T @ rec.h_prev
        db += dz.sum(axis=0)
        dh = dz @ params.u
        dc = dc_prev
    return dw, du, db


def prox_lstm_layer(w, u, b, xs, rho):
    """Tape node for ``h_T`` whose backward pass is the hand-derived BPTT.
    ``w``, ``u`` are nodes holding the weight matrices, ``b`` a (1, 4H) node."""
    params = LstmParams(w.value, u.value, b.value[0], np.zeros((1, u.shape[1])), np.zeros(1))
    h_last, records = sequence_forward(params, xs, rho)

    def backward(g):
        dw, du, db = sequence_backward(params, records, g)
        return dw, du, db[None, :]

    return ad.custom_node((w, u, b), h_last, backward, name="prox_lstm")


def vanilla_lstm_layer(w, u, b, xs):
    """The same recurrence with ``rho = 0``, composed from primitive tape ops
    so that its gradient comes from generic reverse mode."""
    xs = np.asarray(xs, dtype=np.float64)
    hid = u.shape[1]
    blocks = [ad.transpose(ad.slice_rows(w, k * hid, (k + 1) * hid)) for k in range(4)]
    rblocks = [ad.transpose(ad.slice_rows(u, k * hid, (k + 1) * hid)) for k in range(4)]
    bt = ad.transpose(b)  # (4H, 1)
    biases = [ad.transpose(ad.slice_rows(bt, k * hid, (k + 1) * hid)) for k in range(4)]
    tape = w.tape
    bsz = xs.shape[0]
    c = tape.constant(np.zeros((bsz, hid)))
    h = tape.constant(np.zeros((bsz, hid)))
    for t in range(xs.shape[1]):
        x = tape.constant(xs[:, t])
        z = [ad.add(ad.add(ad.matmul(x, blocks[k]), ad.matmul(h, rblocks[k])), biases[k]) for k in range(4)]
        i, f, o, g = ad.sigmoid(z[0]), ad.sigmoid(z[1]), ad.sigmoid(z[2]), ad.tanh(z[3])
        c = ad.add(ad.hadamard(f, c), ad.hadamard(i, g))
        h = ad.hadamard(o, ad.tanh(c))
    return h


def _loss_graph(params, xs, labels, rho, layer="prox"):
    tape = ad.Tape()
    w = tape.variable(params.w)
    u = tape.variable(params.u)
    b = tape.variable(params.b[None, :])
    v = tape.variable(params.v)
    bv = tape.variable(params.bv[None, :])
    if layer == "prox":
        h_last = prox_lstm_layer(w, u, b, xs, rho)
    elif layer == "vanilla":
        h_last = vanilla_lstm_layer(w, u, b, xs)
    else:
        raise ValueError(f"unknown layer {layer!r}")
    logits = ad.add(ad.matmul(h_last, ad.transpose(v)), bv)
    loss = ad.cross_entropy_loss(logits, labels)
    return tape, loss, (w, u, b, v, bv)


def bptt(params, xs, labels, rho, layer="prox"):
    """Mean cross-entropy of the head on ``h_T`` and its gradient for every
    parameter, returned as ``(loss, LstmParams)``."""
    tape, loss, leaves = _loss_graph(params, xs, labels, rho, layer)
    tape.backward(loss)
    w, u, b, v, bv = (np.zeros(leaf.shape) if leaf.grad is None else leaf.grad for leaf in leaves)
    return float(loss.value[0, 0]), LstmParams(w, u, b[0], v, bv[0])


def loss_value(params, xs, labels, rho):
    h_last, _ = sequence_forward(params, xs, rho)
    logits = h_last @ params.v.T + params.bv
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def predict(params, xs, rho):
    h_last, _ = sequence_forward(params, xs, rho)
    return np.argmax(h_last @ params.v.T + params.bv, axis=1)


def accuracy(params, xs, labels, rho):
    return float(np.mean(predict(params, xs, rho) == np.asarray(labels)))


@dataclass(frozen=True)
class TrainConfig:
    """Warm-start protocol: up to ``vanilla_epochs`` of plain LSTM training
    (stopping early once the epoch loss changes by less than ``plateau_tol``
    over ``plateau_window`` epochs), then ``prox_epochs`` with the proximal
    cell.  ``rho = delta^2 / lam``."""

    hidden: int = 16
    lam: float = 1.0
    delta: float = 1.0
    vanilla_epochs: int = 200
    prox_epochs: int = 20
    batch_size: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-4
    plateau_tol: float = 1e-5
    plateau_window: int = 10

    @property
    def rho(self):
        return _rho(self.lam, self.delta)


class EpochRecord(NamedTuple):
    phase: str
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float


def _run_epochs(params, state, cfg, data, rho, epochs, rng, phase, start, log, plateau=False):
    x_tr, y_tr, x_te, y_te = data
    n = x_tr.shape[0]
    losses = []
    for e in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for k in range(0, n, cfg.batch_size):
            idx = order[k : k + cfg.batch_size]
            loss, grads = bptt(params, x_tr[idx], y_tr[idx], rho)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in {phase} epoch {start + e}, batch {k // cfg.batch_size}")
            params = adam_update(params, grads, state, cfg.lr, cfg.weight_decay)
            total += loss * idx.size
        losses.append(total / n)
        log.append(
            EpochRecord(
                phase, start + e, losses[-1],
                accuracy(params, x_tr, y_tr, rho), accuracy(params, x_te, y_te, rho),
            )
        )  # fmt: skip
        w = cfg.plateau_window
        if plateau and len(losses) > w and abs(losses[-1] - losses[-1 - w]) < cfg.plateau_tol:
            break
    return params


def train_sequence_classifier(cfg, train, test, classes, rng):
    """Warm-start training.  Returns ``(records, models)`` where ``models``
    maps ``"vanilla"`` (continued plain training) and ``"prox"`` to the
    final parameters.  Both continuations start from the same warm model and
    see the same mini-batch order."""
    x_tr, y_tr = (np.asarray(a) for a in train)
    x_te, y_te = (np.asarray(a) for a in test)
    data = (x_tr, y_tr, x_te, y_te)
    params = LstmParams.init(x_tr.shape[2], cfg.hidden, classes, rng)
    state = AdamState.zeros_like(params)
    log = []
    params = _run_epochs(params, state, cfg, data, 0.0, cfg.vanilla_epochs, rng, "warmup", 0, log, plateau=True)
    start = len(log)
    shuffle_seed = int(rng.integers(2**63))
    models = {}
    for name, rho in (("vanilla", 0.0), ("prox", cfg.rho)):
        branch_state = AdamState(state.m.copy(), state.v.copy(), state.t)
        branch_rng = np.random.Generator(np.random.Philox(key=shuffle_seed))
        models[name] = _run_epochs(
            params.copy(), branch_state, cfg, data, rho, cfg.prox_epochs, branch_rng, name, start, log
        )
    return log, models
