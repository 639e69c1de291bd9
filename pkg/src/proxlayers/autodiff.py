"""A small reverse-mode autodiff tape over 2-D float64 arrays.

Every recorded value is a 2-D array.  A node stores its value, its parents
and a vector-Jacobian callback ``vjp(upstream) -> tuple of parent adjoints``.
Layers whose backward pass is derived by hand (the proximal layers in this
package) enter the graph through :func:`custom_node`.

The tape supports exactly one call to :meth:`Tape.backward`; build a fresh
tape for every forward/backward pass.
"""

import numbers

import numpy as np

from .errors import ShapeError

__all__ = [
    "Node",
    "Tape",
    "add",
    "center",
    "concat_rows",
    "cross_entropy_loss",
    "custom_node",
    "finite_diff_check",
    "hadamard",
    "logsoftmax",
    "matmul",
    "mse_loss",
    "relu",
    "scale",
    "sigmoid",
    "slice_rows",
    "sub",
    "sum",
    "tanh",
    "transpose",
]


class Node:
    __slots__ = ("tape", "id", "value", "parents", "vjp", "grad", "name")

    def __init__(self, tape, node_id, value, parents, vjp, name=None):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id}{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of nodes; ids increase in creation order."""

    def __init__(self):
        self.nodes = []
        self._backward_done = False

    def _record(self, value, parents, vjp, name=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"node values must be 2-D, got shape {value.shape}")
        for p in parents:
            if p.tape is not self:
                raise ValueError("parents belong to a different tape")
        node = Node(self, len(self.nodes), value, tuple(parents), vjp, name)
        self.nodes.append(node)
        return node

    def variable(self, value, name=None):
        """Leaf node.  Leaves receive gradients like any other node."""
        value = np.array(value, dtype=np.float64, copy=True)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite entries in leaf {name or ''}".strip())
        return self._record(value, (), None, name)

    constant = variable

    def backward(self, root):
        """Accumulate d root / d node into ``node.grad`` for every node that
        ``root`` depends on.  Nodes not on a path to ``root`` keep ``grad=None``."""
        if self._backward_done:
            raise RuntimeError("backward() already called on this tape")
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.shape != (1, 1):
            raise ShapeError(f"backward() needs a 1x1 root, got shape {root.shape}")
        self._backward_done = True
        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: root.id + 1]):
            if node.grad is None or not node.parents:
                continue
            adjoints = node.vjp(node.grad)
            if len(adjoints) != len(node.parents):
                raise ShapeError(
                    f"{node!r}: backward returned {len(adjoints)} adjoints "
                    f"for {len(node.parents)} inputs"
                )
            for parent, adj in zip(node.parents, adjoints):
                if adj is None:
                    continue
                adj = np.asarray(adj, dtype=np.float64)
                if adj.shape != parent.shape:
                    raise ShapeError(
                        f"{node!r}: adjoint for input #{parent.id} has shape "
                        f"{adj.shape}, expected {parent.shape}"
                    )
                if parent.grad is None:
                    parent.grad = adj.copy()
                else:
                    parent.grad = parent.grad + adj


def _tape_of(*items):
    for item in items:
        if isinstance(item, Node):
            return item.tape
    raise TypeError("at least one operand must be a Node")


def _lift(tape, x):
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.value, b.value, "add")
    return tape._record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.value, b.value, "sub")
    return tape._record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def hadamard(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.value, b.value, "hadamard")
    return tape._record(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return tape._record(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a):
    return a.tape._record(a.value.T, (a,), lambda g: (g.T,))


def scale(a, c):
    c = float(c)
    return a.tape._record(c * a.value, (a,), lambda g: (c * g,))


def sum(a):  # noqa: A001 - mirrors numpy naming
    return a.tape._record(
        np.array([[a.value.sum()]]),
        (a,),
        lambda g: (np.full(a.shape, g[0, 0]),),
    )


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape._record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,))


def logsoftmax(a):
    """Row-wise log-softmax."""
    z = a.value - a.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return a.tape._record(
        out,
        (a,),
        lambda g: (g - soft * g.sum(axis=1, keepdims=True),),
    )


def mse_loss(pred, target):
    """Mean of squared differences, as a 1x1 node."""
    tape = _tape_of(pred, target)
    pred, target = _lift(tape, pred), _lift(tape, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.value - target.value
    n = diff.size

    def vjp(g):
        d = (2.0 * g[0, 0] / n) * diff
        return d, -d

    return tape._record(np.array([[np.mean(diff * diff)]]), (pred, target), vjp)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise
    softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy_loss: {n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g[0, 0] / n),)

    return logits.tape._record(np.array([[loss]]), (logits,), vjp)


def center(a):
    """Subtract each row's mean (right-multiplication by the centering matrix)."""

    def vjp(g):
        return (g - g.mean(axis=1, keepdims=True),)

    return a.tape._record(a.value - a.value.mean(axis=1, keepdims=True), (a,), vjp)


def concat_rows(*nodes):
    tape = _tape_of(*nodes)
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[n.shape for n in nodes]}")
    splits = np.cumsum([n.shape[0] for n in nodes])[:-1]
    return tape._record(
        np.vstack([n.value for n in nodes]),
        nodes,
        lambda g: tuple(np.split(g, splits, axis=0)),
    )


def slice_rows(a, start, stop):
    rows = a.shape[0]
    if not 0 <= start < stop <= rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")

    def vjp(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return a.tape._record(a.value[start:stop], (a,), vjp)


def custom_node(inputs, value, backward, name=None):
    """Insert a node with a hand-written vector-Jacobian product.

    ``backward(upstream)`` must return one adjoint per input (or ``None`` for
    an input that receives no gradient), each shaped like that input.
    """
    inputs = tuple(inputs)
    tape = _tape_of(*inputs)
    return tape._record(value, inputs, lambda g: tuple(backward(g)), name=name)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def _scalar(out):
    val = float(out.value[0, 0]) if isinstance(out, Node) else float(np.asarray(out).reshape(()))
    if not np.isfinite(val):
        raise FloatingPointError("function returned a non-finite value")
    return val


def finite_diff_check(fn, x, h=1e-6, grad=None):
    """Compare an analytic gradient against central differences.

    Two calling conventions:

    * ``grad is None`` -- ``fn(node)`` receives a leaf on a fresh tape and
      returns a 1x1 node; the analytic gradient comes from the tape.
    * ``grad`` given -- ``fn(array)`` returns a float and ``grad(array)``
      returns the analytic gradient.

    Returns the maximum over entries of
    ``|analytic - central| / max(1, |analytic|)``.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-8, 1e-3]")
    x = np.array(x, dtype=np.float64, copy=True)
    if grad is None:
        tape = Tape()
        leaf = tape.variable(x)
        out = fn(leaf)
        _scalar(out)
        tape.backward(out)
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        analytic = analytic.reshape(x.shape)

        def evaluate(v):
            return _scalar(fn(Tape().variable(v)))

    else:
        analytic = np.asarray(grad(x.copy()), dtype=np.float64).reshape(x.shape)

        def evaluate(v):
            return _scalar(fn(v))

    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi, lo = orig + h, orig - h
        flat[i] = hi
        f_plus = evaluate(x.copy())
        flat[i] = lo
        f_minus = evaluate(x.copy())
        flat[i] = orig
        # divide by the representable step, not the nominal 2h
        num_flat[i] = (f_plus - f_minus) / (hi - lo)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
