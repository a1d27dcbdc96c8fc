"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors hold float64 numpy buffers. Operations compute eagerly; when a Tape
is active (``with Tape(): ...``), every op whose output depends on a
``requires_grad`` tensor is recorded so ``backward(root)`` can run reverse-mode
accumulation over the recorded nodes. Recording changes nothing about the
forward values, so inference simply runs without a tape.

Deliberately small: row-major dense float64 only, no implicit broadcasting
beyond bias-style row addition and scalar gates. Every op has a hand-written
backward rule; ``finite_difference_check`` is the house oracle for all of them.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "GraphError", "DeterminismError",
    "EmptySupportError", "tensor", "parameter", "backward",
    "finite_difference_check", "xavier_uniform",
    "linear", "matmul", "add", "sub", "mul", "add_rowvec", "scale",
    "add_scalar", "scale_by", "sigmoid", "tanh", "log", "softmax",
    "sum_all", "concat", "take_row", "slice_cols", "rows", "pick",
    "scatter_sum", "reshape", "dropout",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class GraphError(RuntimeError):
    """Tape misuse: no recording, or a second backward over a consumed tape."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned differing values."""


class EmptySupportError(ValueError):
    """Softmax over a fully masked vector has no support."""


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    ``grad`` is populated (accumulated) by ``backward``. ``name`` identifies
    trainable leaves in gradient maps and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_in_graph")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._in_graph = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot uniform sample of shape (fan_in, fan_out), bound sqrt(6/(in+out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# --------------------------------------------------------------------------
# Tape (the computation graph)
# --------------------------------------------------------------------------

_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops for one forward pass; consumable by one backward.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape is confined to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = self._prev
        return False


def _record(op, inputs, out, backward_fn):
    tape = _active_tape()
    if tape is None:
        return out
    if any(t.requires_grad or t._in_graph for t in inputs):
        out._in_graph = True
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode pass from a recorded scalar root.

    Accumulates into ``.grad`` of every ``requires_grad`` leaf reached and
    returns a map of leaf name -> gradient buffer for the named ones. The
    tape is consumed: a second backward over it raises GraphError.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    tape = _active_tape()
    if tape is None:
        raise GraphError("backward() needs an active Tape")
    if tape.consumed:
        raise GraphError("tape already consumed by a previous backward()")
    if not root._in_graph:
        raise GraphError("root was not recorded on the active tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    touched: dict[int, Tensor] = {}

    def accum(t: Tensor, g: np.ndarray):
        if not (t.requires_grad or t._in_graph):
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.array(g, dtype=np.float64, copy=True)
        if t.requires_grad:
            touched[key] = t

    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        node.backward_fn(g_out, accum)

    named: dict[str, np.ndarray] = {}
    for key, t in touched.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.name is not None:
            named[t.name] = g
    return named


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------

def _check_2d(op, t):
    if t.data.ndim != 2:
        raise ShapeError(f"{op}: expected 2-d operand, got shape {t.shape}")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b for x of shape (n, a), W (a, b), bias (b,)."""
    _check_2d("linear", x)
    _check_2d("linear", W)
    if x.data.shape[1] != W.data.shape[0]:
        raise ShapeError(f"linear: inner dims disagree, x {x.shape} vs W {W.shape}")
    if b.data.shape != (W.data.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match W {W.shape}")
    out = Tensor(x.data @ W.data + b.data)

    def bwd(g, accum):
        accum(x, g @ W.data.T)
        accum(W, x.data.T @ g)
        accum(b, g.sum(axis=0))

    return _record("linear", (x, W, b), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a)
    _check_2d("matmul", b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g, accum):
        accum(a, g @ b.data.T)
        accum(b, a.data.T @ g)

    return _record("matmul", (a, b), out, bwd)


def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g, accum):
        accum(a, g)
        accum(b, g)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g, accum):
        accum(a, g)
        accum(b, -g)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g, accum):
        accum(a, g * b.data)
        accum(b, g * a.data)

    return _record("mul", (a, b), out, bwd)


def add_rowvec(X: Tensor, v: Tensor) -> Tensor:
    """Add a row vector to every row of X (the one permitted broadcast)."""
    _check_2d("add_rowvec", X)
    if v.data.shape != (X.data.shape[1],):
        raise ShapeError(f"add_rowvec: vector {v.shape} does not match rows of {X.shape}")
    out = Tensor(X.data + v.data)

    def bwd(g, accum):
        accum(X, g)
        accum(v, g.sum(axis=0))

    return _record("add_rowvec", (X, v), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def bwd(g, accum):
        accum(x, g * c)

    return _record("scale", (x,), out, bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + float(c))

    def bwd(g, accum):
        accum(x, g)

    return _record("add_scalar", (x,), out, bwd)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x elementwise by a one-element gate tensor s."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: gate must be one element, got shape {s.shape}")
    sv = float(s.data.reshape(()))
    out = Tensor(x.data * sv)

    def bwd(g, accum):
        accum(x, g * sv)
        accum(s, np.full_like(s.data, float(np.sum(g * x.data))))

    return _record("scale_by", (x, s), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never sees a large positive argument
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bwd(g, accum):
        accum(x, g * y * (1.0 - y))

    return _record("sigmoid", (x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(g, accum):
        accum(x, g * (1.0 - y * y))

    return _record("tanh", (x,), out, bwd)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def bwd(g, accum):
        accum(x, g / x.data)

    return _record("log", (x,), out, bwd)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Probability vector over the unmasked entries of a 1-d input.

    ``mask`` is an optional boolean array, True = keep. Masked positions come
    out exactly 0. Stabilized by max subtraction over the support.
    """
    if x.data.ndim != 1:
        raise ShapeError(f"softmax: expected 1-d input, got shape {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise ShapeError(f"softmax: mask {mask.shape} does not match input {x.shape}")
        if not mask.any():
            raise EmptySupportError("softmax: every position is masked")
        shifted = np.where(mask, x.data - x.data[mask].max(), -np.inf)
        e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    else:
        if x.data.size == 0:
            raise EmptySupportError("softmax: empty input")
        e = np.exp(x.data - x.data.max())
    p = e / e.sum()
    out = Tensor(p)

    def bwd(g, accum):
        # dL/dx_i = p_i * (g_i - sum_j g_j p_j); zero off-support since p=0 there
        accum(x, p * (g - float(np.dot(g, p))))

    return _record("softmax", (x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.float64(x.data.sum()))

    def bwd(g, accum):
        accum(x, np.full_like(x.data, float(g)))

    return _record("sum_all", (x,), out, bwd)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no operands")
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis))
    sizes = [t.data.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, accum):
        for t, piece in zip(parts, np.split(g, splits, axis=axis)):
            accum(t, piece)

    return _record("concat", tuple(parts), out, bwd)


def take_row(X: Tensor, i: int) -> Tensor:
    """Row i of a matrix, as a (1, d) tensor."""
    _check_2d("take_row", X)
    out = Tensor(X.data[i : i + 1, :])

    def bwd(g, accum):
        z = np.zeros_like(X.data)
        z[i : i + 1, :] = g
        accum(X, z)

    return _record("take_row", (X,), out, bwd)


def slice_cols(X: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_cols", X)
    out = Tensor(X.data[:, start:stop])

    def bwd(g, accum):
        z = np.zeros_like(X.data)
        z[:, start:stop] = g
        accum(X, z)

    return _record("slice_cols", (X,), out, bwd)


def rows(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table: table[ids] -> (len(ids), dim)."""
    _check_2d("rows", table)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"rows: id out of range [0, {table.data.shape[0]}): {ids.min()}..{ids.max()}"
        )
    out = Tensor(table.data[ids, :])

    def bwd(g, accum):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        accum(table, z)

    return _record("rows", (table,), out, bwd)


def pick(x: Tensor, i: int) -> Tensor:
    """Scalar element i of a 1-d tensor."""
    if x.data.ndim != 1:
        raise ShapeError(f"pick: expected 1-d input, got shape {x.shape}")
    if not 0 <= i < x.data.shape[0]:
        raise IndexError(f"pick: index {i} out of range for length {x.data.shape[0]}")
    out = Tensor(np.float64(x.data[i]))

    def bwd(g, accum):
        z = np.zeros_like(x.data)
        z[i] = float(g)
        accum(x, z)

    return _record("pick", (x,), out, bwd)


def scatter_sum(values: Tensor, ids, size: int) -> Tensor:
    """Sum 1-d values into a zero vector of the given size at ids (duplicates add)."""
    if values.data.ndim != 1:
        raise ShapeError(f"scatter_sum: expected 1-d values, got shape {values.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.shape != values.data.shape:
        raise ShapeError(f"scatter_sum: ids {ids.shape} do not match values {values.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise IndexError(f"scatter_sum: id out of range [0, {size})")
    acc = np.zeros(size, dtype=np.float64)
    np.add.at(acc, ids, values.data)
    out = Tensor(acc)

    def bwd(g, accum):
        accum(values, g[ids])

    return _record("scatter_sum", (values,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g, accum):
        accum(x, g.reshape(x.data.shape))

    return _record("reshape", (x,), out, bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * keep)

    def bwd(g, accum):
        accum(x, g * keep)

    return _record("dropout", (x,), out, bwd)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def finite_difference_check(f, params: dict[str, Tensor], eps: float = 1e-5,
                            sample: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> scalar Tensor`` must be deterministic (verified by a double
    evaluation). When ``sample`` is given, only that many randomly chosen
    coordinates are probed instead of every coordinate.

    Error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 1e-8 < eps < 1e-3:
        raise ValueError(f"eps must lie in (1e-8, 1e-3), got {eps}")
    v1 = f(params).item()
    v2 = f(params).item()
    if v1 != v2:
        raise DeterminismError(f"f is not deterministic: {v1} != {v2}")

    for t in params.values():
        t.zero_grad()
    with Tape():
        out = f(params)
        analytic = backward(out)

    coords = [(name, idx) for name, t in params.items()
              for idx in range(t.data.size)]
    if sample is not None and sample < len(coords):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[int(k)] for k in chosen]

    max_err = 0.0
    for name, idx in coords:
        flat = params[name].data.reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + eps
        f_plus = f(params).item()
        flat[idx] = keep - eps
        f_minus = f(params).item()
        flat[idx] = keep
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic.get(name)
        analytic_val = float(a.reshape(-1)[idx]) if a is not None else 0.0
        err = abs(analytic_val - numeric) / max(abs(analytic_val), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err
