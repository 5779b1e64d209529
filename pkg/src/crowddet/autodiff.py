"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every :class:`Tensor` produced by an operation remembers its inputs and a
vector-Jacobian product for each. :func:`grad` walks that graph backwards from
a scalar. Inside :func:`no_grad` no graph is built, which keeps finite
difference sweeps cheap.
"""
from __future__ import annotations

import contextlib

import numpy as np

_RECORD = [True]


@contextlib.contextmanager
def no_grad():
    old = _RECORD[0]
    _RECORD[0] = False
    try:
        yield
    finally:
        _RECORD[0] = old


class Tensor:
    __slots__ = ("value", "parents", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Tensor, vjp)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    def numpy(self):
        return self.value

    # operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def param(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, *pairs) -> Tensor:
    """Result tensor; ``pairs`` are (input, vjp) for inputs that may need gradients."""
    if not _RECORD[0]:
        return Tensor(value)
    live = tuple((t, f) for t, f in pairs if isinstance(t, Tensor) and (t.requires_grad or t.parents))
    return Tensor(value, live, requires_grad=False)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# elementwise arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    return _make(av + bv, (a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _make(av - bv, (a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _make(av * bv, (a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _make(
        out,
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return _make(-_val(a), (a, lambda g: -g))


def power(a, p: float):
    av = _val(a)
    return _make(av**p, (a, lambda g: g * p * av ** (p - 1)))


def exp(a):
    out = np.exp(_val(a))
    return _make(out, (a, lambda g: g * out))


def log(a):
    av = _val(a)
    return _make(np.log(av), (a, lambda g: g / av))


def sqrt(a):
    out = np.sqrt(_val(a))
    return _make(out, (a, lambda g: g * 0.5 / out))


def tanh(a):
    out = np.tanh(_val(a))
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a):
    av = _val(a)
    out = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))), np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def log_sigmoid(a):
    av = _val(a)
    out = -np.logaddexp(0.0, -av)
    return _make(out, (a, lambda g: g * (1.0 - np.exp(out))))


def relu(a):
    av = _val(a)
    mask = av > 0
    return _make(np.where(mask, av, 0.0), (a, lambda g: g * mask))


def abs_(a):
    av = _val(a)
    return _make(np.abs(av), (a, lambda g: g * np.sign(av)))


def maximum(a, b):
    av, bv = _val(a), _val(b)
    pick_a = av >= bv
    return _make(
        np.where(pick_a, av, bv),
        (a, lambda g: _unbroadcast(g * pick_a, av.shape)),
        (b, lambda g: _unbroadcast(g * ~pick_a, bv.shape)),
    )


def minimum(a, b):
    av, bv = _val(a), _val(b)
    pick_a = av <= bv
    return _make(
        np.where(pick_a, av, bv),
        (a, lambda g: _unbroadcast(g * pick_a, av.shape)),
        (b, lambda g: _unbroadcast(g * ~pick_a, bv.shape)),
    )


def clip(a, lo, hi):
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a, lambda g: g * inside))


def detach(a) -> Tensor:
    return Tensor(_val(a))


# reductions and shape

def sum_(a, axis=None, keepdims=False):
    av = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _make(av.sum(axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[x] for x in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) / float(n)


def reshape(a, shape):
    av = _val(a)
    return _make(av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def transpose(a, axes=None):
    av = _val(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(av, axes), (a, lambda g: np.transpose(g, inv)))


def index(a, key):
    av = _val(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return out

    return _make(av[key], (a, vjp))


def take_rows(a, idx):
    """``a[idx]`` for an integer array ``idx`` of any shape (gather along axis 0)."""
    idx = np.asarray(idx)
    av = _val(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _make(av[idx], (a, vjp))


def concat(parts, axis=0):
    vals = [_val(p) for p in parts]
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(i):
        return lambda g: np.split(g, edges, axis=axis)[i]

    return _make(np.concatenate(vals, axis=axis), *[(p, piece(i)) for i, p in enumerate(parts)])


def stack(parts, axis=0):
    vals = [_val(p) for p in parts]

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(np.stack(vals, axis=axis), *[(p, piece(i)) for i, p in enumerate(parts)])


# linear algebra

def matmul(a, b):
    av, bv = _val(a), _val(b)

    def ga(g):
        if bv.ndim == 1:
            return _unbroadcast(np.multiply.outer(g, bv), av.shape)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def gb(g):
        if av.ndim == 1:
            return _unbroadcast(np.multiply.outer(av, g), bv.shape)
        if bv.ndim == 1:
            return _unbroadcast((np.swapaxes(av, -1, -2) @ g[..., None])[..., 0], bv.shape)
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _make(av @ bv, (a, ga), (b, gb))


def einsum(spec: str, *ops):
    """Differentiable ``np.einsum`` for explicit specs without repeated
    subscripts inside one operand. Every input subscript must also appear in
    the output or in another operand."""
    ins, out = spec.replace(" ", "").split("->")
    ins = ins.split(",")
    vals = [_val(o) for o in ops]

    def grad_for(i):
        others = [s for j, s in enumerate(ins) if j != i]
        sub = ",".join([out] + others) + "->" + ins[i]
        rest = [v for j, v in enumerate(vals) if j != i]
        return lambda g: np.einsum(sub, g, *rest)

    return _make(np.einsum(spec, *vals), *[(o, grad_for(i)) for i, o in enumerate(ops)])


def softmax(a, axis=-1):
    av = _val(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _make(out, (a, vjp))


def layer_norm(x, gain, bias, eps: float = 1e-15):
    mu = mean(x, axis=-1, keepdims=True)
    c = x - mu
    var = mean(c * c, axis=-1, keepdims=True)
    return c / sqrt(var + eps) * gain + bias


def bilinear_sample(grid: np.ndarray, points) -> Tensor:
    """Sample an ``(H, W, C)`` array at fractional ``(x, y)`` positions.

    Positions are in grid units (``x`` along columns); integer positions return
    stored vectors and taps outside the grid contribute zeros. Differentiable
    with respect to ``points`` only.
    """
    pts = _val(points)
    H, W, C = grid.shape
    x = pts[..., 0]
    y = pts[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def tap(yy, xx):
        ok = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        vals = grid[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        return vals * ok[..., None]

    v00 = tap(y0, x0)
    v01 = tap(y0, x0 + 1)
    v10 = tap(y0 + 1, x0)
    v11 = tap(y0 + 1, x0 + 1)
    wx = fx[..., None]
    wy = fy[..., None]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    out = top * (1 - wy) + bot * wy

    def vjp(g):
        dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * g
        dy = (bot - top) * g
        return np.stack([dx.sum(-1), dy.sum(-1)], axis=-1)

    return _make(out, (points, vjp))


# backward pass

def grad(loss: Tensor, wrt=None) -> dict:
    """Gradients of scalar ``loss`` for every leaf with ``requires_grad``.

    Returns ``{id(leaf): (leaf, gradient)}`` unless ``wrt`` is given, in which
    case a list of gradients in that order is returned.
    """
    if loss.value.size != 1:
        raise ValueError("gradient needs a scalar output")
    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.requires_grad:
            leaves[id(node)] = (node, g if g is not None else np.zeros_like(node.value))
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.array(pg, dtype=np.float64)
    if wrt is None:
        return leaves
    return [leaves[id(t)][1] if id(t) in leaves else np.zeros_like(t.value) for t in wrt]
