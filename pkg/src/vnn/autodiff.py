"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` wraps a row-major C-contiguous float64 ndarray and, when it was
produced by an operation on tensors that require gradients, remembers its
parents together with the local vector-Jacobian rules.  Calling
``backward(root)`` on a scalar root accumulates d(root)/d(node) into
``node.grad`` for every reachable node with ``requires_grad``.

Rules of the road:

* everything is float64; there is no dtype argument anywhere,
* shapes are validated eagerly and mismatches raise ``ShapeError``,
* binary operations accept equal shapes or a scalar on one side; any other
  promotion must go through an explicit ``expand``/``reshape``,
* a graph belongs to one thread from construction through ``backward``.

Randomness comes from ``Rng``, a thin wrapper over numpy's PCG64 generator.
Sub-streams are derived with ``Rng.child`` via ``SeedSequence`` spawn keys,
so every consumer of randomness in the package is a pure function of the
top-level seed.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ._kernels import active as _K

__all__ = [
    "ShapeError", "Tensor", "Rng", "tensor", "zeros", "ones", "backward",
    "zero_grads", "no_grad", "rand_normal", "rand_uniform", "matmul",
    "reduce", "add", "sub", "mul", "div", "neg", "reshape", "transpose",
    "concat", "expand", "exp", "log", "sqrt", "tanh", "sigmoid", "relu",
    "clamp", "elementwise", "square", "sum_axis", "mean_axis", "max_axis",
    "argmax_axis", "sum_all", "mean_all", "where", "norm_last", "cross_last",
    "channel_map", "vn_clip", "pair_transpose_map", "gather_rows",
    "gather_channel", "gather_channel_rows", "gather_slot", "segment_sum",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A float64 array plus an optional autodiff graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents if _grad_enabled() else ()
        if self._parents:
            self.requires_grad = self.requires_grad or any(
                p.requires_grad for p, _ in self._parents
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _node(data, parents):
    """Build a result tensor, dropping dead edges to grad-free parents."""
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Tensor(data, _parents=live)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar ``root`` into ``.grad`` fields.

    Repeated calls keep accumulating; use ``zero_grads`` between passes.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")

    # iterative DFS topological order; graphs can be deep
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            pg = vjp(g)
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# random streams

class Rng:
    """Seedable deterministic stream (numpy PCG64).

    ``child(*key)`` derives an independent sub-stream via a SeedSequence
    spawn key, so e.g. ``Rng(seed).child(2, epoch)`` is reproducible without
    coordinating draw order across subsystems.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def child(self, *key) -> "Rng":
        return Rng(self.seed, self.key + key)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def rand_normal(rng: Rng, shape, requires_grad=False) -> Tensor:
    """I.i.d. standard normal samples; deterministic given the stream."""
    return Tensor(rng.normal(shape), requires_grad=requires_grad)


def rand_uniform(rng: Rng, shape, requires_grad=False) -> Tensor:
    """I.i.d. uniform [0, 1) samples; deterministic given the stream."""
    return Tensor(rng.uniform(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# broadcasting policy helpers

def _is_scalar(x):
    return isinstance(x, (int, float)) or (isinstance(x, Tensor) and x.data.ndim == 0)


def _binary_operands(a, b, op):
    """Enforce 'equal shapes or scalar-with-tensor' and return tensors."""
    if not isinstance(a, Tensor):
        if not isinstance(a, (int, float)):
            raise TypeError(f"{op}: unsupported operand {type(a).__name__}")
        a = Tensor(a)
    if not isinstance(b, Tensor):
        if not isinstance(b, (int, float)):
            raise TypeError(f"{op}: unsupported operand {type(b).__name__}")
        b = Tensor(b)
    if a.shape != b.shape and not (a.data.ndim == 0 or b.data.ndim == 0):
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ; "
            "use expand()/reshape() for explicit promotion"
        )
    return a, b


def _reduce_to(g, shape):
    """Sum an upstream gradient back down to an operand's shape."""
    if g.shape == shape:
        return g
    # only the scalar-with-tensor case reaches here
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data
    return _node(out, (
        (a, lambda g: _reduce_to(g, a.shape)),
        (b, lambda g: _reduce_to(g, b.shape)),
    ))


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data
    return _node(out, (
        (a, lambda g: _reduce_to(g, a.shape)),
        (b, lambda g: _reduce_to(-g, b.shape)),
    ))


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data
    return _node(out, (
        (a, lambda g: _reduce_to(g * b.data, a.shape)),
        (b, lambda g: _reduce_to(g * a.data, b.shape)),
    ))


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data
    return _node(out, (
        (a, lambda g: _reduce_to(g / b.data, a.shape)),
        (b, lambda g: _reduce_to(-g * a.data / (b.data * b.data), b.shape)),
    ))


def neg(a):
    a = tensor(a)
    return _node(-a.data, ((a, lambda g: -g),))


def square(a):
    a = tensor(a)
    return _node(a.data * a.data, ((a, lambda g: 2.0 * a.data * g),))


# ---------------------------------------------------------------------------
# matrix products

def matmul(a, b):
    """Strict 2-D matrix product; differentiable in both operands."""
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _node(out, (
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


def channel_map(w, v):
    """Per-row linear map over vector channels: (Co,Ci) x (N,Ci,3) -> (N,Co,3).

    Hot kernel; routed through the active backend.
    """
    w, v = tensor(w), tensor(v)
    if w.data.ndim != 2 or v.data.ndim != 3 or v.shape[2] != 3:
        raise ShapeError(f"channel_map needs (Co,Ci) and (N,Ci,3), got {w.shape} and {v.shape}")
    if w.shape[1] != v.shape[1]:
        raise ShapeError(f"channel_map channel mismatch: {w.shape} vs {v.shape}")
    out = _K.channel_map_fwd(w.data, v.data)

    def both(g):
        return _K.channel_map_bwd(w.data, v.data, np.ascontiguousarray(g))

    cache = {}

    def gw(g):
        if id(g) not in cache:
            cache.clear()
            cache[id(g)] = both(g)
        return cache[id(g)][0]

    def gv(g):
        if id(g) not in cache:
            cache.clear()
            cache[id(g)] = both(g)
        return cache[id(g)][1]

    return _node(out, ((w, gw), (v, gv)))


def vn_clip(q, k, eps, alpha):
    """Half-space clip of q against direction k (see layers.vn_act).

    Hot kernel; routed through the active backend with a hand-written VJP.
    """
    q, k = tensor(q), tensor(k)
    if q.shape != k.shape or q.data.ndim != 3 or q.shape[2] != 3:
        raise ShapeError(f"vn_clip needs matching (N,C,3) operands, got {q.shape} and {k.shape}")
    out = _K.vn_clip_fwd(q.data, k.data, eps, alpha)

    cache = {}

    def both(g):
        if id(g) not in cache:
            cache.clear()
            cache[id(g)] = _K.vn_clip_bwd(q.data, k.data, eps, alpha, np.ascontiguousarray(g))
        return cache[id(g)]

    return _node(out, ((q, lambda g: both(g)[0]), (k, lambda g: both(g)[1])))


def pair_transpose_map(v, t):
    """Per-row product with a transposed frame: out[n] = v[n] @ t[n]^T.

    v: (N,C,3), t: (N,K,3) -> (N,C,K).  With equivariant v and t the result
    is rotation-invariant.
    """
    v, t = tensor(v), tensor(t)
    if v.data.ndim != 3 or t.data.ndim != 3 or v.shape[2] != 3 or t.shape[2] != 3:
        raise ShapeError(f"pair_transpose_map needs (N,C,3),(N,K,3), got {v.shape},{t.shape}")
    if v.shape[0] != t.shape[0]:
        raise ShapeError(f"pair_transpose_map row mismatch: {v.shape} vs {t.shape}")
    out = np.einsum("ncd,nkd->nck", v.data, t.data)
    return _node(out, (
        (v, lambda g: np.einsum("nck,nkd->ncd", g, t.data)),
        (t, lambda g: np.einsum("nck,ncd->nkd", g, v.data)),
    ))


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape):
    a = tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _node(out, ((a, lambda g: np.ascontiguousarray(g).reshape(old)),))


def transpose(a, axes):
    a = tensor(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), ((a, lambda g: np.transpose(g, inv)),))


def concat(parts, axis=0):
    parts = [tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    edges = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def take(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        edges.append((p, take))
    return _node(out, tuple(edges))


def expand(a, shape):
    """Explicit broadcast of size-1/missing axes up to ``shape``."""
    a = tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {tuple(shape)}") from err

    def back(g):
        extra = g.ndim - a.data.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(a.data.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    return _node(np.ascontiguousarray(out), ((a, back),))


# ---------------------------------------------------------------------------
# reductions

def sum_axis(a, axis):
    a = tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    out = a.data.sum(axis=axis)
    shape = a.shape

    def back(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _node(out, ((a, back),))


def mean_axis(a, axis):
    a = tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    n = a.shape[axis]
    out = a.data.mean(axis=axis)
    shape = a.shape

    def back(g):
        return np.broadcast_to(np.expand_dims(g / n, axis), shape)

    return _node(out, ((a, back),))


def max_axis(a, axis):
    """Max over an axis; gradient flows to the first (lowest-index) maximum."""
    a = tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    idx = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis)

    def back(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return z

    return _node(out, ((a, back),))


def argmax_axis(a, axis) -> np.ndarray:
    """Non-differentiable argmax; ties resolve to the lowest index."""
    a = tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return np.argmax(a.data, axis=axis)


def reduce(a, axis, kind):
    """Reduce one axis: kind in {sum, mean, max, argmax}.

    argmax returns integer indices stored as (exact) float64 values and is
    not differentiable.
    """
    if kind == "sum":
        return sum_axis(a, axis)
    if kind == "mean":
        return mean_axis(a, axis)
    if kind == "max":
        return max_axis(a, axis)
    if kind == "argmax":
        return Tensor(argmax_axis(a, axis).astype(np.float64))
    raise ValueError(f"unknown reduce kind {kind!r}")


def sum_all(a):
    a = tensor(a)
    shape = a.shape
    return _node(a.data.sum(), ((a, lambda g: np.broadcast_to(g, shape)),))


def mean_all(a):
    a = tensor(a)
    shape = a.shape
    n = a.data.size
    return _node(a.data.mean(), ((a, lambda g: np.broadcast_to(g / n, shape)),))


# ---------------------------------------------------------------------------
# elementwise

def exp(a):
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, ((a, lambda g: g * out),))


def log(a):
    a = tensor(a)
    return _node(np.log(a.data), ((a, lambda g: g / a.data),))


def sqrt(a):
    """Plain square root; the gradient is unguarded, keep inputs positive."""
    a = tensor(a)
    out = np.sqrt(a.data)
    return _node(out, ((a, lambda g: g * 0.5 / out),))


def tanh(a):
    a = tensor(a)
    out = np.tanh(a.data)
    return _node(out, ((a, lambda g: g * (1.0 - out * out)),))


def sigmoid(a):
    a = tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, ((a, lambda g: g * out * (1.0 - out)),))


def relu(a):
    a = tensor(a)
    mask = a.data > 0.0
    # np.maximum (not where) so NaN propagates to the loss guard
    return _node(np.maximum(a.data, 0.0), ((a, lambda g: g * mask),))


def clamp(a, lo, hi):
    a = tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), ((a, lambda g: g * mask),))


def elementwise(a, fn, deriv):
    """Apply a scalar function given with its derivative, elementwise."""
    a = tensor(a)
    out = fn(a.data)
    return _node(np.asarray(out, dtype=np.float64),
                 ((a, lambda g: g * deriv(a.data)),))


def where(mask, a, b):
    """Select from a where ``mask`` (a plain bool array) else from b."""
    a, b = tensor(a), tensor(b)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise ShapeError(f"where: shapes differ {mask.shape}/{a.shape}/{b.shape}")
    out = np.where(mask, a.data, b.data)
    return _node(out, (
        (a, lambda g: g * mask),
        (b, lambda g: g * ~mask),
    ))


def norm_last(a):
    """Euclidean norm over the trailing axis; zero rows get zero gradient."""
    a = tensor(a)
    out = np.sqrt(np.einsum("...d,...d->...", a.data, a.data))

    def back(g):
        return (g / np.maximum(out, 1e-30))[..., None] * a.data

    return _node(out, ((a, back),))


def cross_last(a, b):
    """Per-row 3-vector cross product a x b over the trailing axis."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError(f"cross_last needs matching (...,3), got {a.shape} and {b.shape}")
    out = np.cross(a.data, b.data)
    return _node(out, (
        (a, lambda g: np.cross(b.data, g)),
        (b, lambda g: np.cross(g, a.data)),
    ))


# ---------------------------------------------------------------------------
# gathers and scatters

def gather_rows(a, idx):
    """Select rows along axis 0: out = a[idx]; scatter-add on the way back."""
    a = tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]
    n = a.shape[0]

    def back(g):
        z = np.zeros((n,) + a.shape[1:])
        np.add.at(z, idx, g)
        return z

    return _node(out, ((a, back),))


def gather_channel(v, idx):
    """Pick one source row per channel: v (N,C,3), idx (C,) -> (C,3)."""
    v = tensor(v)
    idx = np.asarray(idx, dtype=np.int64)
    c = v.shape[1]
    if idx.shape != (c,):
        raise ShapeError(f"gather_channel: idx shape {idx.shape} != ({c},)")
    cols = np.arange(c)
    out = v.data[idx, cols, :]

    def back(g):
        z = np.zeros_like(v.data)
        np.add.at(z, (idx, cols), g)
        return z

    return _node(out, ((v, back),))


def gather_channel_rows(v, idx):
    """Pick one source row per (out-row, channel): v (M,C,3), idx (N,C) -> (N,C,3)."""
    v = tensor(v)
    idx = np.asarray(idx, dtype=np.int64)
    c = v.shape[1]
    if idx.ndim != 2 or idx.shape[1] != c:
        raise ShapeError(f"gather_channel_rows: idx shape {idx.shape} != (N,{c})")
    cols = np.arange(c)[None, :]
    out = v.data[idx, cols, :]

    def back(g):
        z = np.zeros_like(v.data)
        np.add.at(z, (idx, cols), g)
        return z

    return _node(out, ((v, back),))


def gather_slot(x, idx):
    """Pick one slot per (row, channel): x (N,K,C,3), idx (N,C) -> (N,C,3)."""
    x = tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n, _, c, _ = x.shape
    if idx.shape != (n, c):
        raise ShapeError(f"gather_slot: idx shape {idx.shape} != ({n},{c})")
    rows = np.arange(n)[:, None]
    cols = np.arange(c)[None, :]
    out = x.data[rows, idx, cols, :]

    def back(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (rows, idx, cols), g)
        return z

    return _node(out, ((x, back),))


def segment_sum(a, seg, num_segments):
    """Sum rows of a (E,...) into ``num_segments`` buckets given seg (E,)."""
    a = tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeError(f"segment_sum: seg shape {seg.shape} != ({a.shape[0]},)")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return _node(out, ((a, lambda g: g[seg]),))
