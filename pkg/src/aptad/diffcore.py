"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Graph` is an append-only tape. Every primitive call appends a node
holding its output value, so the graph can be differentiated with
:func:`backward` or replayed on new leaf values (optionally in float64) with
:func:`evaluate`. Graphs are meant to be rebuilt for every training step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32
MASK_NEG = -1e9


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """Raised when a primitive produces NaN or infinity."""


# ---------------------------------------------------------------------------
# primitive rules: forward(attrs, *xs) -> y and vjp(attrs, xs, y, g) -> grads
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _matmul_fwd(attrs, a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}") from None
    return a @ b


def _matmul_vjp(attrs, xs, y, g):
    a, b = xs
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _add_fwd(attrs, a, b):
    _check_broadcast("add", a, b)
    return a + b


def _sub_fwd(attrs, a, b):
    _check_broadcast("subtract", a, b)
    return a - b


def _mul_fwd(attrs, a, b):
    _check_broadcast("multiply", a, b)
    return a * b


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_fwd(attrs, x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(attrs, xs, y, g):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _layer_norm_fwd(attrs, x, gamma, beta):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + attrs["eps"])
    return xhat * gamma + beta


def _layer_norm_vjp(attrs, xs, y, g):
    x, gamma, beta = xs
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = (x - mu) * inv
    gx_hat = g * gamma
    gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def _l2n_fwd(attrs, x):
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(n, attrs["eps"])


def _l2n_vjp(attrs, xs, y, g):
    (x,) = xs
    n = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), attrs["eps"])
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)


def _transpose_fwd(attrs, x):
    axes = attrs["axes"]
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    if len(axes) != x.ndim:
        raise ShapeError(f"transpose: axes {axes} for shape {x.shape}")
    attrs["_axes"] = axes
    return np.transpose(x, axes)


def _transpose_vjp(attrs, xs, y, g):
    return (np.transpose(g, np.argsort(attrs["_axes"])),)


def _reshape_fwd(attrs, x):
    try:
        return x.reshape(attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {attrs['shape']}") from None


def _masked_add_fwd(attrs, x):
    m = attrs["mask"]
    _check_broadcast("masked_add", x, m)
    return x + m.astype(x.dtype)


def _reduce_fwd(fn):
    def fwd(attrs, x):
        y = fn(x, axis=attrs["axis"], keepdims=attrs["keepdims"])
        # full reductions yield shape (1,), never 0-d
        return np.reshape(y, (1,)) if np.ndim(y) == 0 else y
    return fwd


def _reduce_vjp(mean):
    def vjp(attrs, xs, y, g):
        (x,) = xs
        axis, keep = attrs["axis"], attrs["keepdims"]
        if axis is None:
            count = x.size
            g = np.reshape(g, (1,) * x.ndim)
        else:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            ax = tuple(a % x.ndim for a in ax)
            count = int(np.prod([x.shape[a] for a in ax]))
            if not keep:
                g = np.expand_dims(g, ax)
        g = np.broadcast_to(g, x.shape)
        return ((g / count) if mean else g.copy(),)
    return vjp


def _concat_fwd(attrs, *xs):
    try:
        return np.concatenate(xs, axis=attrs["axis"])
    except ValueError:
        raise ShapeError(
            f"concatenate: shapes {[x.shape for x in xs]} on axis {attrs['axis']}") from None


def _concat_vjp(attrs, xs, y, g):
    ax = attrs["axis"]
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def _clip_fwd(attrs, x):
    return np.clip(x, attrs["lo"], attrs["hi"])


def _clip_vjp(attrs, xs, y, g):
    (x,) = xs
    return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


PRIMITIVES = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_add_fwd, lambda at, xs, y, g: (_unbroadcast(g, xs[0].shape),
                                            _unbroadcast(g, xs[1].shape))),
    "subtract": (_sub_fwd, lambda at, xs, y, g: (_unbroadcast(g, xs[0].shape),
                                                 _unbroadcast(-g, xs[1].shape))),
    "multiply": (_mul_fwd, lambda at, xs, y, g: (_unbroadcast(g * xs[1], xs[0].shape),
                                                 _unbroadcast(g * xs[0], xs[1].shape))),
    "scale": (lambda at, x: x * x.dtype.type(at["c"]),
              lambda at, xs, y, g: (g * g.dtype.type(at["c"]),)),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "sigmoid": (lambda at, x: _sigmoid(x), lambda at, xs, y, g: (g * y * (1 - y),)),
    "log": (lambda at, x: np.log(x), lambda at, xs, y, g: (g / xs[0],)),
    "exp": (lambda at, x: np.exp(x), lambda at, xs, y, g: (g * y,)),
    "layer_norm": (_layer_norm_fwd, _layer_norm_vjp),
    "l2_normalize": (_l2n_fwd, _l2n_vjp),
    "transpose": (_transpose_fwd, _transpose_vjp),
    "reshape": (_reshape_fwd, lambda at, xs, y, g: (g.reshape(xs[0].shape),)),
    "masked_add": (_masked_add_fwd, lambda at, xs, y, g: (_unbroadcast(g, xs[0].shape),)),
    "mean": (_reduce_fwd(np.mean), _reduce_vjp(True)),
    "sum": (_reduce_fwd(np.sum), _reduce_vjp(False)),
    "concatenate": (_concat_fwd, _concat_vjp),
    "clip": (_clip_fwd, _clip_vjp),
}


# ---------------------------------------------------------------------------
# graph and tensors
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    name: str | None = None
    requires_grad: bool = False


class Tensor:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "node_id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.node_id].value

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.node_id].requires_grad

    @property
    def grad(self):
        return self.graph.grads.get(self.node_id)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        n = self.graph.nodes[self.node_id]
        return f"Tensor(node={self.node_id}, op={n.op}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(np.asarray(other))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return subtract(self, self._lift(other))

    def __rsub__(self, other):
        return subtract(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Graph:
    """Append-only tape of primitive applications."""

    dtype: type = DTYPE
    check_finite: bool = True
    nodes: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    _names: dict = field(default_factory=dict)

    def leaf(self, value, name: str | None = None, requires_grad: bool = False) -> Tensor:
        if name is not None and name in self._names:
            raise ValueError(f"duplicate leaf name {name!r}")
        arr = np.array(value, dtype=self.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), {}, arr, name, requires_grad))
        if name is not None:
            self._names[name] = nid
        return Tensor(self, nid)

    def param(self, value, name: str) -> Tensor:
        return self.leaf(value, name=name, requires_grad=True)

    def constant(self, value) -> Tensor:
        return self.leaf(value)

    def apply(self, op: str, inputs, **attrs) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{op}: input tensor belongs to another graph")
        fwd, _ = PRIMITIVES[op]
        xs = [self.nodes[t.node_id].value for t in inputs]
        with np.errstate(all="ignore"):  # non-finite values are reported below
            y = np.asarray(fwd(attrs, *xs), dtype=self.dtype)
        nid = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite output at node {nid} ({op})")
        rg = any(self.nodes[t.node_id].requires_grad for t in inputs)
        self.nodes.append(Node(op, tuple(t.node_id for t in inputs), attrs, y, None, rg))
        return Tensor(self, nid)

    def mark_output(self, name: str, tensor: Tensor) -> Tensor:
        self.outputs[name] = tensor.node_id
        return tensor

    def leaf_names(self, trainable_only: bool = False) -> list:
        return [n for n, i in self._names.items()
                if not trainable_only or self.nodes[i].requires_grad]

    def tensor(self, name: str) -> Tensor:
        return Tensor(self, self._names[name])


# primitive front-ends ------------------------------------------------------


def matmul(a, b):
    return a.graph.apply("matmul", (a, b))


def add(a, b):
    return a.graph.apply("add", (a, b))


def subtract(a, b):
    return a.graph.apply("subtract", (a, b))


def multiply(a, b):
    return a.graph.apply("multiply", (a, b))


def scale(x, c: float):
    return x.graph.apply("scale", (x,), c=float(c))


def softmax(x):
    """Softmax over the last axis."""
    return x.graph.apply("softmax", (x,))


def sigmoid(x):
    return x.graph.apply("sigmoid", (x,))


def log(x):
    return x.graph.apply("log", (x,))


def exp(x):
    return x.graph.apply("exp", (x,))


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return x.graph.apply("layer_norm", (x, gamma, beta), eps=eps)


def l2_normalize(x, eps: float = 1e-12):
    """Scale every row (last axis) to unit Euclidean norm."""
    return x.graph.apply("l2_normalize", (x,), eps=eps)


def transpose(x, axes=None):
    """Permute axes; by default swap the last two."""
    return x.graph.apply("transpose", (x,), axes=None if axes is None else tuple(axes))


def reshape(x, shape):
    return x.graph.apply("reshape", (x,), shape=tuple(shape))


def masked_add(x, mask: np.ndarray):
    """Add a constant (typically 0 / MASK_NEG) mask; no gradient flows to it."""
    return x.graph.apply("masked_add", (x,), mask=np.asarray(mask))


def mean(x, axis=None, keepdims: bool = False):
    return x.graph.apply("mean", (x,), axis=axis, keepdims=keepdims)


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    return x.graph.apply("sum", (x,), axis=axis, keepdims=keepdims)


def concatenate(xs, axis: int = 0):
    xs = list(xs)
    return xs[0].graph.apply("concatenate", xs, axis=axis)


def clip(x, lo: float, hi: float):
    return x.graph.apply("clip", (x,), lo=lo, hi=hi)


def quick_gelu(x):
    """x * sigmoid(1.702 x), composed from primitives."""
    return x * sigmoid(scale(x, 1.702))


# ---------------------------------------------------------------------------
# differentiation and replay
# ---------------------------------------------------------------------------


def backward(graph: Graph, output: Tensor) -> dict:
    """Gradients of a single-element ``output`` for every trainable leaf.

    Returns ``{leaf_name: gradient}``; trainable leaves that ``output`` does
    not depend on get zeros. Unnamed trainable leaves are reachable through
    ``tensor.grad`` only.
    """
    out_node = graph.nodes[output.node_id]
    if out_node.value.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {out_node.value.shape}")
    grads = {output.node_id: np.ones_like(out_node.value)}
    for nid in range(output.node_id, -1, -1):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or node.op == "leaf" or not node.requires_grad:
            continue
        _, vjp = PRIMITIVES[node.op]
        xs = [graph.nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, vjp(node.attrs, xs, node.value, g)):
            if gi is None or not graph.nodes[i].requires_grad:
                continue
            gi = np.asarray(gi, dtype=graph.dtype)
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    graph.grads = {}
    result = {}
    for nid, node in enumerate(graph.nodes):
        if node.op == "leaf" and node.requires_grad:
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(node.value)
            graph.grads[nid] = g
            if node.name is not None:
                result[node.name] = g
    return result


def evaluate(graph: Graph, inputs: dict | None = None, dtype=None) -> dict:
    """Replay the tape with some leaves replaced; returns the marked outputs.

    ``dtype`` selects the replay precision (float64 for finite differences).
    Leaves not named in ``inputs`` keep their recorded values.
    """
    dtype = graph.dtype if dtype is None else dtype
    inputs = inputs or {}
    unknown = set(inputs) - set(graph._names)
    if unknown:
        raise KeyError(f"evaluate: unknown inputs {sorted(unknown)}")
    vals = []
    for nid, node in enumerate(graph.nodes):
        if node.op == "leaf":
            v = inputs.get(node.name, node.value) if node.name else node.value
            v = np.asarray(v, dtype=dtype)
            if v.shape != node.value.shape:
                raise ShapeError(f"evaluate: leaf {node.name!r} expects {node.value.shape}, got {v.shape}")
        else:
            fwd, _ = PRIMITIVES[node.op]
            with np.errstate(all="ignore"):
                v = np.asarray(fwd(dict(node.attrs), *[vals[i] for i in node.inputs]), dtype=dtype)
            if graph.check_finite and not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite output at node {nid} ({node.op}) during replay")
        vals.append(v)
    return {name: vals[nid] for name, nid in graph.outputs.items()}


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def finite_diff_check(graph: Graph, output: str, tolerance: float, wrt=None,
                      h: float = 1e-3, grads: dict | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with float64 central differences.

    ``output`` names a marked scalar output. ``wrt`` defaults to every
    trainable named leaf. ``grads`` may supply the gradients under test;
    by default they come from :func:`backward` on the recorded graph.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    names = graph.leaf_names(trainable_only=True) if wrt is None else list(wrt)
    if grads is None:
        grads = backward(graph, Tensor(graph, graph.outputs[output]))
    base = {n: graph.nodes[graph._names[n]].value.astype(np.float64) for n in names}
    errors = {}
    for n in names:
        x = base[n]
        fd = np.zeros_like(x)
        flat, fdf = x.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(evaluate(graph, {n: x}, np.float64)[output].sum())
            flat[i] = orig - h
            fm = float(evaluate(graph, {n: x}, np.float64)[output].sum())
            flat[i] = orig
            fdf[i] = (fp - fm) / (2 * h)
        ga = np.asarray(grads[n], dtype=np.float64)
        errors[n] = float(np.linalg.norm(ga - fd) / max(np.linalg.norm(fd), 1e-12))
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# optimizer and flat-gradient utilities
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    horizon: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def lr_at(self, n: int) -> float:
        """Cosine-annealed learning rate for 0-based step ``n``."""
        if self.horizon <= 0:
            return self.lr
        n = min(n, self.horizon)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * n / self.horizon))


def adam_step(params: dict, grads: dict, state: AdamState,
              lr: float | None = None) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays.

    The learning rate is ``lr`` if given, else ``state.lr_at(state.step_count)``.
    Inputs are not modified in place.
    """
    if lr is None:
        lr = state.lr_at(state.step_count)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        out[name] = (p - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    state.step_count = t
    return out, state


def cosine_flat(a, b) -> float:
    """Cosine similarity of two arrays after flattening; 0 if either is ~0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"cosine_flat: element counts differ ({a.size} vs {b.size})")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
