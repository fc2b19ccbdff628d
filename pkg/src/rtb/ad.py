"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records primitive operations as they execute. Each node
stores its forward value, the indices of its operands and a function
mapping the node's adjoint to the operands' adjoints. ``Tape.backward``
walks the nodes in reverse order from a scalar root.

Also provides a small MLP and an Adam optimizer; both work on plain
lists of numpy arrays so that parameter trees stay trivial.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("op", "parents", "value", "vjp")

    def __init__(self, value, parents, vjp, op):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Tape:
    """Append-only record of array operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents=(), vjp=None, op="leaf"):
        self.nodes.append(_Node(value, tuple(parents), vjp, op))
        return Var(self, len(self.nodes) - 1)

    def var(self, array):
        """Register a parameter array as a differentiable leaf.

        The same array object always maps to the same node, so a
        parameter used twice accumulates both contributions.
        """
        key = id(array)
        idx = self._leaf_ids.get(key)
        if idx is not None and self.nodes[idx].value is array:
            return Var(self, idx)
        v = self._push(array, op="param")
        self._leaf_ids[key] = v.index
        return v

    def const(self, array):
        return self._push(np.asarray(array, dtype=np.float64), op="const")

    def index_of(self, array):
        idx = self._leaf_ids.get(id(array))
        if idx is None or self.nodes[idx].value is not array:
            return None
        return idx

    def backward(self, root):
        """Return one adjoint array per node for the scalar ``root``."""
        if not isinstance(root, Var) or root.tape is not self:
            raise TypeError("root must be a Var recorded on this tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        adj: list = [None] * len(self.nodes)
        adj[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        for i, a in enumerate(adj):
            if a is None:
                adj[i] = np.zeros_like(self.nodes[i].value)
        return adj


class Var:
    """Handle to a node on a tape; supports the usual arithmetic."""

    __slots__ = ("index", "tape")
    __array_ufunc__ = None

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -self._lift(other))

    def __rsub__(self, other):
        return add(self._lift(other), -self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, self.tape.const(1.0 / np.asarray(other, dtype=np.float64)))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


# --- primitives -----------------------------------------------------------


def add(a, b):
    sa, sb = a.shape, b.shape
    return a.tape._push(
        a.value + b.value,
        (a.index, b.index),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b):
    av, bv = a.value, b.value
    return a.tape._push(
        av * bv,
        (a.index, b.index),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(a, c):
    return a.tape._push(a.value * c, (a.index,), lambda g: (g * c,), "scale")


def cast(a, dtype):
    """Change precision; the adjoint is cast back to the operand's dtype."""
    src = a.value.dtype
    return a.tape._push(a.value.astype(dtype), (a.index,), lambda g: (g.astype(src),), "cast")


def reciprocal(a):
    out = 1.0 / a.value
    return a.tape._push(out, (a.index,), lambda g: (-g * out * out,), "reciprocal")


def matmul(a, b):
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return a.tape._push(
        av @ bv, (a.index, b.index), lambda g: (g @ bv.T, av.T @ g), "matmul"
    )


def vsum(a, axis=None):
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push(np.sum(a.value, axis=axis), (a.index,), vjp, "sum")


def reshape(a, shape):
    old = a.shape
    return a.tape._push(
        a.value.reshape(shape), (a.index,), lambda g: (g.reshape(old),), "reshape"
    )


def getitem(a, idx):
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._push(a.value[idx], (a.index,), vjp, "getitem")


def concat(parts, axis=-1):
    tape = parts[0].tape
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return tape._push(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(p.index for p in parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def exp(a):
    out = np.exp(a.value)
    return a.tape._push(out, (a.index,), lambda g: (g * out,), "exp")


def log(a):
    av = a.value
    return a.tape._push(np.log(av), (a.index,), lambda g: (g / av,), "log")


def square(a):
    av = a.value
    return a.tape._push(av * av, (a.index,), lambda g: (2.0 * g * av,), "square")


def tanh(a):
    out = np.tanh(a.value)
    return a.tape._push(out, (a.index,), lambda g: (g * (1.0 - out * out),), "tanh")


def _gelu_parts(x):
    # in-place arithmetic: these arrays are large and the op is memory bound
    th = x * x
    th *= 0.044715 * _SQRT_2_OVER_PI
    th += _SQRT_2_OVER_PI
    th *= x
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5
    return th, out


def gelu(a):
    """GELU, tanh approximation."""
    x = a.value
    th, out = _gelu_parts(x)

    def vjp(g):
        d = x * x
        d *= 3 * 0.044715 * _SQRT_2_OVER_PI
        d += _SQRT_2_OVER_PI
        d *= x
        d *= 1.0 - th * th
        d += 1.0 + th
        d *= 0.5
        d *= g
        return (d,)

    return a.tape._push(out, (a.index,), vjp, "gelu")


def logsumexp(a, axis=-1):
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    tot = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    soft = shifted / tot
    return a.tape._push(
        out, (a.index,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp"
    )


def value(x):
    """Forward value of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else x


# --- MLP ------------------------------------------------------------------

_ACTIVATIONS = {
    "gelu": (gelu, lambda x: _gelu_parts(x)[1]),
    "tanh": (tanh, np.tanh),
    "linear": (lambda a: a, lambda x: x),
}


_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class MlpParams:
    weights: list
    biases: list
    activation: str = "gelu"
    # parameters are always stored in float64; this is the arithmetic precision
    compute_dtype: str = "float64"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: bias {b.shape} vs weight {w.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: in-dim {w.shape[0]} does not chain")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.compute_dtype not in _DTYPES:
            raise ValueError(f"unknown compute dtype {self.compute_dtype!r}")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.compute_dtype,
        )


def init_mlp(sizes, rng, activation="gelu", zero_last=False, compute_dtype="float64"):
    """He-style normal initialization; optionally zero the output layer."""
    weights, biases = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * math.sqrt(1.0 / n_in)
        weights.append(w)
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases, activation, compute_dtype)


def _check_input(params, x):
    x = np.asarray(x) if not isinstance(x, Var) else x
    n_in = params.weights[0].shape[0]
    if x.shape[-1] != n_in:
        raise ValueError(f"input dim {x.shape[-1]} != first layer in-dim {n_in}")
    return x


def mlp_forward(params: MlpParams, x, tape: Tape):
    """Taped forward pass; ``x`` is (n, in) or (in,), array or Var."""
    x = _check_input(params, x)
    single = x.ndim == 1 if not isinstance(x, Var) else len(x.shape) == 1
    h = x if isinstance(x, Var) else tape.const(np.atleast_2d(x))
    if single and isinstance(x, Var):
        h = reshape(h, (1, x.shape[0]))
    act = _ACTIVATIONS[params.activation][0]
    n = len(params.weights)
    low = params.compute_dtype != "float64"
    if low:
        dt = _DTYPES[params.compute_dtype]
        h = cast(h, dt)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        wv, bv = tape.var(w), tape.var(b)
        if low:
            wv, bv = cast(wv, dt), cast(bv, dt)
        h = matmul(h, wv) + bv
        if k < n - 1:
            h = act(h)
    if low:
        h = cast(h, np.float64)
    return reshape(h, (h.shape[1],)) if single else h


def mlp_apply(params: MlpParams, x):
    """Tapeless forward pass used for sampling."""
    x = _check_input(params, x)
    act = _ACTIVATIONS[params.activation][1]
    dt = _DTYPES[params.compute_dtype]
    h = x.astype(dt, copy=False)
    n = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.astype(dt, copy=False) + b.astype(dt, copy=False)
        if k < n - 1:
            h = act(h)
    return h.astype(np.float64, copy=False)


def backward(tape: Tape, root: Var, params):
    """Gradients of ``root`` w.r.t. each array in ``params`` (zeros if unused)."""
    adj = tape.backward(root)
    grads = []
    for p in params:
        idx = tape.index_of(p)
        grads.append(np.zeros_like(p) if idx is None else adj[idx])
    return grads


# --- Adam -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    skipped: int = 0


def adam_init(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        lr, beta1, beta2, eps, [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params, grads):
    """In-place Adam update. Returns False (and skips) on non-finite grads."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient at Adam step %d; update skipped", state.step)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True
