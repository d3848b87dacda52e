"""Reverse-mode automatic differentiation over numpy arrays.

Every vector-Jacobian product is written in terms of :class:`Tensor`
operations, so the gradient graph is itself differentiable. This is what
makes Eikonal and normal-alignment losses trainable: ``grad(..., create_graph=True)``
returns tensors that stay connected to the network parameters.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class NumericError(ArithmeticError):
    """Raised when a differentiable computation produces non-finite values."""


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _set_grad_enabled(flag: bool) -> bool:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    return prev


class Tensor:
    """A node in the computation graph.

    ``value`` is a float64 ndarray. Leaves created with ``requires_grad=True``
    are parameters or differentiation inputs; interior nodes carry a
    ``vjp`` closure mapping the output adjoint to parent adjoints.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op", "grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.op = op
    return out


def _unbroadcast_shape(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return sum_to(g, shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast_shape(g, a.shape) if needs[0] else None,
                _unbroadcast_shape(g, b.shape) if needs[1] else None)

    return _make(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast_shape(g, a.shape) if needs[0] else None,
                _unbroadcast_shape(neg(g), b.shape) if needs[1] else None)

    return _make(a.value - b.value, (a, b), vjp, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast_shape(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast_shape(mul(g, a), b.shape) if needs[1] else None)

    return _make(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        ga = _unbroadcast_shape(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast_shape(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.value / b.value, (a, b), vjp, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 2:
        return mul(a, a)

    def vjp(g, needs):
        return (mul(g, mul(p, power(a, p - 1))),)

    return _make(a.value ** p, (a,), vjp, "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


class _Sinusoids:
    """Shared ``sin(w z)`` / ``cos(w z)`` values for ``amp * sin(w z + q pi/2)``.

    Derivatives of a sinusoid are phase-shifted sinusoids, so every order of
    differentiation reuses the same two arrays instead of re-evaluating
    transcendental functions on large activations.
    """

    __slots__ = ("z", "w", "_sin", "_cos", "members")

    def __init__(self, z: Tensor, w: float):
        self.z = z
        self.w = w
        self._sin = None
        self._cos = None
        # weak, so the family does not keep graph nodes alive
        self.members = weakref.WeakValueDictionary()

    def base(self, q: int) -> np.ndarray:
        if q % 2 == 0:
            if self._sin is None:
                self._sin = np.sin(self.z.value * self.w) if self.w != 1.0 else np.sin(self.z.value)
            return self._sin
        if self._cos is None:
            self._cos = np.cos(self.z.value * self.w) if self.w != 1.0 else np.cos(self.z.value)
        return self._cos

    def member(self, q: int, amp: float) -> Tensor:
        q %= 4
        key = (q, amp)
        if _GRAD_ENABLED:
            hit = self.members.get(key)
            if hit is not None:
                return hit
        sign = -1.0 if q >= 2 else 1.0
        val = self.base(q) * (sign * amp) if sign * amp != 1.0 else self.base(q)
        fam = self

        def vjp(g, needs):
            return (mul(g, fam.member(q + 1, amp * fam.w)),)

        out = _make(val, (self.z,), vjp, "sin" if q % 2 == 0 else "cos")
        if out.requires_grad:
            self.members[key] = out
        return out


def sinusoid(z, w: float = 1.0, q: int = 0) -> Tensor:
    """``sin(w z + q pi/2)``."""
    return _Sinusoids(as_tensor(z), float(w)).member(q, 1.0)


def sin(a) -> Tensor:
    return sinusoid(a, 1.0, 0)


def cos(a) -> Tensor:
    return sinusoid(a, 1.0, 1)


# exp/sqrt recompute their output inside the vjp instead of capturing it,
# which would form a reference cycle holding large arrays.
def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.exp(a.value), (a,), lambda g, needs: (mul(g, exp(a)),), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g, needs: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sqrt(a.value), (a,), lambda g, needs: (div(mul(g, 0.5), sqrt(a)),), "sqrt")


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    sign = Tensor(np.sign(a.value))
    return _make(np.abs(a.value), (a,), lambda g, needs: (mul(g, sign),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.value > 0).astype(np.float64))
    return _make(a.value * mask.value, (a,), lambda g, needs: (mul(g, mask),), "relu")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    m = Tensor(np.asarray(cond, dtype=np.float64))
    return add(mul(a, m), mul(b, 1.0 - m))


# -- linear algebra -------------------------------------------------------

def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, ax1, ax2), (a,),
                 lambda g, needs: (swapaxes(g, ax1, ax2),), "swapaxes")


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        ga = _unbroadcast_shape(matmul(g, swapaxes(b, -1, -2)), a.shape) if needs[0] else None
        gb = _unbroadcast_shape(matmul(swapaxes(a, -1, -2), g), b.shape) if needs[1] else None
        return ga, gb

    return _make(np.matmul(a.value, b.value), (a, b), vjp, "matmul")


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def vjp(g, needs):
        if not keepdims:
            g = reshape(g, kept_shape)
        return (broadcast_to(g, in_shape),)

    return _make(np.sum(a.value, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.value, shape), (a,),
                 lambda g, needs: (sum_to(g, src),), "broadcast")


def sum_to(a, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1)
    val = np.sum(a.value, axis=axes, keepdims=True)
    if lead:
        val = val.reshape(val.shape[lead:])
    src = a.shape
    return _make(val.reshape(shape), (a,), lambda g, needs: (broadcast_to(g, src),), "sum_to")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,),
                 lambda g, needs: (transpose(g, inv),), "transpose")


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = list(a.shape)
    axis = axis % (a.ndim + 1)
    shape.insert(axis, 1)
    return reshape(a, tuple(shape))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.value[idx], (a,), lambda g, needs: (scatter(g, idx, src),), "getitem")


def scatter(g, idx, shape) -> Tensor:
    """Place ``g`` at ``idx`` inside zeros of ``shape`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    if _is_fancy(idx):
        np.add.at(out, idx, g.value)
    else:
        out[idx] = g.value
    return _make(out, (g,), lambda gg, needs: (getitem(gg, idx),), "scatter")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _make(np.concatenate([t.value for t in ts], axis=axis), ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [expand_dims(as_tensor(t), axis) for t in tensors]
    return concat(ts, axis=axis)


# -- composite helpers ----------------------------------------------------

def softmax(v, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is a constant (exact gradient)."""
    v = as_tensor(v)
    shift = Tensor(np.max(v.value, axis=axis, keepdims=True))
    e = exp(sub(v, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    return sqrt(add(tsum(mul(a, a), axis=axis, keepdims=keepdims), eps))


def dot(a, b, axis: int = -1, keepdims: bool = False) -> Tensor:
    return tsum(mul(a, b), axis=axis, keepdims=keepdims)


def cross(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


# -- differentiation ------------------------------------------------------

def _toposort(outputs: Sequence[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = visiting, 2 = done
    for root in outputs:
        if not root.requires_grad or id(root) in state:
            continue
        stack_ = [(root, False)]
        while stack_:
            node, processed = stack_.pop()
            key = id(node)
            if processed:
                state[key] = 2
                order.append(node)
                continue
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise GraphError("cycle detected in computation graph")
            state[key] = 1
            stack_.append((node, True))
            for p in node.parents:
                if p.requires_grad:
                    ps = state.get(id(p))
                    if ps == 1:
                        raise GraphError("cycle detected in computation graph")
                    if ps is None:
                        stack_.append((p, False))
    return order


def grad(outputs, inputs: Sequence[Tensor], grad_outputs=None,
         create_graph: bool = False, allow_unused: bool = True) -> list[Tensor | None]:
    """Adjoints of ``outputs`` with respect to ``inputs``.

    With ``create_graph=True`` the returned tensors are graph nodes and can be
    differentiated again. Only nodes lying between ``inputs`` and ``outputs``
    are visited, so intermediate tensors are valid inputs.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    outputs = list(outputs)
    if grad_outputs is None:
        grad_outputs = [Tensor(np.ones_like(o.value)) for o in outputs]
    elif isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs]
    grad_outputs = [as_tensor(g) for g in grad_outputs]

    order = _toposort(outputs)
    input_ids = {id(t) for t in inputs}
    # Nodes that depend on some input; only these need adjoints.
    live: set[int] = set()
    for node in order:
        if id(node) in input_ids or any(id(p) in live for p in node.parents):
            live.add(id(node))

    prev = _set_grad_enabled(create_graph)
    try:
        adj: dict[int, Tensor] = {}
        for o, g in zip(outputs, grad_outputs):
            if id(o) in live:
                adj[id(o)] = add(adj[id(o)], g) if id(o) in adj else g
        for node in reversed(order):
            key = id(node)
            g = adj.get(key)
            # adjoints stop at requested inputs
            if g is None or key in input_ids or node.vjp is None:
                continue
            needs = tuple(id(p) in live for p in node.parents)
            if not any(needs):
                continue
            pgrads = node.vjp(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                pk = id(p)
                adj[pk] = add(adj[pk], pg) if pk in adj else pg
    finally:
        _set_grad_enabled(prev)

    result = []
    for t in inputs:
        g = adj.get(id(t))
        if g is None and not allow_unused:
            raise GraphError("input not reachable from outputs")
        result.append(g)
    return result


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from ``id(leaf)`` to its gradient array.
    """
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("loss is not finite")
    if params is None:
        params = [n for n in _toposort([loss]) if not n.parents and n.requires_grad]
    params = list(params)
    grads = grad(loss, params)
    out = {}
    for p, g in zip(params, grads):
        gv = np.zeros_like(p.value) if g is None else np.broadcast_to(g.value, p.shape)
        p.grad = gv.copy() if p.grad is None else p.grad + gv
        out[id(p)] = p.grad
    return out


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.value)):
        bad = np.argwhere(~np.isfinite(t.value))
        raise NumericError(f"non-finite values in {where} at index {tuple(bad[0])}")
    return t
