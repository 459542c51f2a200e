"""Minimal reverse-mode differentiation over dense float64 arrays.

A define-by-run tape: every op builds a ``Tensor`` holding its value and a
closure that scatters the output gradient into its parents.  The graph is
rebuilt every iteration (parameter counts change under density control), and
``backward`` tears it down after the pass.

Hand-derived kernels (skinning, rasterization, rotation maps) plug in through
``custom_op``; everything else is composed from the primitive ops here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """A node on the tape: value, optional gradient, and provenance."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def accumulate(self, g: Array):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.values.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name: str = "") -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def parameter(x, name: str = "") -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _node(values: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(values)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)

        def run():
            backward(out.grad)

        out._backward = run
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, bv.shape))

    return _node(av + bv, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, bv.shape))

    return _node(av - bv, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * av, bv.shape))

    return _node(av * bv, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / bv, av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * av / (bv * bv), bv.shape))

    return _node(av / bv, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """np.matmul with broadcasting over leading batch dims (operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape))

    return _node(np.matmul(av, bv), (a, b), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return _node(np.where(mask, a.values, 0.0), (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.values))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * s * (1.0 - s))

    return _node(s, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.values)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * e)

    return _node(e, (a,), bwd)


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * np.cos(av))

    return _node(np.sin(av), (a,), bwd)


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(-g * np.sin(av))

    return _node(np.cos(av), (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.values)  # subgradient 0 at 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _node(np.abs(a.values), (a,), bwd)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.values.shape

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge, shape).copy())

    return _node(a.values.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.values.shape
    count = a.values.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g / count, shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge / count, shape).copy())

    return _node(a.values.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.values.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)

    return _node(np.concatenate([t.values for t in ts], axis=axis), ts, bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.values.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(old))

    return _node(a.values.reshape(shape), (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.values, ax1, ax2), (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.values.shape

    def bwd(g):
        if a.requires_grad:
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            a.accumulate(full)

    return _node(a.values[idx], (a,), bwd)


def expand_rows(a, n: int) -> Tensor:
    """(1, D) -> (n, D) broadcast; backward sums the rows back."""
    a = as_tensor(a)
    if a.values.shape[0] != 1:
        raise ValueError("expand_rows expects a leading axis of size 1")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.sum(axis=0, keepdims=True))

    return _node(np.broadcast_to(a.values, (n,) + a.values.shape[1:]).copy(), (a,), bwd)


def diag3(a) -> Tensor:
    """(N, 3) -> (N, 3, 3) diagonal embedding."""
    a = as_tensor(a)
    n = a.values.shape[0]
    out = np.zeros((n, 3, 3))
    ii = np.arange(3)
    out[:, ii, ii] = a.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g[:, ii, ii])

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# custom ops
# ---------------------------------------------------------------------------

def custom_op(inputs: Sequence[Tensor], forward: Callable, backward: Callable,
              name: str = "") -> list[Tensor]:
    """Register a hand-derived op on the tape.

    ``forward(*value_arrays) -> (list of output arrays, cache)``
    ``backward(cache, list of output grads) -> list of input grads (or None)``

    Output gradients that were never touched arrive as zeros.  Returns the
    list of output tensors.
    """
    inputs = [as_tensor(t) for t in inputs]
    out_values, cache = forward(*[t.values for t in inputs])
    hub = Tensor(np.zeros(0), name=name or "custom")
    hub.requires_grad = any(t.requires_grad for t in inputs)
    outputs = []

    def touch_hub():
        # marks the hub live so the joint backward below fires exactly once
        hub.accumulate(np.zeros(0))

    for v in out_values:
        o = Tensor(v)
        o.requires_grad = hub.requires_grad
        if o.requires_grad:
            o._parents = (hub,)
            o._backward = touch_hub
        outputs.append(o)

    if hub.requires_grad:
        hub._parents = tuple(inputs)

        def run():
            grads_out = [o.grad if o.grad is not None else np.zeros_like(o.values)
                         for o in outputs]
            grads_in = backward(cache, grads_out)
            for t, g in zip(inputs, grads_in):
                if g is not None and t.requires_grad:
                    t.accumulate(g)

        hub._backward = run
    return outputs


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Reverse pass from a scalar loss; frees the tape afterwards.

    Gradients accumulate into every reachable tensor with requires_grad set;
    shared subgraphs sum rather than overwrite.
    """
    if loss.values.size != 1:
        raise ValueError("backward expects a scalar loss")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate(np.ones_like(loss.values))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()
    for node in topo:
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    """Central-difference comparison between an analytic gradient and f."""

    max_rel_err: float
    mean_rel_err: float
    n_checked: int
    failing_indices: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing_indices


def fd_gradient(f: Callable[[Array], float], x0: Array, h: float = 1e-5) -> Array:
    """Central differences of a scalar function, one coordinate at a time."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    xf = x0.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * h)
    return g


def finite_difference_check(f: Callable[[Array], float], x0: Array,
                            analytic_grad: Array, h: float = 1e-5,
                            rel_tol: float = 1e-6,
                            magnitude_floor: float = 1e-6) -> FiniteDiffReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at x0.

    Coordinates where both gradients are below ``magnitude_floor`` are
    skipped (relative error is meaningless there).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ag = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    fg = fd_gradient(f, x0, h).reshape(-1)

    scale = np.maximum(np.abs(ag), np.abs(fg))
    check = scale > magnitude_floor
    rel = np.zeros_like(ag)
    rel[check] = np.abs(ag[check] - fg[check]) / scale[check]

    failing = [int(i) for i in np.nonzero(check & (rel > rel_tol))[0]]
    checked = int(check.sum())
    return FiniteDiffReport(
        max_rel_err=float(rel[check].max()) if checked else 0.0,
        mean_rel_err=float(rel[check].mean()) if checked else 0.0,
        n_checked=checked,
        failing_indices=failing,
    )
