"""Small reverse-mode autodiff over numpy arrays.

Every backward rule is itself written with :class:`Value` operations, so the
gradient of a graph can be recorded as a new graph (``create_graph=True``) and
differentiated again. That is what the projection loss needs: it contains the
input gradient of the network and is then differentiated w.r.t. the weights.

Broadcasting follows numpy; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_value(x) -> "Value":
    return x if isinstance(x, Value) else Value(x)


class Value:
    """A node in the computation graph wrapping a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000  # so ndarray <op> Value defers to Value

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op):
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Value(data, True, parents, backward, op)
        return Value(data, False, (), None, op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _as_value(other)
        a, b = self, other
        return Value._make(a.data + b.data, (a, b),
                           lambda g, need: (need[0] and sum_to(g, a.shape), need[1] and sum_to(g, b.shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Value._make(-self.data, (self,), lambda g, need: (-g,), "neg")

    def __sub__(self, other):
        other = _as_value(other)
        a, b = self, other
        return Value._make(a.data - b.data, (a, b),
                           lambda g, need: (need[0] and sum_to(g, a.shape), need[1] and sum_to(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return _as_value(other) - self

    def __mul__(self, other):
        other = _as_value(other)
        a, b = self, other
        return Value._make(a.data * b.data, (a, b),
                           lambda g, need: (need[0] and sum_to(g * b, a.shape), need[1] and sum_to(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_value(other)
        a, b = self, other

        def back(g, need):
            ga = g / b
            return need[0] and sum_to(ga, a.shape), need[1] and sum_to(-ga * a / b, b.shape)

        return Value._make(a.data / b.data, (a, b), back, "div")

    def __rtruediv__(self, other):
        return _as_value(other) / self

    def __pow__(self, p):
        if isinstance(p, Value):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(p)
        return Value._make(a.data ** p, (a,), lambda g, need: (g * (p * a ** (p - 1.0)),), "pow")

    def __matmul__(self, other):
        other = _as_value(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        return Value._make(a.data @ b.data, (a, b), lambda g, need: (need[0] and g @ b.T, need[1] and a.T @ g), "matmul")

    def __rmatmul__(self, other):
        return _as_value(other) @ self

    @property
    def T(self):
        return Value._make(self.data.T, (self,), lambda g, need: (g.T,), "transpose")

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g, need):
            if axis is not None and not keepdims:
                g = g.reshape(np.expand_dims(out, axis).shape)
            elif axis is None and not keepdims:
                g = g.reshape((1,) * a.data.ndim)
            return (broadcast_to(g, a.shape),)

        return Value._make(out, (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return Value._make(a.data.reshape(*shape), (a,), lambda g, need: (g.reshape(a.shape),), "reshape")

    # -- element-wise nonlinearities -------------------------------------
    def relu(self):
        a = self
        mask = (a.data > 0).astype(np.float64)  # derivative 0 at the kink
        return Value._make(a.data * mask, (a,), lambda g, need: (g * mask,), "relu")

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def back(g, need):
            return (g * exp(a),)

        return Value._make(out_data, (a,), back, "exp")

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Value._make(np.abs(a.data), (a,), lambda g, need: (g * sign,), "abs")

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def back(g, need):
            return (g * 0.5 / sqrt(a),)

        return Value._make(out_data, (a,), back, "sqrt")

    # -- graph traversal --------------------------------------------------
    def backward(self, inputs=None):
        """Accumulate d(self)/d(leaf) into ``.grad``.

        By default every reachable leaf with ``requires_grad`` is filled; pass
        ``inputs`` to restrict the pass to those leaves (e.g. the parameters).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if inputs is None:
            leaves = [n for n in _topo_order([self]) if n.is_leaf and n.requires_grad]
        else:
            leaves = list(inputs)
        grads = grad(self, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            gd = np.zeros_like(leaf.data) if g is None else g.data
            leaf.grad = gd.copy() if leaf.grad is None else leaf.grad + gd


# functional aliases -------------------------------------------------------

def relu(x: Value) -> Value:
    return x.relu()


def exp(x: Value) -> Value:
    return x.exp()


def sqrt(x: Value) -> Value:
    return x.sqrt()


def vabs(x: Value) -> Value:
    return x.abs()


def concat(values, axis: int = -1) -> Value:
    values = [_as_value(v) for v in values]
    axis = axis % values[0].data.ndim
    sizes = [v.data.shape[axis] for v in values]
    bounds = np.cumsum([0] + sizes)

    def back(g, need):
        out = []
        for flag, lo, hi in zip(need, bounds[:-1], bounds[1:]):
            out.append(flag and take(g, slice(lo, hi), axis))
        return tuple(out)

    return Value._make(np.concatenate([v.data for v in values], axis=axis), tuple(values), back, "concat")


def take(x: Value, sl: slice, axis: int) -> Value:
    """Contiguous slice along one axis."""
    shape = x.shape
    index = [slice(None)] * len(shape)
    index[axis] = sl
    index = tuple(index)

    def back(g, need):
        return (_pad_slice(g, index, shape),)

    return Value._make(x.data[index], (x,), back, "take")


def _pad_slice(g: Value, index, shape) -> Value:
    out = np.zeros(shape)
    out[index] = g.data

    def back(gg, need):
        return (Value._make(gg.data[index], (gg,), lambda h, n: (_pad_slice(h, index, shape),), "take"),)

    return Value._make(out, (g,), back, "pad")


def sum_to(g: Value, shape) -> Value:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    src = g.shape
    lead = len(src) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and src[i + lead] != 1
    )
    data = g.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(shape)
    return Value._make(data, (g,), lambda h, need: (broadcast_to(h, src),), "sum_to")


def broadcast_to(g: Value, shape) -> Value:
    if g.shape == tuple(shape):
        return g
    src = g.shape
    return Value._make(np.broadcast_to(g.data, shape).copy(), (g,), lambda h, need: (sum_to(h, src),), "broadcast")


def _topo_order(roots):
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def grad(output: Value, inputs, grad_output: Value | None = None, create_graph: bool = False,
         allow_unused: bool = False):
    """Gradients of ``output`` w.r.t. each of ``inputs`` as Values.

    With ``create_graph`` the returned Values carry their own graph and can be
    differentiated again.
    """
    single = isinstance(inputs, Value)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        grad_output = Value(np.ones_like(output.data))
    keep = {id(x) for x in inputs}
    order = _topo_order([output])
    # only nodes with a path to a requested input receive gradients
    relevant = set(keep)
    for node in order:
        if any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))
    grads: dict[int, Value] = {id(output): grad_output}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            need = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
            for parent, flag, pg in zip(node._parents, need, node._backward(g, need)):
                if not flag or pg is None or pg is False:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None and not allow_unused:
            g = Value(np.zeros_like(x.data))
        out.append(g)
    return out[0] if single else out


def input_gradient(f: Value, x: Value) -> Value:
    """d f / d x for a batch of per-row scalars ``f`` (shape (N,) or (N,1)).

    Rows are independent, so the gradient of ``f.sum()`` gives every row's
    own gradient. The result stays in the graph for further differentiation.
    """
    if not x.requires_grad:
        raise ValueError("x must be created with requires_grad=True")
    return grad(f.sum(), x, create_graph=True)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, **kw)


def adam_update(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam step. Inputs are not mutated."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def cosine_lr(iteration: int, total: int, base: float) -> float:
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * iteration / total))
