"""
Reverse-mode automatic differentiation over float64 numpy arrays.

A `Tape` records primitive operations in execution order; `Tensor` is a
lightweight handle to one recorded node. Values at rest (parameters,
gradients, images) are plain `numpy.ndarray` objects keyed by parameter id.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Array = np.ndarray
Params = Dict[str, Array]
GradMap = Dict[str, Array]
VJP = Callable[[Array, Tuple[bool, ...]], Tuple[Optional[Array], ...]]
LossFn = Callable[["Tape", Dict[str, "Tensor"]], "Tensor"]


@dataclass(frozen=True)
class Node:
    op: str
    value: Array
    parents: Tuple[int, ...]
    vjp: Optional[VJP]
    requires_grad: bool


class Tape:
    """Append-only record of primitive ops; backward never mutates it."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}

    def record(self, op: str, value, parents: Sequence["Tensor"] = (),
               vjp: Optional[VJP] = None) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        value.setflags(write=False)
        parent_ids = tuple(p.node_id for p in parents)
        requires_grad = any(self.nodes[i].requires_grad for i in parent_ids)
        self.nodes.append(Node(op, value, parent_ids, vjp if requires_grad else None, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, name: str, value) -> "Tensor":
        if name in self.leaves:
            raise ValueError(f"leaf '{name}' already registered")
        value = np.array(value, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite leaf '{name}'")
        value.setflags(write=False)
        self.nodes.append(Node("leaf", value, (), None, True))
        self.leaves[name] = len(self.nodes) - 1
        return Tensor(self, len(self.nodes) - 1)

    def constant(self, value) -> "Tensor":
        value = np.array(value, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("non-finite constant")
        value.setflags(write=False)
        self.nodes.append(Node("const", value, (), None, False))
        return Tensor(self, len(self.nodes) - 1)

    def backward(self, root: "Tensor", wrt: Optional[Iterable[str]] = None) -> GradMap:
        """Exact gradients of a scalar root for the requested leaves."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")

        names = list(self.leaves) if wrt is None else list(wrt)
        unknown = [n for n in names if n not in self.leaves]
        if unknown:
            raise KeyError(f"unknown leaves requested: {unknown}")

        leaf_ids = set(self.leaves.values())
        pending: Dict[int, Array] = {root.node_id: np.ones_like(root.value)}
        leaf_grads: Dict[int, Array] = {}

        # insertion order is a topological order, so a reverse sweep visits each node once
        for idx in range(root.node_id, -1, -1):
            grad = pending.pop(idx, None)
            if grad is None:
                continue
            node = self.nodes[idx]
            if idx in leaf_ids:
                leaf_grads[idx] = grad
                continue
            if node.vjp is None:
                continue
            needs = tuple(self.nodes[p].requires_grad for p in node.parents)
            for pid, pgrad, need in zip(node.parents, node.vjp(grad, needs), needs):
                if not need or pgrad is None:
                    continue
                if not np.all(np.isfinite(pgrad)):
                    raise NonFiniteError(f"non-finite gradient flowing out of '{node.op}'")
                pending[pid] = pgrad if pid not in pending else pending[pid] + pgrad

        grads = {}
        for name in names:
            idx = self.leaves[name]
            grad = leaf_grads.get(idx)
            grads[name] = np.zeros_like(self.nodes[idx].value) if grad is None else np.array(grad, copy=True)
        return grads


class Tensor:
    """Handle to a node of a tape. Immutable; arithmetic records new nodes."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"<Tensor node={self.node_id} op={self.tape.nodes[self.node_id].op} shape={self.shape}>"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)


Operand = Union[Tensor, Array, float, int]


def _tape_of(*operands: Operand) -> Tape:
    tapes = {id(o.tape): o.tape for o in operands if isinstance(o, Tensor)}
    if len(tapes) != 1:
        raise ValueError("operands must share exactly one tape")
    return next(iter(tapes.values()))


def lift(tape: Tape, x: Operand) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensor belongs to a different tape")
        return x
    return tape.constant(x)


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a: Operand, b: Operand) -> Tuple[Tape, Tensor, Tensor]:
    tape = _tape_of(a, b)
    return tape, lift(tape, a), lift(tape, b)


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> Tensor:
    tape, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return tape.record("add", a.value + b.value, (a, b),
                       lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    tape, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return tape.record("sub", a.value - b.value, (a, b),
                       lambda g, n: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b),
                       lambda g, n: (_unbroadcast(g * bv, av.shape) if n[0] else None,
                                     _unbroadcast(g * av, bv.shape) if n[1] else None))


def div(a: Operand, b: Operand) -> Tensor:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record("div", out, (a, b),
                       lambda g, n: (_unbroadcast(g / bv, av.shape) if n[0] else None,
                                     _unbroadcast(-g * out / bv, bv.shape) if n[1] else None))


def neg(a: Tensor) -> Tensor:
    return a.tape.record("neg", -a.value, (a,), lambda g, n: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    av = a.value
    return a.tape.record("pow", av ** exponent, (a,),
                         lambda g, n: (g * exponent * av ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return a.tape.record("exp", out, (a,), lambda g, n: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record("log", np.log(av), (a,), lambda g, n: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", out, (a,), lambda g, n: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return a.tape.record("relu", np.where(mask, a.value, 0.0), (a,), lambda g, n: (g * mask,))


# ---------------------------------------------------------------- reductions and shape

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)

    def vjp(g, n):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return a.tape.record("sum", a.value.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,),
                         lambda g, n: (g.reshape(original),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return a.tape.record("transpose", a.value.transpose(axes), (a,),
                         lambda g, n: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return tape.record("concat", np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors),
                       lambda g, n: tuple(np.split(g, splits, axis=axis)))


def matmul(a: Operand, b: Operand) -> Tensor:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    return tape.record("matmul", av @ bv, (a, b),
                       lambda g, n: (g @ bv.T if n[0] else None, av.T @ g if n[1] else None))


def matvec(matrix: Operand, vector: Tensor) -> Tensor:
    """matrix @ vector for a 1-D vector tensor."""
    column = reshape(vector, (vector.size, 1))
    product = matmul(matrix, column)
    return reshape(product, (product.shape[0],))


def dot(a: Tensor, b: Operand) -> Tensor:
    return tsum(mul(a, b))


# ---------------------------------------------------------------- network primitives

def conv2d(x: Tensor, w: Operand, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Cross-correlation of x [B,C,H,W] with w [O,C,k,k]."""
    tape, x, w = _binary(x, w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {xv.shape}, kernel {wv.shape}")
    k = wv.shape[2]
    pad = k // 2 if padding is None else padding
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gx = gw = None
        if needs[1]:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if needs[0]:
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        np.einsum("bohw,oc->bchw", g, wv[:, :, i, j])
            gx = gxp[:, :, pad:pad + xv.shape[2], pad:pad + xv.shape[3]]
        return gx, gw

    return tape.record("conv2d", out, (x, w), vjp)


def conv_transpose2x2(x: Tensor, w: Operand) -> Tensor:
    """Stride-2, kernel-2 transposed convolution of x [B,C,H,W] with w [C,O,2,2]."""
    tape, x, w = _binary(x, w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.shape[0] != xv.shape[1] or wv.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2x2 shape mismatch: input {xv.shape}, kernel {wv.shape}")
    b, _, h, wd = xv.shape
    o = wv.shape[1]
    out = np.einsum("bchw,copq->bohpwq", xv, wv).reshape(b, o, 2 * h, 2 * wd)

    def vjp(g, needs):
        g6 = g.reshape(b, o, h, 2, wd, 2)
        gx = np.einsum("bohpwq,copq->bchw", g6, wv) if needs[0] else None
        gw = np.einsum("bohpwq,bchw->copq", g6, xv) if needs[1] else None
        return gx, gw

    return tape.record("conv_transpose2x2", out, (x, w), vjp)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    xv = x.value
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return x.tape.record("log_softmax", out, (x,),
                         lambda g, n: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return exp(log_softmax(x, axis))


# ---------------------------------------------------------------- drivers

def value_and_grad(loss_fn: LossFn, params: Params,
                   wrt: Optional[Iterable[str]] = None) -> Tuple[float, GradMap]:
    """Evaluate loss_fn on a fresh tape and differentiate it w.r.t. `wrt` (default: all params)."""
    tape = Tape()
    variables = {name: tape.leaf(name, value) for name, value in params.items()}
    loss = loss_fn(tape, variables)
    grads = tape.backward(loss, wrt)
    return loss.item(), grads


def evaluate(loss_fn: LossFn, params: Params) -> float:
    tape = Tape()
    variables = {name: tape.leaf(name, value) for name, value in params.items()}
    return loss_fn(tape, variables).item()


def tree_norm(tree: GradMap) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in tree.values())))


def fd_hvp(loss_fn: LossFn, params: Params, direction: GradMap, wrt: Iterable[str],
           eps: float = 1e-3) -> GradMap:
    """
    Central-difference Hessian-vector product.

    Perturbs the `direction` keys of `params` by ±eps/‖direction‖ along
    `direction` and differences the gradients w.r.t. `wrt`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    wrt = list(wrt)
    norm = tree_norm(direction)
    if norm == 0.0:
        return {name: np.zeros_like(params[name]) for name in wrt}
    step = eps / max(norm, 1e-12)

    plus = dict(params)
    minus = dict(params)
    for name, d in direction.items():
        plus[name] = params[name] + step * d
        minus[name] = params[name] - step * d
    _, g_plus = value_and_grad(loss_fn, plus, wrt)
    _, g_minus = value_and_grad(loss_fn, minus, wrt)

    result = {name: (g_plus[name] - g_minus[name]) / (2.0 * step) for name in wrt}
    if not all(np.all(np.isfinite(v)) for v in result.values()):
        raise NonFiniteError("non-finite Hessian-vector product")
    return result


def fd_mixed_hvp(inner_loss_fn: LossFn, omega: Params, theta: Params, v: GradMap,
                 eps: float = 1e-3) -> GradMap:
    """vᵀ·∂²L_inner/∂ω∂θ, returned over θ."""
    if set(v) != set(omega):
        raise ShapeError("direction must cover exactly the ω parameters")
    for name, d in v.items():
        if d.shape != omega[name].shape:
            raise ShapeError(f"direction '{name}' has shape {d.shape}, expected {omega[name].shape}")
    return fd_hvp(inner_loss_fn, {**theta, **omega}, v, wrt=theta.keys(), eps=eps)


def finite_diff_grad(f: Callable[[Array], float], x: Array, eps: float = 1e-6) -> Array:
    """Central-difference gradient of a scalar function; a test oracle."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        probe = x.copy().reshape(-1)
        probe[i] += eps
        f_plus = f(probe.reshape(x.shape))
        probe[i] -= 2 * eps
        f_minus = f(probe.reshape(x.shape))
        flat[i] = (f_plus - f_minus) / (2 * eps)
    return grad
