"""Dense N-d arrays with tape-based reverse-mode differentiation.

Storage is ``float32`` by default. ``float64`` tensors are accepted and
propagated unchanged so that finite-difference checks can run the very same
code path at double precision.

Every differentiable primitive produces a result tensor carrying a
:class:`Node` that records its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` walks the recorded graph once in
reverse topological order and then releases it; a second traversal of the
same graph raises :class:`GraphError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "GraphError",
    "ShapeError",
    "tensor",
    "from_op",
    "elementwise",
    "matmul",
    "reduce",
    "backward",
    "reshape",
    "transpose",
    "concat",
    "no_grad",
    "is_grad_enabled",
    "unbroadcast",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False

    def release(self) -> None:
        self.consumed = True
        self.inputs = ()
        self.backward_fn = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                dtype = np.float64
            else:
                dtype = np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no-copy constructor for op results
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __pow__(self, other):
        return elementwise("power", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def from_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's forward result and record it on the tape.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input,
    each shaped like that input.
    """
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


_UNARY = ("relu", "exp", "log")
_BINARY = ("add", "sub", "mul", "div", "power")


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply an elementwise primitive; binary ops broadcast on trailing dims.

    ``relu`` has derivative 0 at exactly 0. For ``power`` the exponent may be a
    scalar or a tensor; a tensor exponent is differentiated only where the
    base is positive.
    """
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        a = _as_tensor(a)
        return _unary(op, a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} needs two operands")
    if isinstance(a, Tensor):
        b = _as_tensor(b, like=a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, like=b)
    _broadcast_shape(a, b, op)
    return _binary(op, a, b)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "relu":
        y = np.maximum(x, 0).astype(x.dtype, copy=False)

        def bw(g):
            return (g * (x > 0),)
    elif op == "exp":
        y = np.exp(x)

        def bw(g):
            return (g * y,)
    else:
        y = np.log(x)

        def bw(g):
            return (g / x,)
    return from_op(op, y, (a,), bw)


def _binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    x, z = a.data, b.data
    sa, sb = a.shape, b.shape
    if op == "add":
        y = x + z

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(g, sb)
    elif op == "sub":
        y = x - z

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(-g, sb)
    elif op == "mul":
        y = x * z

        def bw(g):
            ga = unbroadcast(g * z, sa) if a.requires_grad else None
            gb = unbroadcast(g * x, sb) if b.requires_grad else None
            return ga, gb
    elif op == "div":
        y = x / z

        def bw(g):
            ga = unbroadcast(g / z, sa) if a.requires_grad else None
            gb = unbroadcast(-g * x / (z * z), sb) if b.requires_grad else None
            return ga, gb
    else:
        y = np.power(x, z)

        def bw(g):
            ga = unbroadcast(g * z * np.power(x, z - 1), sa) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                safe = np.where(x > 0, x, 1)
                gb = unbroadcast(g * y * np.log(safe) * (x > 0), sb)
            return ga, gb
    return from_op(op, y.astype(np.result_type(x, z), copy=False), (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product with dA = G Bᵀ and dB = Aᵀ G."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, z = a.data, b.data

    def bw(g):
        return g @ z.T, x.T @ g

    return from_op("matmul", x @ z, (a, b), bw)


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` (all when None) with sum, mean or max.

    The max gradient goes to the first maximal element of each reduced slice
    in row-major order.
    """
    t = _as_tensor(t)
    ax = _norm_axes(axes, t.ndim)
    x = t.data
    in_shape = x.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(in_shape))

    if op in ("sum", "mean"):
        y = x.sum(axis=ax, keepdims=True)
        n = int(np.prod([in_shape[i] for i in ax])) if ax else 1
        scale = 1.0 if op == "sum" else 1.0 / n
        if op == "mean":
            y = y / np.asarray(n, dtype=x.dtype)

        def bw(g):
            g = g.reshape(kept)
            if scale != 1.0:
                g = g * np.asarray(scale, dtype=g.dtype)
            return (np.broadcast_to(g, in_shape).copy(),)
    elif op == "max":
        rest = tuple(i for i in range(x.ndim) if i not in ax)
        moved = np.transpose(x, rest + ax)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(kept)
        perm_shape = moved.shape
        inverse = np.argsort(rest + ax)

        def bw(g):
            gflat = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            return (np.transpose(gflat.reshape(perm_shape), inverse),)
    else:
        raise ValueError(f"unknown reduction {op!r}")

    if not keepdims:
        y = y.reshape(tuple(n for i, n in enumerate(in_shape) if i not in ax))
    return from_op(op, np.ascontiguousarray(y), (t,), bw)


def reshape(t: Tensor, shape: tuple) -> Tensor:
    t = _as_tensor(t)
    src = t.shape
    try:
        y = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return from_op("reshape", y, (t,), lambda g: (g.reshape(src),))


def transpose(t: Tensor, axes=None) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(reversed(range(t.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return from_op("transpose", np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return from_op("concat", y, tensors, bw)


class Graph:
    """Recorded operations reachable from a root, in topological order.

    ``nodes`` lists the non-leaf tensors so that every entry follows all of
    its inputs; ``leaves`` lists gradient-tracking leaves in discovery order.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            node = t._node
            if node is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            if node.consumed:
                raise GraphError(
                    f"stale graph: the {node.op!r} result was already consumed by backward()"
                )
            stack.append((t, True))
            for inp in reversed(node.inputs):
                if id(inp) not in seen and inp.requires_grad:
                    stack.append((inp, False))
        self.root = root
        self.nodes = order
        self.leaves = leaves

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t._node.op for t in self.nodes]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-tracking tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    The graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        node = t._node
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf in graph.leaves:
        g = grads.pop(id(leaf), None)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for t in graph.nodes:
        t._node.release()


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total ** 0.5
