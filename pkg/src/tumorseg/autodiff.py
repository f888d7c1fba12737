"""Dense tensors with reverse-mode differentiation over a fixed operation set.

A :class:`Tensor` wraps a numpy array. Tensors created with
``requires_grad=True`` are leaves of a computation graph; every operation that
touches a tracked tensor appends a :class:`Node` that knows its parents and the
:class:`Function` that produced it. :func:`record` flattens the graph reachable
from an output into a topologically ordered :class:`ComputationRecord`, and
:func:`backward` walks that record in reverse.

Float32 is the default element type. Gradient checks run in float64, selected
per tensor or globally with :func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "Function", "ComputationRecord", "BroadcastError",
    "default_dtype", "get_default_dtype", "tensor", "record", "backward", "replay",
    "add", "sub", "mul", "div", "neg", "sigmoid", "leaky_relu", "log", "exp",
    "elementwise", "matmul", "reduce", "sum", "mean", "reshape", "permute",
    "concat", "softmax", "bce_with_logits", "finite_difference_check", "kink_trace",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_ids = itertools.count()


class BroadcastError(ValueError):
    pass


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the element type used for new tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


_KINK_TRACE: list | None = None


@contextlib.contextmanager
def kink_trace() -> Iterator[list]:
    """Collect the sign pattern of every lReLU input evaluated inside the block."""
    global _KINK_TRACE
    old, _KINK_TRACE = _KINK_TRACE, []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = old


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("id", "fn", "inputs", "value", "leaf", "__weakref__")

    def __init__(self, fn, inputs, value, leaf=None):
        self.id = next(_ids)
        self.fn = fn
        # each input is either a parent Node or the constant ndarray that was fed in
        self.inputs = inputs
        self.value = value
        self.leaf = leaf

    @property
    def kind(self) -> str:
        return "leaf" if self.fn is None else self.fn.kind

    def __repr__(self) -> str:
        return f"Node(id={self.id}, kind={self.kind}, shape={self.value.shape})"


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node = Node(None, (), arr, leaf=self) if requires_grad else None

    @classmethod
    def _from_op(cls, data: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        if data.ndim == 0:
            data = data.reshape(1)
        t.data = data
        t.requires_grad = node is not None
        t.node = node
        t.grad = None
        t.name = None
        return t

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, seed=None) -> None:
        """Fill ``.grad`` on every tracked leaf that this tensor depends on."""
        if self.node is None:
            raise RuntimeError("tensor does not require grad")
        rec = record(self)
        if seed is None:
            seed = np.ones_like(self.data)
        grads = backward(rec, seed, keep="leaves")
        for node in rec.nodes:
            if node.leaf is not None and node.id in grads:
                node.leaf.grad = grads[node.id].data

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, dtype=None, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad, name=name)


class Function:
    """A differentiable operation: ``forward`` on arrays, ``backward`` on the output gradient.

    ``backward`` returns one gradient per input (``None`` where no gradient is
    needed). ``self.needs`` tells which inputs are tracked.
    """

    kind = "function"

    def __init__(self, **attrs):
        self.attrs = attrs
        self.needs: tuple[bool, ...] = ()

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        tensors = _as_tensors(inputs)
        fn = cls(**attrs)
        fn.needs = tuple(t.requires_grad for t in tensors)
        out = fn.forward(*(t.data for t in tensors))
        if out.ndim == 0:
            out = out.reshape(1)
        if not any(fn.needs):
            return Tensor._from_op(out, None)
        parents = tuple(t.node if t.requires_grad else t.data for t in tensors)
        return Tensor._from_op(out, Node(fn, parents, out))


def _as_tensors(inputs) -> list[Tensor]:
    ref = next((x for x in inputs if isinstance(x, Tensor)), None)
    dtype = ref.dtype if ref is not None else _DEFAULT_DTYPE
    return [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype)) for x in inputs]


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise BroadcastError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


class _Binary(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return self._f(a, b)


class Add(_Binary):
    kind = "add"
    _f = staticmethod(np.add)

    def backward(self, g):
        return unbroadcast(g, self.a.shape), unbroadcast(g, self.b.shape)


class Sub(_Binary):
    kind = "sub"
    _f = staticmethod(np.subtract)

    def backward(self, g):
        return unbroadcast(g, self.a.shape), unbroadcast(-g, self.b.shape)


class Mul(_Binary):
    kind = "mul"
    _f = staticmethod(np.multiply)

    def backward(self, g):
        ga = unbroadcast(g * self.b, self.a.shape) if self.needs[0] else None
        gb = unbroadcast(g * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Div(_Binary):
    kind = "div"
    _f = staticmethod(np.divide)

    def backward(self, g):
        ga = unbroadcast(g / self.b, self.a.shape) if self.needs[0] else None
        gb = unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    kind = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, a):
        self.out = _stable_sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


class LeakyReLU(Function):
    kind = "leaky_relu"

    def forward(self, a):
        slope = self.attrs.get("slope", 0.01)
        # kink at exactly 0 takes the left derivative
        self.mask = a > 0
        if _KINK_TRACE is not None:
            _KINK_TRACE.append(np.packbits(self.mask))
        return np.where(self.mask, a, a * a.dtype.type(slope))

    def backward(self, g):
        slope = g.dtype.type(self.attrs.get("slope", 0.01))
        return (np.where(self.mask, g, g * slope),)


class Log(Function):
    kind = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Exp(Function):
    kind = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    return LeakyReLU.apply(a, slope=slope)


def log(a) -> Tensor:
    return Log.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


_ELEMENTWISE = {
    "add": add, "mul": mul, "sub": sub, "div": div,
    "sigmoid": sigmoid, "leaky_relu": leaky_relu, "log": log, "exp": exp,
}


def elementwise(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("leaky_relu", x, slope=0.01)``."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops


class MatMul(Function):
    kind = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise BroadcastError(f"cannot broadcast batch extents of {a.shape} and {b.shape}") from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(self.b, -1, -2)), self.a.shape) if self.needs[0] else None
        gb = unbroadcast(np.matmul(np.swapaxes(self.a, -1, -2), g), self.b.shape) if self.needs[1] else None
        return ga, gb


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(out))


class Reduce(Function):
    kind = "reduce"

    def forward(self, a):
        axes = _norm_axes(self.attrs["axes"], a.ndim)
        self.axes, self.shape = axes, a.shape
        keep = self.attrs["keepdims"]
        out = a.sum(axis=axes, keepdims=keep)
        if self.attrs["op"] == "mean":
            count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
            out = out / a.dtype.type(count)
            self.scale = a.dtype.type(1.0 / count)
        else:
            self.scale = None
        return np.asarray(out, dtype=a.dtype)

    def backward(self, g):
        kept = list(self.shape)
        for ax in self.axes:
            kept[ax] = 1
        g = g.reshape(kept)
        if self.scale is not None:
            g = g * self.scale
        return (np.broadcast_to(g, self.shape).copy(),)


def reduce(op_kind: str, a, axes=None, keepdims: bool = False) -> Tensor:
    if op_kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    return Reduce.apply(a, op=op_kind, axes=axes, keepdims=keepdims)


def sum(a, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a, axes=None, keepdims=False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


class Reshape(Function):
    kind = "reshape"

    def forward(self, a):
        self.shape = a.shape
        return a.reshape(self.attrs["shape"])

    def backward(self, g):
        return (g.reshape(self.shape),)


class Permute(Function):
    kind = "permute"

    def forward(self, a):
        axes = tuple(self.attrs["axes"])
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(self.inverse)),)


class Concat(Function):
    kind = "concat"

    def forward(self, *xs):
        axis = self.attrs["axis"]
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.attrs["axis"]))


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def permute(a, axes) -> Tensor:
    return Permute.apply(a, axes=tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Softmax(Function):
    """Softmax along ``axis``; accumulates in float64 with max subtraction."""

    kind = "softmax"

    def forward(self, a):
        axis = self.attrs["axis"]
        z = a.astype(np.float64)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=axis, keepdims=True)
        self.out = p
        return p.astype(a.dtype)

    def backward(self, g):
        axis = self.attrs["axis"]
        p = self.out
        g64 = g.astype(np.float64)
        dx = p * (g64 - (g64 * p).sum(axis=axis, keepdims=True))
        return (dx.astype(g.dtype),)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


class BCEWithLogits(Function):
    """Elementwise binary cross entropy of ``sigmoid(logits)`` against ``targets``."""

    kind = "bce_with_logits"

    def forward(self, x, t):
        self.x, self.t = x, t
        return np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(self, g):
        gx = g * (_stable_sigmoid(self.x) - self.t) if self.needs[0] else None
        gt = -g * self.x if self.needs[1] else None
        return gx, gt


def bce_with_logits(logits, targets) -> Tensor:
    return BCEWithLogits.apply(logits, targets)


# ---------------------------------------------------------------------------
# graph records


@dataclass
class ComputationRecord:
    nodes: list[Node]
    outputs: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def entries(self) -> list[tuple[str, tuple[int, ...]]]:
        """(op kind, parent ids) per node, the serialisable view of the record."""
        return [(n.kind, tuple(p.id for p in n.inputs if isinstance(p, Node))) for n in self.nodes]


def record(*outputs: Tensor) -> ComputationRecord:
    """Topologically ordered record of everything the outputs depend on."""
    order: list[Node] = []
    seen: set[int] = set()
    for out in outputs:
        if out.node is None:
            raise ValueError("output is not tracked; nothing to record")
        stack = [(out.node, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in reversed(node.inputs):
                if isinstance(p, Node) and p.id not in seen:
                    stack.append((p, False))
    return ComputationRecord(order, [o.node.id for o in outputs])


def backward(rec: ComputationRecord, output_seed, keep: str = "all") -> dict[int, Tensor]:
    """Reverse sweep over ``rec`` starting from ``output_seed`` at its first output.

    Returns node id -> gradient for every tracked node (``keep="all"``) or
    only for leaves (``keep="leaves"``).
    """
    out_node = next(n for n in reversed(rec.nodes) if n.id == rec.outputs[0])
    seed = output_seed.data if isinstance(output_seed, Tensor) else np.asarray(output_seed)
    if seed.shape != out_node.value.shape:
        raise ValueError(f"seed shape {seed.shape} differs from output shape {out_node.value.shape}")
    grads: dict[int, np.ndarray] = {out_node.id: seed.astype(out_node.value.dtype, copy=False)}
    result: dict[int, Tensor] = {}
    for node in reversed(rec.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if keep == "all" or node.leaf is not None:
            result[node.id] = Tensor._from_op(g, None)
        if node.fn is None:
            continue
        for parent, gi in zip(node.inputs, node.fn.backward(g)):
            if not isinstance(parent, Node) or gi is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + gi
            else:
                grads[parent.id] = gi
    return result


def replay(rec: ComputationRecord) -> dict[int, np.ndarray]:
    """Re-run every recorded node from its leaves; returns node id -> recomputed value."""
    values: dict[int, np.ndarray] = {}
    for node in rec.nodes:
        if node.fn is None:
            values[node.id] = node.leaf.data if node.leaf is not None else node.value
            continue
        fn = type(node.fn)(**node.fn.attrs)
        fn.needs = tuple(isinstance(p, Node) for p in node.inputs)
        args = [values[p.id] if isinstance(p, Node) else p for p in node.inputs]
        out = fn.forward(*args)
        values[node.id] = out.reshape(1) if out.ndim == 0 else out
    return values


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-5,
    coords: Sequence[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``coords`` restricts the comparison to a subset of flat-index tuples; all
    coordinates are checked by default. Relative error per coordinate is
    ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise ValueError(f"f must return a scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("f is not finite at the base point")
    y.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    if coords is None:
        coords = list(np.ndindex(base.shape))
    worst = 0.0
    probe = base.copy()
    for idx in coords:
        idx = tuple(idx)
        orig = probe[idx]
        probe[idx] = orig + step
        hi = probe[idx]
        fp = f(Tensor(probe.copy())).item()
        probe[idx] = orig - step
        lo = probe[idx]
        fm = f(Tensor(probe.copy())).item()
        probe[idx] = orig
        a = float(analytic[idx])
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(a)):
            raise FloatingPointError(f"non-finite value at coordinate {idx}: f+={fp}, f-={fm}, grad={a}")
        # divide by the step actually taken after rounding, not the nominal 2*step
        c = (fp - fm) / float(hi - lo)
        err = abs(a - c) / max(abs(a), abs(c), 1e-8)
        worst = max(worst, err)
    return worst
