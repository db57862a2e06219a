"""Dense tensors with a small reverse-mode differentiation tape.

Only the handful of ops the encoder, attacks and defense need are provided.
Operations record themselves on the active :class:`Tape` when at least one
operand requires a gradient; outside a tape they are plain numpy calls.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = dot(x, x)
    >>> backward(tape, y)[x]
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's rule."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible operand shapes {listed}")


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array of floats, identified by a unique id.

    Float32 by default; float64 is accepted so gradient checks can run at a
    precision where central differences are meaningful.
    """

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.ascontiguousarray(arr, dtype=dtype).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple
    output: int
    vjp: Callable[[np.ndarray], Sequence]


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; ops issued inside the ``with`` block whose
    operands require gradients are recorded in execution order, which is a
    topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._outputs: set[int] = set()

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        ids = []
        for t in inputs:
            if t.requires_grad and t.id not in self._outputs:
                self.leaves.setdefault(t.id, t)
            ids.append(t.id if t.requires_grad else None)
        self.nodes.append(Node(kind, tuple(ids), output.id, vjp))
        self._outputs.add(output.id)

    def owns(self, tensor: Tensor) -> bool:
        return tensor.id in self._outputs


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradientMap(dict):
    """Gradients keyed by tensor id; indexing by the tensor itself also works."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return dict.__contains__(self, key)


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    """Wrap a forward value and, if a tape is active and needed, record it."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, dtype=inputs[0].dtype)
    if needs:
        tape.record(kind, inputs, out, vjp)
    return out


def custom_op(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    """Register an op defined elsewhere (e.g. a spectral filter).

    ``vjp(grad_out)`` must return one gradient (or None) per input.
    """
    return _emit(kind, list(inputs), value, vjp)


# ---------------------------------------------------------------------------
# elementwise


def _suffix_broadcast(kind, a: Tensor, b: Tensor) -> bool:
    """True when b broadcasts over a's leading axes; raise on any other mismatch."""
    if a.shape == b.shape:
        return False
    nb = len(b.shape)
    if 0 < nb < len(a.shape) and a.shape[-nb:] == b.shape:
        return True
    raise ShapeError(kind, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead else grad


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    bc = _suffix_broadcast("add", a, b)
    shape_b = b.shape

    def vjp(g):
        return g, (_reduce_to(g, shape_b) if bc else g)

    return _emit("add", [a, b], a.data + b.data, vjp)


def subtract(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    bc = _suffix_broadcast("subtract", a, b)
    shape_b = b.shape

    def vjp(g):
        return g, -(_reduce_to(g, shape_b) if bc else g)

    return _emit("subtract", [a, b], a.data - b.data, vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _emit("scale", [a], a.data * c, lambda g: (g * c,))


def multiply(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError("elementwise-multiply", a.shape, b.shape)
    da, db = a.data, b.data
    return _emit("elementwise-multiply", [a, b], da * db, lambda g: (g * db, g * da))


def divide(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError("divide", a.shape, b.shape)
    da, db = a.data, b.data
    out = da / db
    return _emit("divide", [a, b], out, lambda g: (g / db, -g * out / db))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", [a], np.maximum(a.data, 0), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the bounds."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    out = np.clip(a.data, lo, hi)
    return _emit("clamp", [a], out, lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _emit("reshape", [a], out, lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", [a], np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (k, n) -> (..., m, n)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    da, db = a.data, b.data

    def vjp(g):
        ga = g @ db.T
        gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", [a, b], da @ db, vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), src).astype(g.dtype, copy=True),)

    return _emit("reduce-sum", [a], np.asarray(a.data.sum(axis=axes), dtype=a.dtype), vjp)


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    src = a.shape
    count = int(np.prod([src[i] for i in axes])) if axes else 1
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    inv = a.dtype.type(1.0 / count)

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept) * inv, src).astype(g.dtype, copy=True),)

    return _emit("reduce-mean", [a], np.asarray(a.data.mean(axis=axes), dtype=a.dtype), vjp)


def dot(a, b) -> Tensor:
    """Inner product along the last axis; leading axes are kept."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    da, db = a.data, b.data
    out = np.asarray(np.einsum("...i,...i->...", da, db), dtype=a.dtype)

    def vjp(g):
        g = np.asarray(g)[..., None]
        return g * db, g * da

    return _emit("dot", [a, b], out, vjp)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    da = a.data
    norm = np.sqrt(np.sum(da * da, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2-normalize: input has zero norm")
    out = da / norm

    def vjp(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * proj) / norm,)

    return _emit("l2-normalize", [a], out, vjp)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    da = a.data
    peak = da.max(axis=axis, keepdims=True)
    e = np.exp(da - peak)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + peak).squeeze(axis)
    soft = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _emit("logsumexp", [a], out, vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row ``logsumexp(s) - s[label]``, fused for accuracy.

    Written as ``log1p(sum_{j != y} exp(s_j - s_y))`` when the label wins, so
    a loss near zero keeps full relative precision instead of being the
    difference of two large numbers.
    """
    a = as_tensor(logits)
    if len(a.shape) != 2:
        raise ShapeError(f"softmax-cross-entropy: expected (B, K) logits, got {a.shape}")
    y = np.asarray(labels).reshape(-1)
    if y.size != a.shape[0]:
        raise ShapeError(f"softmax-cross-entropy: {y.size} labels for {a.shape[0]} rows")
    rows = np.arange(a.shape[0])
    d = a.data - a.data[rows, y][:, None]
    d[rows, y] = -np.inf
    peak = np.maximum(d.max(axis=1), 0.0)
    others = np.exp(d - peak[:, None]).sum(axis=1)
    own = np.exp(-peak)
    out = np.where(peak > 0, peak + np.log(own + others), np.log1p(others))
    soft = np.exp(d - peak[:, None]) / (own + others)[:, None]
    soft[rows, y] = 0.0
    grad_rows = soft.copy()
    grad_rows[rows, y] = -soft.sum(axis=1)  # -(1 - p_y), summed from the small terms

    def vjp(g):
        return (g[:, None] * grad_rows,)

    return _emit("softmax-cross-entropy", [a], out.astype(a.dtype), vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, output: Tensor) -> GradientMap:
    """Gradients of a scalar ``output`` w.r.t. every leaf recorded on ``tape``.

    Leaves the output does not depend on get zero gradients.
    """
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not tape.owns(output):
        raise TapeError("output was not produced on this tape")
    grads: dict[int, np.ndarray] = {output.id: np.ones(output.shape, dtype=output.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for tid, gi in zip(node.inputs, node.vjp(g)):
            if tid is None or gi is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    result = GradientMap()
    for tid, leaf in tape.leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        else:
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient encountered in backward")
        result[tid] = g
    return result


def grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, dtype=None) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function of one array."""
    leaf = Tensor(x, requires_grad=True, dtype=dtype)
    with Tape() as tape:
        out = fn(leaf)
    return out.item(), backward(tape, out)[leaf]


def grad_check(loss_fn: Callable[[Tensor], Tensor], input, step: float = 1e-3,
               n_samples: int = 64, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    Coordinates are sampled without replacement (all of them when the input
    has at most ``n_samples`` entries). The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = as_tensor(input)
    base = x0.data
    f0 = loss_fn(Tensor(base)).item()
    if loss_fn(Tensor(base)).item() != f0:
        raise RuntimeError("loss_fn is not deterministic: two forward passes disagree")
    _, analytic = grad(loss_fn, base, dtype=base.dtype)

    flat = base.reshape(-1)
    rng = np.random.default_rng(seed)
    if flat.size <= n_samples:
        coords = np.arange(flat.size)
    else:
        coords = rng.choice(flat.size, size=n_samples, replace=False)
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = loss_fn(Tensor(plus.reshape(base.shape))).item()
        fm = loss_fn(Tensor(minus.reshape(base.shape))).item()
        # the step actually taken may differ from `step` after rounding
        h = float(plus[i]) - float(minus[i])
        numeric = (fp - fm) / h
        a = float(a_flat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# registry of differentiable op kinds, used by tests to sweep every op
OPS = {
    "add": add,
    "subtract": subtract,
    "scale": scale,
    "elementwise-multiply": multiply,
    "divide": divide,
    "matmul": matmul,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "reduce-mean": reduce_mean,
    "reduce-sum": reduce_sum,
    "l2-normalize": l2_normalize,
    "dot": dot,
    "clamp": clamp,
    "logsumexp": logsumexp,
    "softmax-cross-entropy": softmax_cross_entropy,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch an op by its kind name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*operands, **kwargs)
