"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive is registered in ``_OPS`` under a string kind.  A primitive
application whose inputs require gradients is appended to the active
:class:`Tape`; :func:`backward` walks that tape once in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "forward_op",
    "register_op",
    "backward",
    "grad_check",
    "parameters_grad_check",
    "no_grad",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "transpose",
    "sum",
    "mean",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "exp",
    "abs",
    "softmax",
    "masked_fill",
    "reshape",
    "take_slice",
    "embedding",
]

MASK_VALUE = -1e9
_EXP_CLIP = 700.0


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class TapeError(RuntimeError):
    """Raised on misuse of the recording tape (double backward, non-scalar loss)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class _Node:
    # the output is referenced by id only: holding the tensor itself would form a
    # tensor <-> node cycle that keeps activations alive until the cyclic GC runs
    __slots__ = ("kind", "inputs", "output_id", "backward_fn", "saved", "tape")

    def __init__(self, kind, inputs, output_id, backward_fn, saved, tape):
        self.kind = kind
        self.inputs = inputs
        self.output_id = output_id
        self.backward_fn = backward_fn
        self.saved = saved
        self.tape = tape


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager to scope recording; outside any ``with`` block
    a process-wide default tape is used and replaced once consumed.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.stack.remove(self)


class _State:
    def __init__(self) -> None:
        self.stack: list[Tape] = [Tape()]
        self.grad_enabled = True


_STATE = _State()


def _active_tape() -> Tape:
    tape = _STATE.stack[-1]
    if tape.consumed and len(_STATE.stack) == 1:
        tape = Tape()
        _STATE.stack[0] = tape
    elif tape.consumed:
        raise TapeError("active tape was already consumed by backward()")
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording; results never require gradients."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _OpDef:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


_OPS: dict[str, _OpDef] = {}


def register_op(kind: str, forward, backward) -> None:
    """Register a primitive.

    ``forward(*arrays, **attrs) -> (out, saved)`` and
    ``backward(grad_out, saved, *arrays) -> per-input grads`` (``None`` allowed).
    """
    _OPS[kind] = _OpDef(forward, backward)


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive op kind {kind!r}") from None
    inputs = [_as_tensor(t) for t in inputs]
    out_arr, saved = op.forward(*(t.data for t in inputs), **attrs)
    needs_grad = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, needs_grad)
    if needs_grad:
        tape = _active_tape()
        node = _Node(kind, inputs, id(out), op.backward, saved, tape)
        tape.nodes.append(node)
        out.node = node
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary --------------------------------------------------------


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, None


def _add_bwd(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b, None


def _sub_bwd(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b, None


def _mul_bwd(g, _, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, *, c):
    return a * c, c


def _scale_bwd(g, c, a):
    return (g * c,)


register_op("add", _add_fwd, _add_bwd)
register_op("sub", _sub_fwd, _sub_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("scale", _scale_fwd, _scale_bwd)


# matmul --------------------------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    if b.ndim == 2:
        # one GEMM over the flattened leading axes
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],)), None
    return np.matmul(a, b), None


def _matmul_bwd(g, _, a, b):
    if b.ndim == 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_op("matmul", _matmul_fwd, _matmul_bwd)


def _linear_fwd(x, w, b):
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes x{x.shape}, W{w.shape}, b{b.shape}")
    out = x.reshape(-1, x.shape[-1]) @ w
    out += b
    return out.reshape(x.shape[:-1] + (w.shape[1],)), None


def _linear_bwd(g, _, x, w, b):
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return (g2 @ w.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)


register_op("linear", _linear_fwd, _linear_bwd)


# shape ops -----------------------------------------------------------------


def _concat_fwd(*arrays, axis):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {arr.shape} on axis {axis}")
    sizes = [arr.shape[ax] for arr in arrays]
    return np.concatenate(arrays, axis=ax), (ax, sizes)


def _concat_bwd(g, saved, *arrays):
    ax, sizes = saved
    cuts = np.cumsum(sizes)[:-1]
    return np.split(g, cuts, axis=ax)


def _transpose_fwd(a, *, axes):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), tuple(axes)


def _transpose_bwd(g, axes, a):
    return (np.transpose(g, np.argsort(axes)),)


def _reshape_fwd(a, *, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None


def _reshape_bwd(g, _, a):
    return (g.reshape(a.shape),)


register_op("concat", _concat_fwd, _concat_bwd)
register_op("transpose", _transpose_fwd, _transpose_bwd)
register_op("reshape", _reshape_fwd, _reshape_bwd)


def _slice_fwd(a, *, index):
    try:
        return np.array(a[index]), index
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None


def _slice_bwd(g, index, a):
    full = np.zeros_like(a)
    np.add.at(full, index, g)
    return (full,)


register_op("slice", _slice_fwd, _slice_bwd)


# reductions ----------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _sum_fwd(a, *, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), (axis, keepdims)


def _sum_bwd(g, saved, a):
    axis, keepdims = saved
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)


def _mean_fwd(a, *, axis, keepdims):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(1, np.size(out))
    return out, (axis, keepdims, count)


def _mean_bwd(g, saved, a):
    axis, keepdims, count = saved
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)


register_op("sum", _sum_fwd, _sum_bwd)
register_op("mean", _mean_fwd, _mean_bwd)


# elementwise unary ---------------------------------------------------------


def _sigmoid_fwd(a):
    out = expit(a)
    return out, out


def _sigmoid_bwd(g, out, a):
    return (g * out * (1.0 - out),)


def _tanh_fwd(a):
    out = np.tanh(a)
    return out, out


def _tanh_bwd(g, out, a):
    return (g * (1.0 - out * out),)


def _relu_fwd(a):
    return np.maximum(a, 0.0), None


def _relu_bwd(g, _, a):
    return (g * (a > 0),)


def _leaky_fwd(a, *, slope):
    return np.where(a > 0, a, slope * a), slope


def _leaky_bwd(g, slope, a):
    return (g * np.where(a > 0, 1.0, slope),)


def _exp_fwd(a):
    out = np.exp(np.minimum(a, _EXP_CLIP))
    return out, out


def _exp_bwd(g, out, a):
    return (g * out * (a < _EXP_CLIP),)


def _abs_fwd(a):
    return np.abs(a), None


def _abs_bwd(g, _, a):
    return (g * np.sign(a),)


register_op("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register_op("tanh", _tanh_fwd, _tanh_bwd)
register_op("relu", _relu_fwd, _relu_bwd)
register_op("leaky_relu", _leaky_fwd, _leaky_bwd)
register_op("exp", _exp_fwd, _exp_bwd)
register_op("abs", _abs_fwd, _abs_bwd)


# softmax / masking / lookup ------------------------------------------------


def _softmax_fwd(a, *, axis):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return out, (out, axis)


def _softmax_bwd(g, saved, a):
    out, axis = saved
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _masked_fill_fwd(a, *, mask, value):
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not fit {a.shape}") from None
    full = np.broadcast_to(mask, a.shape)
    return np.where(full, value, a), full


def _masked_fill_bwd(g, full, a):
    return (np.where(full, 0.0, g),)


def _embedding_fwd(table, *, indices):
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    return table[indices], indices


def _embedding_bwd(g, indices, table):
    full = np.zeros_like(table)
    np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
    return (full,)


register_op("softmax", _softmax_fwd, _softmax_bwd)
register_op("masked_fill", _masked_fill_fwd, _masked_fill_bwd)
register_op("embedding", _embedding_fwd, _embedding_bwd)


# ---------------------------------------------------------------------------
# public functional API
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    return forward_op("matmul", [a, b])


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a 2-D weight and 1-D bias."""
    return forward_op("linear", [x, w, b])


def add(a, b) -> Tensor:
    return forward_op("add", [a, b])


def sub(a, b) -> Tensor:
    return forward_op("sub", [a, b])


def mul(a, b) -> Tensor:
    return forward_op("mul", [a, b])


def scale(a, c: float) -> Tensor:
    return forward_op("scale", [a], c=float(c))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    return forward_op("concat", list(tensors), axis=axis)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    return forward_op("transpose", [a], axes=None if axes is None else tuple(axes))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return forward_op("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("mean", [a], axis=axis, keepdims=keepdims)


def sigmoid(a) -> Tensor:
    return forward_op("sigmoid", [a])


def tanh(a) -> Tensor:
    return forward_op("tanh", [a])


def relu(a) -> Tensor:
    return forward_op("relu", [a])


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    return forward_op("leaky_relu", [a], slope=float(slope))


def exp(a) -> Tensor:
    return forward_op("exp", [a])


def abs(a) -> Tensor:  # noqa: A001
    return forward_op("abs", [a])


def softmax(a, axis: int = -1) -> Tensor:
    return forward_op("softmax", [a], axis=axis)


def masked_fill(a, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    return forward_op("masked_fill", [a], mask=np.asarray(mask, dtype=bool), value=float(value))


def reshape(a, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", [a], shape=tuple(shape))


def take_slice(a, index) -> Tensor:
    return forward_op("slice", [a], index=index)


def embedding(table, indices) -> Tensor:
    return forward_op("embedding", [table], indices=np.asarray(indices, dtype=np.int64))


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.ndim > 1 or loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss of shape [] or [1], got {loss.shape}")
    node = loss.node
    if node is None:
        raise TapeError("loss was not produced under an active tape (no recorded history)")
    tape = node.tape
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.nodes):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g, rec.saved, *(t.data for t in rec.inputs))
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
    tape.consumed = True
    for rec in tape.nodes:
        rec.inputs = rec.saved = None
    tape.nodes.clear()


def _scalar_value(out: Tensor) -> float:
    if out.ndim > 1 or out.size != 1:
        raise TapeError(f"grad_check: function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` is re-evaluated with ``x.data`` perturbed in place, so closures over
    ``x`` (e.g. a model parameter) work.  ``x.grad`` is restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.data = np.ascontiguousarray(x.data)
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape():
        out = f(x)
        _scalar_value(out)
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar_value(f(x))
            flat[i] = orig - eps
            fm = _scalar_value(f(x))
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0


def parameters_grad_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> dict[str, float]:
    """Run :func:`grad_check` on each parameter of a closure-based loss."""
    results = {}
    for i, p in enumerate(params):
        results[p.name or f"param{i}"] = grad_check(lambda _p: loss_fn(), p, eps)
    return results
