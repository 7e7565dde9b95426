"""Dense float tensors with an explicit reverse-mode gradient tape.

Typical use::

    with GradTape() as tape:
        loss = cross_entropy_logits(x @ w, labels)
    grads = tape.backward(loss)      # {w: dL/dw, ...}

Operations record onto the innermost active tape when at least one input
requires a gradient.  Outside a tape every op is a plain numpy computation.

Broadcasting is intentionally narrow: the operands of an elementwise binary
op must have equal shapes, or one must be a scalar, or the smaller shape
must be a trailing suffix of the larger one (the ``N x D  op  D`` bias
pattern).  Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_default_dtype = np.dtype(np.float32)
_tape_stack: list["GradTape"] = []
_tape_ids = itertools.count()


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for tensors built from Python data."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for the gradient tape."""

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self._node: Optional[tuple[int, int]] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap ``x`` as a constant tensor, adopting ``like``'s dtype when given."""
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


# ----------------------------------------------------------------------
# tape
# ----------------------------------------------------------------------
@dataclass
class _Node:
    op: str
    parents: tuple[Tensor, ...]
    out: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


@dataclass
class GradTape:
    """Ordered record of differentiable operations.

    A tape is single use: after :meth:`backward` it is consumed and must be
    :meth:`reset` before recording again.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False
    tape_id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False
        self.tape_id = next(_tape_ids)

    def _record(self, node: _Node) -> None:
        node.out._node = (self.tape_id, len(self.nodes))
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every ``requires_grad`` leaf on the tape.

        Returns a map from leaf tensor to gradient array of the leaf's shape.
        Leaves that were recorded but do not influence ``loss`` receive zeros.
        """
        if self.consumed:
            raise ContractError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node[0] != self.tape_id:
            raise ContractError("loss is detached from this tape (was it computed inside the tape context?)")

        end = loss._node[1]
        grads: dict[int, np.ndarray] = {end: np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}

        for idx in range(end, -1, -1):
            node = self.nodes[idx]
            g = grads.pop(idx, None)
            if g is None:
                for p in node.parents:
                    if p.requires_grad and p._node is None and p not in leaf_grads:
                        leaf_grads[p] = np.zeros_like(p.data)
                continue
            pdata = [p.data for p in node.parents]
            pgrads = node.vjp(g, node.out.data, *pdata)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.shape)
                if p._node is None:
                    if p in leaf_grads:
                        leaf_grads[p] = leaf_grads[p] + pg
                    else:
                        leaf_grads[p] = pg
                else:
                    j = p._node[1]
                    if j in grads:
                        grads[j] = grads[j] + pg
                    else:
                        grads[j] = pg

        self.consumed = True
        self.nodes.clear()
        return {p: np.array(g, dtype=p.dtype) for p, g in leaf_grads.items()}

    def replay(self) -> bool:
        """Re-run every recorded forward and compare bitwise with the recorded outputs."""
        if self.consumed:
            raise ContractError("cannot replay a consumed tape")
        for node in self.nodes:
            again = node.forward(*[p.data for p in node.parents])
            if again.shape != node.out.data.shape or again.tobytes() != node.out.data.tobytes():
                return False
        return True


def active_tape() -> Optional[GradTape]:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or math.prod(shape) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def _apply(op: str, forward: Callable[..., np.ndarray], vjp: Callable[..., tuple], *parents: Tensor) -> Tensor:
    out = Tensor(forward(*[p.data for p in parents]))
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        for p in parents:
            if p._node is not None and p._node[0] != tape.tape_id:
                raise ContractError(f"{op}: input belongs to a different tape; detach() it first")
        out.requires_grad = True
        tape._record(_Node(op, parents, out, forward, vjp))
    return out


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    if a == b or math.prod(a) == 1 and len(a) <= len(b) or math.prod(b) == 1 and len(b) <= len(a):
        return True
    small, big = (a, b) if len(a) < len(b) else (b, a)
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")
    return a, b


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _apply("add", np.add, lambda g, out, x, y: (g, g), a, b)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _apply("sub", np.subtract, lambda g, out, x, y: (g, -g), a, b)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _apply("mul", np.multiply, lambda g, out, x, y: (g * y, g * x), a, b)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    return _apply("div", np.divide, lambda g, out, x, y: (g / y, -g * out / y), a, b)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", np.negative, lambda g, out, x: (-g,), a)


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    return _apply(
        "power",
        lambda x: np.power(x, np.asarray(e, x.dtype)),
        lambda g, out, x: (g * np.asarray(e, x.dtype) * np.power(x, np.asarray(e - 1.0, x.dtype)),),
        a,
    )


def exp(a: Tensor) -> Tensor:
    return _apply("exp", np.exp, lambda g, out, x: (g * out,), a)


def log(a: Tensor) -> Tensor:
    return _apply("log", np.log, lambda g, out, x: (g / x,), a)


def relu(a: Tensor) -> Tensor:
    return _apply("relu", lambda x: np.maximum(x, np.zeros((), x.dtype)), lambda g, out, x: (g * (x > 0),), a)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))``."""
    cache = {}

    def fwd(x):
        c = np.asarray(_GELU_C, x.dtype)
        k = np.asarray(0.044715, x.dtype)
        t = np.tanh(c * (x + k * x * x * x))
        cache["t"] = t
        return np.asarray(0.5, x.dtype) * x * (1 + t)

    def vjp(g, out, x):
        c = np.asarray(_GELU_C, x.dtype)
        k = np.asarray(0.044715, x.dtype)
        half = np.asarray(0.5, x.dtype)
        t = cache["t"]
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * dt),)

    return _apply("gelu", fwd, vjp, a)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------
def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with numpy batch semantics.

    A 2-D right operand is shared across the leading batch axes of ``a``.
    """
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")

    def fwd(x, y):
        if y.ndim == 2 and x.ndim > 2:
            # one large GEMM instead of a loop over the batch axes
            return np.matmul(x.reshape(-1, x.shape[-1]), y).reshape(x.shape[:-1] + (y.shape[-1],))
        return np.matmul(x, y)

    def vjp(g, out, x, y):
        if y.ndim == 2 and x.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            gx = np.matmul(g2, y.T).reshape(x.shape)
            gy = np.matmul(x.reshape(-1, x.shape[-1]).T, g2)
        else:
            gx = np.matmul(g, _swap_last(y))
            gy = np.matmul(_swap_last(x), g)
        return gx, gy

    return _apply("matmul", fwd, vjp, a, b)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 axes, got shape {a.shape}")
        return _apply("transpose", _swap_last, lambda g, out, x: (_swap_last(g),), a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", lambda x: np.transpose(x, axes), lambda g, out, x: (np.transpose(g, inv),), a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _apply("reshape", lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(x.shape),), a)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``a`` along new leading axes (e.g. one class token per image)."""
    shape = tuple(shape)
    if shape[len(shape) - a.ndim:] != a.shape:
        raise DimensionError(f"broadcast_to: {a.shape} is not a trailing suffix of {shape}")
    return _apply(
        "broadcast_to",
        lambda x: np.ascontiguousarray(np.broadcast_to(x, shape)),
        lambda g, out, x: (_unbroadcast(g, x.shape),),
        a,
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    return _apply(
        "concat",
        lambda *xs: np.concatenate(xs, axis=ax),
        lambda g, out, *xs: tuple(np.split(g, splits, axis=ax)),
        *tensors,
    )


def getitem(a: Tensor, index) -> Tensor:
    """Numpy indexing (basic or integer-array); backward scatters with ``np.add.at``."""
    if isinstance(index, Tensor):
        index = index.data

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return _apply("getitem", lambda x: np.array(x[index]), vjp, a)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; out-of-range ids raise ``IndexError``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]}): min={ids.min()} max={ids.max()}")
    return getitem(weight, ids)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _apply(
        "sum",
        lambda x: np.asarray(np.sum(x, axis=axis, keepdims=keepdims)),
        lambda g, out, x: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),),
        a,
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g, out, x):
        n = x.size // max(out.size, 1)
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / np.asarray(n, x.dtype),)

    return _apply("mean", lambda x: np.asarray(np.mean(x, axis=axis, keepdims=keepdims)), vjp, a)


# ----------------------------------------------------------------------
# fused numerics
# ----------------------------------------------------------------------
def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _logsumexp_np(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _check_axis(a: Tensor, axis: int, op: str) -> int:
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DimensionError(f"{op}: empty axis {axis} in shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis, "softmax")
    return _apply(
        "softmax",
        lambda x: _softmax_np(x, ax),
        lambda g, out, x: (out * (g - np.sum(g * out, axis=ax, keepdims=True)),),
        a,
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis, "log_softmax")
    return _apply(
        "log_softmax",
        lambda x: x - np.expand_dims(_logsumexp_np(x, ax), ax),
        lambda g, out, x: (g - np.exp(out) * np.sum(g, axis=ax, keepdims=True),),
        a,
    )


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``logsumexp(row) - row[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_logits: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    rows = np.arange(n)

    def fwd(x):
        return np.asarray(np.mean(_logsumexp_np(x, 1) - x[rows, labels]), dtype=x.dtype)

    def vjp(g, out, x):
        p = _softmax_np(x, 1)
        p[rows, labels] -= 1
        return (p * (g / np.asarray(n, x.dtype)),)

    return _apply("cross_entropy", fwd, vjp, logits)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``* gain + bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} with gain {gain.shape} / bias {bias.shape}")

    def stats(v):
        mu = np.mean(v, axis=-1, keepdims=True)
        xc = v - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1 / np.sqrt(var + np.asarray(eps, v.dtype))
        return xc * inv, inv

    def fwd(v, w, b):
        xhat, _ = stats(v)
        return xhat * w + b

    def vjp(g, out, v, w, b):
        xhat, inv = stats(v)
        dxhat = g * w
        dx = inv * (dxhat - np.mean(dxhat, axis=-1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return dx, g * xhat, g

    return _apply("layer_norm", fwd, vjp, x, gain, bias)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm; rows with norm < eps become zero."""

    def norms(v):
        return np.sqrt(np.sum(v * v, axis=-1, keepdims=True))

    # written as ~(n < eps) so that NaN rows stay NaN instead of being zeroed
    def fwd(v):
        n = norms(v)
        keep = ~(n < eps)
        return np.where(keep, v / np.where(keep, n, 1), 0).astype(v.dtype)

    def vjp(g, out, v):
        n = norms(v)
        keep = ~(n < eps)
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(keep, (g - out * dot) / np.where(keep, n, 1), 0).astype(v.dtype),)

    return _apply("l2_normalize", fwd, vjp, x)


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)
