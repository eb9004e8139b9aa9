"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every op records its inputs and a backward closure on the output node;
`backward(loss)` topologically sorts the recorded graph and accumulates
gradients into every reachable tensor with ``requires_grad``. The op set is
exactly what the codec and the language model need, nothing more.

Training runs in 32-bit; gradient checking switches the whole module to
64-bit via `precision("float64")` so finite differences are trustworthy.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .. import kernels
from ..errors import NumericalError, ValidationError

_DTYPE = np.float32

_GELU_C = 0.044715
_GELU_S = float(np.sqrt(2.0 / np.pi))


def set_dtype(name: str) -> None:
    """Set the dtype newly created tensors use: "float32" or "float64"."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValidationError(f"unsupported dtype {name!r}")
    _DTYPE = np.float32 if name == "float32" else np.float64


def active_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextmanager
def precision(name: str):
    """Temporarily switch the active dtype (used by gradient checks)."""
    prev = "float32" if _DTYPE is np.float32 else "float64"
    set_dtype(name)
    try:
        yield
    finally:
        set_dtype(prev)


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_backward_ran")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), backward_fn=None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn
        self._backward_ran = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # arithmetic sugar; scalars stay python floats so f32 arrays do not upcast
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else constant(np.asarray(other, dtype=self.data.dtype)))

    def __sub__(self, other):
        o = other if isinstance(other, Tensor) else constant(np.asarray(other, dtype=self.data.dtype))
        return add(self, mul_scalar(o, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ValidationError("tensor/tensor division is not part of the op set")
        return mul_scalar(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor in the active dtype."""
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Leaf tensor that never receives a gradient; dtype is left as given."""
    return Tensor(np.asarray(data), requires_grad=False)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError("matmul needs rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValidationError(f"matmul inner-dim mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data
    out = _result(out_data, (a, b), None)

    def back():
        g = out.grad
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out._backward_fn = back
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data, (a, b), None)

    def back():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out._backward_fn = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data, (a, b), None)

    def back():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward_fn = back
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * s, (a,), None)

    def back():
        _accum(a, out.grad * s)

    out._backward_fn = back
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), (a,), None)

    def back():
        _accum(a, out.grad * (a.data > 0))

    out._backward_fn = back
    return out


def gelu(a: Tensor) -> Tensor:
    # tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    x = a.data
    inner = _GELU_S * (x + _GELU_C * x * x * x)
    t = np.tanh(inner)
    out = _result(0.5 * x * (1.0 + t), (a,), None)

    def back():
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_S * (1.0 + 3.0 * _GELU_C * x * x)
        _accum(a, out.grad * d)

    out._backward_fn = back
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)
    _ensure_finite(p, "softmax")
    out = _result(p, (a,), None)

    def back():
        g = out.grad
        _accum(a, p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    out._backward_fn = back
    return out


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Attention softmax: (B, R, C) scores with a shared (R, C) admissibility mask."""
    if scores.data.ndim != 3 or mask.shape != scores.data.shape[1:]:
        raise ValidationError(
            f"masked_softmax expects (B,R,C) scores with (R,C) mask, got {scores.data.shape} / {mask.shape}")
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if not mask.any(axis=1).all():
        raise ValidationError("attention mask has a row with no allowed positions")
    p = kernels.masked_softmax(scores.data, mask)
    _ensure_finite(p, "masked_softmax")
    out = _result(p, (scores,), None)

    def back():
        _accum(scores, kernels.masked_softmax_grad(p, np.ascontiguousarray(out.grad), mask))

    out._backward_fn = back
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine terms;
    compose with mul/add for scale and shift)."""
    x = a.data
    if x.ndim < 2:
        raise ValidationError("layer_norm needs rank >= 2 input")
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    y2, _, rstd = kernels.layer_norm(flat, eps)
    out = _result(y2.reshape(x.shape), (a,), None)

    def back():
        dy = np.ascontiguousarray(out.grad.reshape(flat.shape))
        dx = kernels.layer_norm_grad(dy, y2, rstd)
        _accum(a, dx.reshape(x.shape))

    out._backward_fn = back
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("embedding ids must be integers")
    if table.data.ndim != 2:
        raise ValidationError("embedding table must be rank 2")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValidationError(
            f"embedding id out of range [0, {table.data.shape[0]}): min={ids.min()} max={ids.max()}")
    out = _result(table.data[ids], (table,), None)

    def back():
        dtable = np.zeros_like(table.data)
        kernels.scatter_add_rows(dtable, ids.reshape(-1).astype(np.int64),
                                 np.ascontiguousarray(out.grad.reshape(-1, table.data.shape[1])))
        _accum(table, dtable)

    out._backward_fn = back
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]

    def back():
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, out.grad[tuple(sl)])

    out._backward_fn = back
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start and start + length <= n and length >= 0):
        raise ValidationError(f"narrow [{start}, {start + length}) out of bounds for axis of {n}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _result(a.data[sl], (a,), None)

    def back():
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        _accum(a, g)

    out._backward_fn = back
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), None)

    def back():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward_fn = back
    return out


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = _result(np.transpose(a.data, axes), (a,), None)
    inverse = tuple(np.argsort(axes))

    def back():
        _accum(a, np.transpose(out.grad, inverse))

    out._backward_fn = back
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def back():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out._backward_fn = back
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul_scalar(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValidationError("sqrt of negative input")
    r = np.sqrt(a.data)
    out = _result(r, (a,), None)

    def back():
        _accum(a, _ensure_finite(out.grad * (0.5 / r), "sqrt backward"))

    out._backward_fn = back
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValidationError("log needs strictly positive input")
    out = _result(np.log(a.data), (a,), None)

    def back():
        _accum(a, out.grad / a.data)

    out._backward_fn = back
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, constant(keep))


def cross_entropy(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where loss_mask == 1.

    logits (..., V), integer targets (...), loss_mask (...) of zeros/ones.
    """
    targets = np.asarray(targets)
    loss_mask = np.asarray(loss_mask)
    if logits.data.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise ValidationError(
            f"cross_entropy shape mismatch: logits {logits.data.shape}, "
            f"targets {targets.shape}, mask {loss_mask.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ValidationError("targets must be integers")
    if not np.isin(loss_mask, (0, 1)).all():
        raise ValidationError("loss_mask entries must be 0 or 1")
    vocab = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValidationError(f"target id out of range [0, {vocab})")
    count = float(loss_mask.sum())
    if count == 0:
        raise ValidationError("loss_mask selects no positions")

    x = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    msk = loss_mask.reshape(-1).astype(x.dtype)
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1))
    logp_t = z[np.arange(x.shape[0]), tgt] - lse
    loss_val = -(logp_t * msk).sum() / count
    _ensure_finite(np.asarray(loss_val), "cross_entropy")
    out = _result(np.asarray(loss_val, dtype=x.dtype).reshape(()), (logits,), None)

    def back():
        p = np.exp(z - lse[:, None])
        p[np.arange(x.shape[0]), tgt] -= 1.0
        p *= (msk / count)[:, None]
        g = float(out.grad.reshape(()))
        _accum(logits, (p * g).reshape(logits.data.shape))

    out._backward_fn = back
    return out


# ---------------------------------------------------------------------------
# backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor that
    requires a gradient. A second call on the same recorded loss is an error."""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise ValidationError("backward already ran for this loss; run a new forward pass first")
    if not np.isfinite(loss.data.reshape(())):
        raise NumericalError("loss is not finite")
    loss._backward_ran = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward_fn is not None:
            node._backward_fn()
            if node is not loss:
                # intermediate grads are fully consumed once propagated
                node.grad = None
