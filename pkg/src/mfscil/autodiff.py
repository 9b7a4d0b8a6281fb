"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` records the operations applied to it on an implicit tape
(the graph of ``_parents`` references). Gradients are only allocated for
tensors created with ``requires_grad=True``; everything else (frozen
weights, data constants) participates in the forward pass but receives
no gradient storage. Every operation validates that its output is
finite — NaN/Inf never propagates silently.

Default precision is float32; gradient-check suites construct float64
tensors throughout.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

RealArray = np.ndarray

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

# Large negative logit used to exclude masked attention positions. Kept
# finite so the output-finiteness check still holds.
MASKED_LOGIT = -1e30


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op}'")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the tape: an array value plus backward bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op="const"):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = _check_finite(arr, _op)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar node; visits each node once."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a binary-op operand pair, keeping scalars at the tensor dtype."""
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def grad(loss: Tensor, leaf: Tensor) -> np.ndarray:
    """Gradient of a scalar loss with respect to a traced leaf.

    A leaf the loss does not depend on yields zeros; a leaf that was
    never marked trainable is an error (it is not on the tape).
    """
    if not isinstance(leaf, Tensor) or not leaf.requires_grad:
        raise ValueError("leaf is not a traced (requires_grad) tensor")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("loss must be scalar")
    loss.backward()
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    return leaf.grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data, _parents=(a, b), _op="div")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), _parents=(a,), _op="sqrt")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out.data)

    out._backward = backward
    return out


def gelu(a) -> Tensor:
    """Tanh-form GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), _parents=(a,), _op="gelu")

    def backward(g):
        if a.requires_grad:
            d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
            a._accumulate(g * local)

    out._backward = backward
    return out


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T, _parents=(a,), _op="transpose")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    out._backward = backward
    return out


def concat_rows(a, b) -> Tensor:
    """Stack two rank-2 blocks vertically."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.concatenate([a.data, b.data], axis=0), _parents=(a, b), _op="concat_rows")
    na = a.data.shape[0]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:na])
        if b.requires_grad:
            b._accumulate(g[na:])

    out._backward = backward
    return out


def stack_rows(parts: list) -> Tensor:
    """Stack rank-1 tensors into the rows of a rank-2 tensor."""
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=0), _parents=tuple(parts), _op="stack_rows")

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(g[i])

    out._backward = backward
    return out


def take_row(a, index: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[index], _parents=(a,), _op="take_row")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    out._backward = backward
    return out


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[:, start:stop], _parents=(a,), _op="slice_cols")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

    out._backward = backward
    return out


def concat_cols(parts: list) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), _parents=tuple(parts), _op="concat_cols")
    splits = np.cumsum([p.data.shape[1] for p in parts])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=1)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                p._accumulate(piece)

    out._backward = backward
    return out


# -- reductions -----------------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), _parents=(a,), _op="sum")

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    out._backward = backward
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(), _parents=(a,), _op="mean")
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g / n))

    out._backward = backward
    return out


def dot(a, b) -> Tensor:
    """Inner product of two rank-1 tensors (scalar output)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot expects matching rank-1 operands, got {a.data.shape}, {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="dot")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out._backward = backward
    return out


def pick(a, indices) -> Tensor:
    """Select one column per row of a rank-2 tensor."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx], _parents=(a,), _op="pick")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            a._accumulate(full)

    out._backward = backward
    return out


# -- normalization and softmax family --------------------------------------


def softmax(a) -> Tensor:
    """Stable softmax along the last axis (max subtraction)."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError("softmax of empty input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, _parents=(a,), _op="softmax")

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - inner))

    out._backward = backward
    return out


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError("log_softmax of empty input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse, _parents=(a,), _op="log_softmax")
    y = np.exp(out.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - y * g.sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis, then apply the affine (gain, bias)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.shape[-1] != gain.data.shape[-1] or gain.data.shape != bias.data.shape:
        raise ValueError("layer_norm shape mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, _parents=(x, gain, bias), _op="layer_norm")
    n = x.data.shape[-1]

    def backward(g):
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    out._backward = backward
    return out


def normalize_rows(a, eps: float = 0.0) -> Tensor:
    """Scale each row of a rank-2 tensor to unit L2 norm."""
    a = as_tensor(a)
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms <= eps):
        raise NumericError("cannot normalize a zero-norm row")
    y = a.data / norms
    out = Tensor(y, _parents=(a,), _op="normalize_rows")

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=1, keepdims=True)
            a._accumulate((g - y * inner) / norms)

    out._backward = backward
    return out


def attention(q, k, v, mask=None) -> Tensor:
    """Scaled dot-product attention for a single head.

    mask is an optional boolean validity vector over key positions;
    invalid positions are excluded from the softmax.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.shape[1] != k.data.shape[1] or k.data.shape != v.data.shape:
        raise ValueError("attention shape mismatch")
    d = q.data.shape[1]
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        if not valid.any():
            raise ValueError("attention: all key positions masked")
        bias = np.where(valid, 0.0, MASKED_LOGIT).astype(q.data.dtype)
        scores = add(scores, bias)
    return matmul(softmax(scores), v)


def cosine_similarity(a, b):
    """Cosine similarity of two vectors; traced when given tensors.

    Returns a scalar Tensor for Tensor inputs and a plain float for
    ndarray inputs.
    """
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a, b = as_tensor(a), as_tensor(b)
        na = sqrt(dot(a, a))
        nb = sqrt(dot(b, b))
        if na.item() == 0.0 or nb.item() == 0.0:
            raise NumericError("cosine similarity of a zero-norm vector")
        return div(dot(a, b), mul(na, nb))
    a = np.asarray(a)
    b = np.asarray(b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity of a zero-norm vector")
    return float(a @ b / (na * nb))
