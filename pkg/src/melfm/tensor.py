"""Reverse-mode automatic differentiation over dense numpy arrays.

Each operation records its inputs and a backward closure on the produced
tensor; ``backward()`` replays the implicit tape in reverse topological
order, visiting every node exactly once and summing gradients at fan-out
points. Kernels are plain numpy; float64 is used for gradient checking,
float32 for training.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_NAN_CHECKS = False


def set_nan_checks(enabled: bool) -> None:
    """Globally toggle finiteness assertions after every primitive."""
    global _NAN_CHECKS
    _NAN_CHECKS = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        Topological order guarantees each node's backward closure fires once,
        after all of its consumers have contributed to its gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without explicit grad requires a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar used by probes and tests
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None] | None) -> Tensor:
    if _NAN_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by primitive op")
    out = Tensor(data)
    track = any(p.requires_grad or p._backward is not None for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape).astype(a.dtype, copy=False))
        _accumulate(b, _unbroadcast(grad, b.shape).astype(b.dtype, copy=False))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape).astype(a.dtype, copy=False))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape).astype(b.dtype, copy=False))

    return _make(out_data, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data * factor

    def backward(grad):
        _accumulate(a, grad * factor)

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product contracting the last axis of a with axis -2 of b.

    Leading axes broadcast as in numpy matmul.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def backward(grad):
        da = grad @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ grad
        _accumulate(a, _unbroadcast(da, a.shape))
        _accumulate(b, _unbroadcast(db, b.shape))

    return _make(out_data, (a, b), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(grad):
        _accumulate(a, np.transpose(grad, inverse))

    return _make(out_data, (a,), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(grad):
        _accumulate(a, grad.reshape(a.shape))

    return _make(out_data, (a,), backward)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) slicing; backward scatters into the source."""
    a = _as_tensor(a)
    out_data = a.data[index]

    def backward(grad):
        full = np.zeros_like(a.data)
        full[index] = grad
        _accumulate(a, full)

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * grad.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(part, grad[tuple(idx)])

    return _make(out_data, parts, backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=axis, keepdims=True)

    def backward(grad):
        inner = (grad * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (grad - inner))

    return _make(out_data, (a,), backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along one axis (no affine)."""
    a = _as_tensor(a)
    mean = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv_std

    def backward(grad):
        g_mean = grad.mean(axis=axis, keepdims=True)
        gy_mean = (grad * out_data).mean(axis=axis, keepdims=True)
        _accumulate(a, inv_std * (grad - g_mean - out_data * gy_mean))

    return _make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out_data = x * cdf

    def backward(grad):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        _accumulate(a, grad * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(grad):
        _accumulate(a, grad * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def swish(a) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward(grad):
        _accumulate(a, grad * (sig + a.data * sig * (1.0 - sig)))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(grad):
        _accumulate(a, grad * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(grad):
        _accumulate(a, grad * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: split in half along axis, first half gated by sigmoid of the second."""
    a = _as_tensor(a)
    n = a.data.shape[axis]
    if n % 2 != 0:
        raise ValueError(f"glu axis size must be even, got {n}")
    value, gate_in = np.split(a.data, 2, axis=axis)
    gate = 1.0 / (1.0 + np.exp(-gate_in))
    out_data = value * gate

    def backward(grad):
        d_value = grad * gate
        d_gate = grad * value * gate * (1.0 - gate)
        _accumulate(a, np.concatenate([d_value, d_gate], axis=axis))

    return _make(out_data, (a,), backward)


def conv1d(a, kernel, padding: str = "same") -> Tensor:
    """Depthwise 1-D convolution along axis -2.

    a: (..., T, C); kernel: (C, K) with odd K. Same-padding with zeros, so
    output length equals T.
    """
    a, kernel = _as_tensor(a), _as_tensor(kernel)
    if padding != "same":
        raise ValueError("only 'same' padding is supported")
    channels, k = kernel.shape
    if k % 2 != 1:
        raise ValueError(f"conv1d kernel length must be odd, got {k}")
    if a.data.shape[-1] != channels:
        raise ValueError(f"channel mismatch: input {a.data.shape[-1]}, kernel {channels}")
    half = k // 2
    pad_spec = [(0, 0)] * (a.data.ndim - 2) + [(half, half), (0, 0)]
    padded = np.pad(a.data, pad_spec)
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-2)
    out_data = np.einsum("...tck,ck->...tc", windows, kernel.data)

    def backward(grad):
        d_kernel = np.einsum(
            "nc,nck->ck", grad.reshape(-1, channels), windows.reshape(-1, channels, k)
        )
        g_padded = np.pad(grad, pad_spec)
        g_windows = np.lib.stride_tricks.sliding_window_view(g_padded, k, axis=-2)
        d_input = np.einsum("...tck,ck->...tc", g_windows, kernel.data[:, ::-1])
        _accumulate(a, d_input)
        _accumulate(kernel, d_kernel)

    return _make(out_data, (a, kernel), backward)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer ids; output shape ids.shape + (row_dim,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, table.data.shape[-1]))
        _accumulate(table, full)

    return _make(out_data, (table,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(grad):
        if axis is None:
            _accumulate(a, np.full_like(a.data, float(grad) / count))
        else:
            _accumulate(a, np.expand_dims(grad, axis) / count * np.ones_like(a.data))

    return _make(out_data, (a,), backward)


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def backward(grad):
        if axis is None:
            _accumulate(a, np.full_like(a.data, float(grad)))
        else:
            _accumulate(a, np.expand_dims(grad, axis) * np.ones_like(a.data))

    return _make(out_data, (a,), backward)


def cross_entropy(logits, target_ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over rows where mask is true.

    logits: (N, classes); target_ids: (N,) ints. mask=None means all rows.
    """
    logits = _as_tensor(logits)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    n_rows = logits.data.shape[0]
    if mask is None:
        mask = np.ones(n_rows, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy needs at least one unmasked row")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(n_rows), target_ids]
    out_data = np.asarray(-(picked[mask].sum()) / count, dtype=logits.dtype)

    def backward(grad):
        probs = np.exp(log_probs)
        probs[np.arange(n_rows), target_ids] -= 1.0
        probs *= (mask.astype(logits.dtype) * (float(grad) / count))[:, None]
        _accumulate(logits, probs)

    return _make(out_data, (logits,), backward)


def sigmoid_bce(logits, targets: np.ndarray) -> Tensor:
    """Mean per-element binary cross-entropy on logits (numerically stable)."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out_data = np.asarray(np.mean(np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))), dtype=logits.dtype)

    def backward(grad):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accumulate(logits, (sig - targets) * (float(grad) / x.size))

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking and optimization
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | Tensor,
    eps: float = 1e-4,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of the scalar f() against central differences.

    Checks every component of every parameter, or `sample` random components
    per parameter when set. Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8). Parameters should be float64.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        n = p.data.size
        if sample is None or sample >= n:
            indices = range(n)
        else:
            indices = rng.choice(n, size=sample, replace=False)
        for i in indices:
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            hi = float(f().data)
            p.data[idx] = orig - eps
            lo = float(f().data)
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(g[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: dict[str, dict[str, np.ndarray]],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step: int = 1,
) -> None:
    """One bias-corrected Adam update, in place on params and state.

    state maps parameter name to {"m": ..., "v": ...}; missing entries are
    created zero-initialized. `step` is 1-based.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        s = state.get(name)
        if s is None:
            s = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            state[name] = s
        s["m"] = beta1 * s["m"] + (1.0 - beta1) * g
        s["v"] = beta2 * s["v"] + (1.0 - beta2) * (g * g)
        m_hat = s["m"] / (1.0 - beta1 ** step)
        v_hat = s["v"] / (1.0 - beta2 ** step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
