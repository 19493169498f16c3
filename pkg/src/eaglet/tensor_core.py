"""Dense float kernels shared by every module.

Tensors are plain ``numpy.ndarray`` objects, row-major. Activations and weights
are float32; the kernels preserve the input dtype so the gradient-check harness
can replay them in float64. No function mutates its inputs.
"""
from __future__ import annotations

import numpy as np

# tanh-approximation constants for gelu
GELU_C = 0.7978845608  # sqrt(2/pi), truncated
GELU_A = 0.044715


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Copy-free conversion to a contiguous float array with all dims >= 1."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"tensor dims must be >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray, reference: bool = False) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast).

    ``reference=True`` selects the naive loop, 2-D only.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if reference:
        return matmul_reference(a, b)
    return np.matmul(a, b)


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # i-t-j loop order; the innermost j loop is one vectorized row update,
    # accumulated in float64
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        row = out[i]
        for t in range(k):
            row += a64[i, t] * b64[t]
    return out.astype(np.result_type(a.dtype, b.dtype))


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match last dim of {x.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = 1.0 / np.sqrt(ms + eps)
    # eps == 0 with an all-zero row: define the row as zeros
    inv = np.where(np.isfinite(inv), inv, 0.0).astype(x.dtype)
    return x * inv * gain


def _check_trailing(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.shape != big.shape[big.ndim - small.ndim:]:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not trailing-dim compatible")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_trailing(a, b)
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_trailing(a, b)
    return a * b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def gelu(x: np.ndarray) -> np.ndarray:
    """0.5 x (1 + tanh(GELU_C (x + GELU_A x^3)))."""
    inner = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


_OPS = {"add": add, "mul": mul, "silu": silu, "gelu": gelu}


def elementwise(op: str, *args: np.ndarray) -> np.ndarray:
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)
