"""Dense numeric kernels shared by the model, quantizer and metrics.

Arrays are stored as float32. Every kernel computes in float64 and rounds the
result back to float32, so accumulation is always wider than storage.
"""

import numpy as np
from scipy.special import erf, expit

STORAGE = np.float32
ACCUM = np.float64


def _finite(x, name):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{name} produced non-finite values")
    return x


def matmul(a, b):
    """Matrix product accumulated in float64.

    Accepts 2-D operands or stacks of matrices with identical leading dims.
    Accumulation is delegated to a single float64 GEMM call per operand pair,
    so results are reproducible for a given BLAS build and input shape.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ValueError(f"matmul expects matching ranks >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    c = np.matmul(a.astype(ACCUM, copy=False), b.astype(ACCUM, copy=False))
    with np.errstate(over="ignore"):
        c = c.astype(STORAGE)
    return _finite(c, "matmul")


def rmsnorm(x, gamma, eps=1e-6):
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    if x.shape[-1] != gamma.shape[-1] or gamma.ndim != 1:
        raise ValueError(f"rmsnorm: gamma {gamma.shape} does not match x {x.shape}")
    x64 = x.astype(ACCUM)
    ms = np.mean(x64 * x64, axis=-1, keepdims=True)
    if eps == 0:
        # zero rows stay zero instead of 0/0
        inv = np.where(ms > 0, 1.0 / np.sqrt(np.where(ms > 0, ms, 1.0)), 0.0)
    else:
        inv = 1.0 / np.sqrt(ms + eps)
    return _finite((x64 * inv * gamma).astype(STORAGE), "rmsnorm")


def silu(x):
    x64 = np.asarray(x, dtype=ACCUM)
    return x64 * expit(x64)


def gelu(x):
    """Exact GELU, x * Phi(x), using erf (not the tanh approximation)."""
    x64 = np.asarray(x, dtype=ACCUM)
    return x64 * 0.5 * (1.0 + erf(x64 / np.sqrt(2.0)))


_ACTIVATIONS = {"silu": silu, "gelu": gelu}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return _finite(fn(x).astype(STORAGE), kind)


def causal_softmax_rows(scores, offset=0):
    """Row softmax with a causal mask.

    Row ``t`` may attend to column ``j`` iff ``j <= t + offset``. Masked
    entries come out as exact zeros. Leading batch dims (heads) are allowed.
    """
    s = np.asarray(scores, dtype=ACCUM)
    if s.ndim < 2:
        raise ValueError("scores must have at least 2 dims")
    if offset < 0:
        raise ValueError("offset must be nonnegative")
    T, S = s.shape[-2:]
    allowed = np.arange(S)[None, :] <= (np.arange(T)[:, None] + offset)
    if not allowed.any(axis=1).all():
        raise ValueError("causal mask leaves a row with no visible positions")
    masked = np.where(allowed, s, -np.inf)
    masked = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(masked), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    return _finite(p.astype(STORAGE), "causal_softmax_rows")


def rope_frequencies(head_dim, theta):
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {head_dim}")
    return theta ** (-np.arange(0, head_dim, 2, dtype=ACCUM) / head_dim)


def rope_apply(x, positions, theta=10000.0):
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by ``pos * theta**(-2i/Dh)``.

    ``x`` has shape (T, H, Dh); ``positions`` holds one integer per row.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"rope_apply expects (T, H, Dh), got {x.shape}")
    T, _, dh = x.shape
    positions = np.asarray(positions)
    if positions.shape != (T,):
        raise ValueError(f"need {T} positions, got {positions.shape}")
    freqs = rope_frequencies(dh, theta)
    ang = positions.astype(ACCUM)[:, None] * freqs[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    x64 = x.astype(ACCUM)
    even, odd = x64[..., 0::2], x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return _finite(out.astype(STORAGE), "rope_apply")
