"""Simulated symmetric INT8 quantization and execution plans.

Integers live in float64 arrays. Products of two int8 grids summed over at most
2**15 terms stay below 2**53, so a float64 GEMM on integer-valued operands
reproduces exact integer accumulation.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import ACCUM, STORAGE

QMAX = 127
MAX_INNER_DIM = 2 ** 15

TARGETS = ("activation", "weight", "bmm")
GRANULARITIES = ("per_tensor", "per_token", "per_channel")
TIMINGS = ("dynamic", "static")
MODES = ("fp", "w8a8", "w8a16")


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    target: str
    granularity: str
    timing: str = "dynamic"
    bits: int = 8

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.timing not in TIMINGS:
            raise ValueError(f"unknown timing {self.timing!r}")
        if self.bits != 8:
            raise ValueError("only 8-bit quantization is supported")
        if self.target == "weight" and self.granularity == "per_token":
            raise ValueError("weights cannot be quantized per token")
        if self.target in ("activation", "bmm") and self.granularity == "per_channel":
            raise ValueError("activations cannot be quantized per channel")
        if self.target == "bmm" and (self.granularity, self.timing) != ("per_tensor", "dynamic"):
            raise ValueError("bmm operands use dynamic per-tensor scales")

    @property
    def symmetric(self):
        return True

    @property
    def label(self):
        return f"{self.granularity}/{self.timing}"


# activation schemes: dynamic per-token, dynamic per-tensor, static per-tensor
AQ1 = QuantSpec("activation", "per_token", "dynamic")
AQ2 = QuantSpec("activation", "per_tensor", "dynamic")
AQ3 = QuantSpec("activation", "per_tensor", "static")
W_PER_CHANNEL = QuantSpec("weight", "per_channel", "static")
W_PER_TENSOR = QuantSpec("weight", "per_tensor", "static")
BMM = QuantSpec("bmm", "per_tensor", "dynamic")

ACT_SCHEMES = {"per-token-dyn": AQ1, "per-tensor-dyn": AQ2, "per-tensor-static": AQ3}
WEIGHT_SCHEMES = {"per-channel": W_PER_CHANNEL, "per-tensor": W_PER_TENSOR}


def _positive(amax):
    # all-zero slices get scale 1.0 so they quantize to zeros
    return np.where(amax > 0, amax / QMAX, 1.0)


def absmax_scale(x, granularity, keepdims=False):
    """Symmetric absmax scale(s) ``absmax / 127``.

    per_tensor gives a float; per_token one scale per row of a 2-D input;
    per_channel one scale per output column of a (din, dout) weight.
    """
    x = np.asarray(x, dtype=ACCUM)
    if granularity == "per_tensor":
        amax = np.abs(x).max() if x.size else 0.0
        return float(_positive(amax))
    if x.ndim != 2:
        raise ValueError(f"{granularity} scales need a 2-D tensor, got {x.shape}")
    if granularity == "per_token":
        s = _positive(np.abs(x).max(axis=1))
        return s[:, None] if keepdims else s
    if granularity == "per_channel":
        s = _positive(np.abs(x).max(axis=0))
        return s[None, :] if keepdims else s
    raise ValueError(f"unknown granularity {granularity!r}")


def quantize_symmetric(x, scale):
    """Round ``x / scale`` to nearest (ties away from zero), clamp to [-127, 127]."""
    scale = np.asarray(scale, dtype=ACCUM)
    if np.any(scale <= 0):
        raise QuantizationError("quantization scale must be positive")
    v = np.asarray(x, dtype=ACCUM) / scale
    q = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(q, -QMAX, QMAX)


def dequantize(q, scale):
    q = np.asarray(q, dtype=ACCUM)
    if np.any(np.abs(q) > QMAX):
        raise QuantizationError("integer values outside [-127, 127]")
    return q * np.asarray(scale, dtype=ACCUM)


def quantize_weight(w, spec=W_PER_CHANNEL, splits=None):
    """Quantize a (din, dout) weight; returns integer grid and per-column scales.

    ``splits`` lists column boundaries of fused sibling projections; with a
    per-tensor spec each sibling gets its own scale.
    """
    w = np.asarray(w, dtype=ACCUM)
    if spec.target != "weight":
        raise ValueError("quantize_weight needs a weight QuantSpec")
    if spec.granularity == "per_channel":
        scales = absmax_scale(w, "per_channel")
    else:
        bounds = [0, *(splits or []), w.shape[1]]
        scales = np.empty(w.shape[1])
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            scales[lo:hi] = absmax_scale(w[:, lo:hi], "per_tensor")
    return quantize_symmetric(w, scales[None, :]), scales


def quantize_activation(x, spec, static_scale=None):
    """Quantize a (T, din) activation; returns integer grid and (T, 1) or scalar scale."""
    if spec.timing == "static":
        if static_scale is None:
            raise QuantizationError("static activation quantization needs a calibrated scale")
        s = float(static_scale)
    else:
        s = absmax_scale(x, spec.granularity, keepdims=True)
    return quantize_symmetric(x, s), s


def quantized_linear(x, weight, mode, act_spec=AQ2, weight_spec=W_PER_CHANNEL,
                     static_scale=None, qweight=None, splits=None):
    """``x @ weight`` under one of the execution modes fp, w8a8, w8a16.

    ``qweight`` may carry a precomputed ``(q, scales)`` pair for ``weight``.
    """
    if mode == "fp":
        return kernels.matmul(x, weight)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    qw, sw = qweight if qweight is not None else quantize_weight(weight, weight_spec, splits)
    if mode == "w8a16":
        return kernels.matmul(x, qw * sw[None, :])
    if weight.shape[0] > MAX_INNER_DIM:
        raise QuantizationError("inner dim too large for exact int32 accumulation")
    qx, sx = quantize_activation(x, act_spec, static_scale)
    acc = np.matmul(qx, qw)
    if np.ndim(sx) == 0:
        out = acc * (sx * sw)
    else:
        out = acc * sx * sw[None, :]
    return out.astype(STORAGE)


def bmm_attention(q, k, v, offset=0, quantize=False):
    """Scaled dot-product attention over heads with an optional INT8 BMM path.

    q: (T, H, Dh); k, v: (S, H, Dh) including any cached positions. With
    ``quantize`` both batched matmuls (q.k^T and probs.v) run on dynamically
    per-tensor quantized operands.
    """
    T, H, dh = q.shape
    qh = np.transpose(q, (1, 0, 2))
    kt = np.transpose(k, (1, 2, 0))
    vh = np.transpose(v, (1, 0, 2))
    inv = 1.0 / np.sqrt(dh)
    if quantize:
        iq, sq = quantize_activation(qh, BMM)
        ik, sk = quantize_activation(kt, BMM)
        scores = np.matmul(iq, ik) * (sq * sk * inv)
    else:
        scores = kernels.matmul(qh, kt) * np.float32(inv)
    probs = kernels.causal_softmax_rows(scores, offset)
    if quantize:
        ip, sp = quantize_activation(probs, BMM)
        iv, sv = quantize_activation(vh, BMM)
        out = (np.matmul(ip, iv) * (sp * sv)).astype(STORAGE)
    else:
        out = kernels.matmul(probs, vh)
    return np.transpose(out, (1, 0, 2))


def bmm_quantized_attention(q, k, v, flag=True, offset=0):
    return bmm_attention(q, k, v, offset=offset, quantize=flag)


def calibrate_static_scales(report, module_ids=None):
    """Static per-tensor scale per module: largest calibrated token scale / 127."""
    ids = list(report.modules) if module_ids is None else list(module_ids)
    out = {}
    for mid in ids:
        if mid not in report.modules:
            raise KeyError(f"calibration report has no statistics for {mid}")
        out[mid] = float(_positive(report.modules[mid].max_scale))
    return out


@dataclass(frozen=True)
class ExecutionPlan:
    """Binds an execution mode and quantization schemes to every module.

    Modules listed in ``exclude`` always run as w8a16 (weight-only), whatever
    the default mode.
    """

    default_mode: str = "fp"
    activation: QuantSpec = AQ2
    weight: QuantSpec = W_PER_CHANNEL
    overrides: dict = field(default_factory=dict)
    exclude: frozenset = frozenset()
    static_scales: dict | None = None
    bmm: bool = False
    prefix_cache: object = None

    def __post_init__(self):
        if self.default_mode not in MODES:
            raise ValueError(f"unknown mode {self.default_mode!r}")
        for mode in self.overrides.values():
            if mode not in MODES:
                raise ValueError(f"unknown mode {mode!r}")
        if self.activation.target != "activation" or self.weight.target != "weight":
            raise ValueError("plan needs an activation spec and a weight spec")
        if self.prefix_cache is not None and not self.prefix_cache.full_precision:
            raise ValueError("prefix cache must be built in full precision")
        object.__setattr__(self, "exclude", frozenset(self.exclude))

    @classmethod
    def fp(cls, **kw):
        return cls(default_mode="fp", **kw)

    @classmethod
    def w8a8(cls, activation=AQ2, weight=W_PER_CHANNEL, **kw):
        return cls(default_mode="w8a8", activation=activation, weight=weight, **kw)

    @classmethod
    def w8a16(cls, weight=W_PER_CHANNEL, **kw):
        return cls(default_mode="w8a16", weight=weight, **kw)

    def mode(self, mid):
        if mid in self.exclude:
            return "w8a16"
        return self.overrides.get(mid, self.default_mode)

    def static_scale(self, mid):
        if self.static_scales is None or mid not in self.static_scales:
            return None
        return self.static_scales[mid]

    def with_prefix(self, cache):
        return replace(self, prefix_cache=cache)

    def with_exclusions(self, modules):
        return replace(self, exclude=frozenset(modules))

    def describe(self):
        parts = [self.default_mode]
        if self.default_mode == "w8a8" or self.overrides:
            parts.append(f"act={self.activation.label}")
        if self.default_mode != "fp" or self.overrides or self.exclude:
            parts.append(f"weight={self.weight.granularity}")
        if self.overrides:
            parts.append(f"overrides={len(self.overrides)}")
        if self.exclude:
            parts.append(f"unquantized={len(self.exclude)}")
        if self.bmm:
            parts.append("bmm")
        if self.prefix_cache is not None:
            parts.append(f"prefix={self.prefix_cache.cached_len}")
        return " ".join(parts)
