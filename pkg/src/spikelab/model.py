"""Pre-LN decoder-only transformer with GLU or plain feed-forward blocks.

Every block exposes the input activation of its four quantizable linear groups
(``qkv``, ``out``, ``gate_up``, ``down``). Sibling projections that consume the
same input are fused into one matrix and share one tap.
"""

import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .kernels import ACCUM, STORAGE
from .quant import ExecutionPlan, quantize_weight, quantized_linear, bmm_attention

FFN_KINDS = ("swiglu", "geglu", "plain")
MODULE_KINDS = ("qkv", "out", "gate_up", "down")
_ACT = {"swiglu": "silu", "geglu": "gelu", "plain": "silu"}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    vocab_size: int
    bos_id: int
    ffn_kind: str = "swiglu"
    norm_kind: str = "rmsnorm"
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    max_seq_len: int = 512

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary embeddings")
        if not 0 <= self.bos_id < self.vocab_size:
            raise ValueError("bos_id must be a valid token id")
        if self.ffn_kind not in FFN_KINDS:
            raise ValueError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.norm_kind != "rmsnorm":
            raise ValueError("only rmsnorm is implemented")

    @property
    def glu(self):
        return self.ffn_kind != "plain"

    @property
    def activation(self):
        return _ACT[self.ffn_kind]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModuleId(NamedTuple):
    layer: int
    kind: str

    def __str__(self):
        return f"L{self.layer}.{self.kind}"

    @classmethod
    def parse(cls, text):
        layer, kind = text.lstrip("L").split(".")
        return cls(int(layer), kind)


def module_ids(cfg):
    return [ModuleId(i, k) for i in range(cfg.n_layers) for k in MODULE_KINDS]


def weight_names(cfg):
    names = ["embed"]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        names += [p + "attn_norm", p + "wq", p + "wk", p + "wv", p + "wo", p + "ffn_norm"]
        if cfg.glu:
            names.append(p + "w_gate")
        names += [p + "w_up", p + "w_down"]
    return names + ["final_norm", "lm_head"]


def weight_shapes(cfg):
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embed": (V, D), "final_norm": (D,), "lm_head": (D, V)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({p + "attn_norm": (D,), p + "ffn_norm": (D,),
                       p + "wq": (D, D), p + "wk": (D, D), p + "wv": (D, D), p + "wo": (D, D),
                       p + "w_up": (D, F), p + "w_down": (F, D)})
        if cfg.glu:
            shapes[p + "w_gate"] = (D, F)
    return shapes


@dataclass
class KVCache:
    """Per-layer key/value states of already-processed positions."""

    keys: list
    values: list
    cached_len: int = 0
    full_precision: bool = True
    tokens: list | None = None

    @classmethod
    def empty(cls, cfg):
        shape = (0, cfg.n_heads, cfg.d_head)
        return cls([np.zeros(shape, STORAGE) for _ in range(cfg.n_layers)],
                   [np.zeros(shape, STORAGE) for _ in range(cfg.n_layers)])

    @property
    def n_layers(self):
        return len(self.keys)

    def copy(self):
        # stored arrays are never mutated, extending replaces them
        return KVCache(list(self.keys), list(self.values), self.cached_len, self.full_precision,
                       None if self.tokens is None else list(self.tokens))

    def nbytes(self):
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))

    def check(self, cfg):
        if self.n_layers != cfg.n_layers:
            raise ValueError("cache layer count does not match the model")
        for k, v in zip(self.keys, self.values):
            if k.shape != (self.cached_len, cfg.n_heads, cfg.d_head) or v.shape != k.shape:
                raise ValueError("cache tensors do not match the model geometry")


@dataclass
class ForwardTrace:
    logits: np.ndarray
    last_hidden: np.ndarray
    hidden_absmax: np.ndarray
    taps: dict = field(default_factory=dict)


def glu_combine(gu, kind, d_ff):
    """Hadamard product (GLU) or plain activation applied to fused gate|up output."""
    act = _ACT[kind]
    if kind == "plain":
        return kernels.activation(gu, act)
    gate, up = gu[:, :d_ff], gu[:, d_ff:]
    return (kernels.activation(gate, act).astype(ACCUM) * up).astype(STORAGE)


def glu_ffn(x, w_up, w_down, kind, w_gate=None, taps=None, layer=0):
    """Full-precision feed-forward block; records the down-projection input in ``taps``."""
    if kind == "plain":
        h = kernels.activation(kernels.matmul(x, w_up), _ACT[kind])
    else:
        if w_gate is None:
            raise ValueError("GLU feed-forward needs gate weights")
        fused = np.concatenate([w_gate, w_up], axis=1)
        h = glu_combine(kernels.matmul(x, fused), kind, w_up.shape[1])
    if taps is not None:
        taps[ModuleId(layer, "down")] = h
    return kernels.matmul(h, w_down)


class Model:
    """Immutable weights plus config; forward passes never mutate either."""

    def __init__(self, cfg, weights, meta=None):
        self.cfg = cfg
        shapes = weight_shapes(cfg)
        missing = set(shapes) - set(weights)
        if missing:
            raise ValueError(f"missing weights: {sorted(missing)[:5]}")
        self.weights = {}
        for name, shape in shapes.items():
            w = np.array(weights[name], dtype=STORAGE)
            if w.shape != tuple(shape):
                raise ValueError(f"{name}: expected shape {shape}, got {w.shape}")
            if not np.isfinite(w).all():
                raise ValueError(f"{name} contains non-finite values")
            w.setflags(write=False)
            self.weights[name] = w
        self.meta = dict(meta or {})
        self._fused = {}
        self._splits = {}
        D, F = cfg.d_model, cfg.d_ff
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            w = self.weights
            self._fused[ModuleId(i, "qkv")] = np.concatenate([w[p + "wq"], w[p + "wk"], w[p + "wv"]], 1)
            self._splits[ModuleId(i, "qkv")] = [D, 2 * D]
            self._fused[ModuleId(i, "out")] = w[p + "wo"]
            if cfg.glu:
                self._fused[ModuleId(i, "gate_up")] = np.concatenate([w[p + "w_gate"], w[p + "w_up"]], 1)
                self._splits[ModuleId(i, "gate_up")] = [F]
            else:
                self._fused[ModuleId(i, "gate_up")] = w[p + "w_up"]
            self._fused[ModuleId(i, "down")] = w[p + "w_down"]
        for k in self._fused:
            self._fused[k] = self._fused[k].astype(ACCUM)
            self._fused[k].setflags(write=False)
        self._qweights = {}
        self._fingerprint = None

    @property
    def module_ids(self):
        return module_ids(self.cfg)

    def module_weight(self, mid):
        return self._fused[mid]

    def quantized_weight(self, mid, spec):
        key = (mid, spec)
        if key not in self._qweights:
            self._qweights[key] = quantize_weight(self._fused[mid], spec, self._splits.get(mid))
        return self._qweights[key]

    def fingerprint(self):
        if self._fingerprint is None:
            from .container import to_bytes
            self._fingerprint = hashlib.sha256(to_bytes(self)).hexdigest()
        return self._fingerprint

    def _linear(self, mid, x, plan):
        mode = plan.mode(mid)
        w = self._fused[mid]
        if mode == "fp":
            return kernels.matmul(x, w)
        return quantized_linear(x, w, mode, plan.activation, plan.weight,
                                static_scale=plan.static_scale(mid),
                                qweight=self.quantized_weight(mid, plan.weight))

    def forward(self, tokens, cache=None, plan=None, taps=False):
        """Run the model over ``tokens``.

        With ``cache`` the tokens continue at position ``cache.cached_len`` and
        their keys/values are appended in place. ``taps`` is False, True, or a
        collection of ModuleIds whose input activations should be recorded.
        """
        cfg = self.cfg
        plan = plan if plan is not None else ExecutionPlan.fp()
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id outside the vocabulary")
        start = 0
        if cache is not None:
            cache.check(cfg)
            start = cache.cached_len
        T = tokens.size
        if start + T > cfg.max_seq_len:
            raise ValueError(f"sequence of {start + T} positions exceeds max_seq_len={cfg.max_seq_len}")
        if taps is True:
            wanted = set(self.module_ids)
        elif taps:
            wanted = set(taps)
        else:
            wanted = set()
        recorded = {}
        positions = start + np.arange(T)
        H, dh, F = cfg.n_heads, cfg.d_head, cfg.d_ff
        W = self.weights
        x = W["embed"][tokens].astype(STORAGE)
        hidden_absmax = np.zeros((cfg.n_layers, T), STORAGE)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            mid = ModuleId(i, "qkv")
            h = kernels.rmsnorm(x, W[p + "attn_norm"], cfg.norm_eps)
            if mid in wanted:
                recorded[mid] = h
            qkv = self._linear(mid, h, plan)
            q = kernels.rope_apply(qkv[:, :cfg.d_model].reshape(T, H, dh), positions, cfg.rope_theta)
            k = kernels.rope_apply(qkv[:, cfg.d_model:2 * cfg.d_model].reshape(T, H, dh), positions, cfg.rope_theta)
            v = qkv[:, 2 * cfg.d_model:].reshape(T, H, dh)
            if cache is not None:
                k = np.concatenate([cache.keys[i], k], axis=0)
                v = np.concatenate([cache.values[i], v], axis=0)
                cache.keys[i], cache.values[i] = k, v
            attn = bmm_attention(q, k, v, offset=start, quantize=plan.bmm).reshape(T, cfg.d_model)
            mid = ModuleId(i, "out")
            if mid in wanted:
                recorded[mid] = attn
            x = x + self._linear(mid, attn, plan)

            mid = ModuleId(i, "gate_up")
            h = kernels.rmsnorm(x, W[p + "ffn_norm"], cfg.norm_eps)
            if mid in wanted:
                recorded[mid] = h
            a = glu_combine(self._linear(mid, h, plan), cfg.ffn_kind, F)
            mid = ModuleId(i, "down")
            if mid in wanted:
                recorded[mid] = a
            x = x + self._linear(mid, a, plan)
            hidden_absmax[i] = np.abs(x).max(axis=1)
        if cache is not None:
            cache.cached_len = start + T
            if plan.default_mode != "fp" or plan.overrides or plan.exclude or plan.bmm:
                cache.full_precision = False
        logits = kernels.matmul(kernels.rmsnorm(x, W["final_norm"], cfg.norm_eps), W["lm_head"])
        return ForwardTrace(logits=logits, last_hidden=x, hidden_absmax=hidden_absmax, taps=recorded)


def forward(model, tokens, cache=None, plan=None, taps=False):
    return model.forward(tokens, cache=cache, plan=plan, taps=taps)


def build_kv_cache(model, tokens):
    """Full-precision cache over ``tokens`` (which must start with BOS)."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot build a cache from an empty token list")
    if tokens[0] != model.cfg.bos_id:
        raise ValueError("cached prefix must start with the BOS token")
    cache = KVCache.empty(model.cfg)
    model.forward(tokens, cache=cache, plan=ExecutionPlan.fp())
    cache.full_precision = True
    cache.tokens = [int(t) for t in tokens]
    return cache
