"""Calibration: token-wise absmax scales at every linear-module input."""

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .model import ModuleId
from .parallel import map_jobs


@dataclass
class ModuleScaleStats:
    """Token-wise input-activation scales of one module, kept per sample."""

    module: ModuleId
    scales: list
    tokens: list

    def __post_init__(self):
        for s, t in zip(self.scales, self.tokens, strict=True):
            if len(s) != len(t):
                raise ValueError(f"{self.module}: scales and tokens are misaligned")

    @property
    def pooled(self):
        return np.concatenate(self.scales) if self.scales else np.zeros(0)

    @property
    def max_scale(self):
        return float(self.pooled.max())

    @property
    def median_scale(self):
        # numpy's even-count median is the mean of the two middle values
        return float(np.median(self.pooled))


@dataclass
class CalibrationReport:
    model_fingerprint: str
    seed: int | None
    seq_len: int
    sequences: list
    modules: dict
    hidden: np.ndarray
    freq: dict
    bos_id: int
    prefix: list | None = None
    static_scales: dict | None = field(default=None)

    @property
    def n_samples(self):
        return len(self.sequences)

    def stats(self, module):
        try:
            return self.modules[module]
        except KeyError:
            raise KeyError(f"no calibration statistics for module {module}") from None

    def to_json(self):
        doc = {
            "model_fingerprint": self.model_fingerprint,
            "seed": self.seed,
            "seq_len": self.seq_len,
            "bos_id": self.bos_id,
            "prefix": self.prefix,
            "samples": [[int(t) for t in s] for s in self.sequences],
            "modules": [
                {"layer": m.layer, "kind": m.kind,
                 "scales": [[float(v) for v in s] for s in st.scales],
                 "tokens": [[int(v) for v in t] for t in st.tokens]}
                for m, st in self.modules.items()
            ],
            "hidden": [[float(v) for v in row] for row in self.hidden],
            "freq": {str(k): int(v) for k, v in sorted(self.freq.items())},
        }
        if self.static_scales is not None:
            doc["static_scales"] = [{"layer": m.layer, "kind": m.kind, "scale": float(s)}
                                    for m, s in self.static_scales.items()]
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        modules = {}
        for entry in doc["modules"]:
            mid = ModuleId(entry["layer"], entry["kind"])
            modules[mid] = ModuleScaleStats(
                mid,
                [np.asarray(s, dtype=np.float64) for s in entry["scales"]],
                [np.asarray(t, dtype=np.int64) for t in entry["tokens"]],
            )
        static = None
        if doc.get("static_scales") is not None:
            static = {ModuleId(e["layer"], e["kind"]): e["scale"] for e in doc["static_scales"]}
        return cls(
            model_fingerprint=doc["model_fingerprint"],
            seed=doc["seed"],
            seq_len=doc["seq_len"],
            sequences=[np.asarray(s, dtype=np.int64) for s in doc["samples"]],
            modules=modules,
            hidden=np.asarray(doc["hidden"], dtype=np.float64).reshape(len(doc["hidden"]), -1),
            freq={int(k): v for k, v in doc["freq"].items()},
            bos_id=doc["bos_id"],
            prefix=doc.get("prefix"),
            static_scales=static,
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _resolve_corpus(corpus, n_samples, seq_len, seed):
    if callable(corpus):
        return [np.asarray(s, dtype=np.int64) for s in corpus(n_samples, seq_len, seed)]
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus]
    return seqs if n_samples is None else seqs[:n_samples]


def run_calibration(model, corpus, n_samples=None, seq_len=None, seed=None, jobs=1, prefix_cache=None):
    """Feed BOS-prefixed samples through the FP model and record token-wise scales.

    ``corpus`` is either a sampler ``(n, seq_len, seed) -> sequences`` or a list of
    token sequences. With ``prefix_cache`` each sample's own BOS is dropped and
    the sample is run behind the cached prefix.
    """
    seqs = _resolve_corpus(corpus, n_samples, seq_len, seed)
    if not seqs:
        raise ValueError("calibration corpus is empty")
    bos = model.cfg.bos_id
    for s in seqs:
        if s.size == 0 or s[0] != bos:
            raise ValueError("every calibration sample must start with BOS")
        if prefix_cache is not None and s.size < 2:
            raise ValueError("samples behind a prefix need at least one token after BOS")

    def one(seq):
        toks = seq if prefix_cache is None else seq[1:]
        cache = prefix_cache.copy() if prefix_cache is not None else None
        trace = model.forward(toks, cache=cache, taps=True)
        scales = {m: np.abs(t).max(axis=1).astype(np.float64) for m, t in trace.taps.items()}
        return toks, scales, trace.hidden_absmax.astype(np.float64)

    results = map_jobs(one, seqs, jobs)
    mids = model.module_ids
    modules = {m: ModuleScaleStats(m, [r[1][m] for r in results], [r[0] for r in results]) for m in mids}
    hidden = np.concatenate([r[2] for r in results], axis=1)
    freq = Counter()
    for toks, _, _ in results:
        freq.update(int(t) for t in toks if t != bos)
    prefix = None
    if prefix_cache is not None:
        prefix = getattr(prefix_cache, "tokens", None)
    return CalibrationReport(
        model_fingerprint=model.fingerprint(),
        seed=seed,
        seq_len=int(max(s.size for s in seqs)) if seq_len is None else int(seq_len),
        sequences=seqs,
        modules=modules,
        hidden=hidden,
        freq=dict(freq),
        bos_id=bos,
        prefix=prefix,
    )


class TokenTrace(NamedTuple):
    tokens: np.ndarray
    scales: np.ndarray
    argmax: int


def token_scale_trace(report, module, sample_index):
    """Token ids and scales of one sample at one module; argmax ties go to the first token."""
    st = report.stats(module)
    if not 0 <= sample_index < len(st.scales):
        raise IndexError(f"sample {sample_index} out of range")
    scales = st.scales[sample_index]
    return TokenTrace(st.tokens[sample_index], scales, int(np.argmax(scales)))


def token_frequency(report, top_k):
    """Observed tokens ranked by count (descending), ties by token id."""
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    ranked = sorted(report.freq.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:top_k]]


def write_summary_csv(report, path, ratios=None):
    """Per-module max / median / max-median ratio."""
    from .qfem import max_median_ratio

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "kind", "max", "median", "ratio"])
        for m, st in report.modules.items():
            r = ratios[m] if ratios is not None else max_median_ratio(st.pooled)
            w.writerow([m.layer, m.kind, repr(st.max_scale), repr(st.median_scale), repr(r)])


def write_layer_csv(report, path):
    """Per-layer maxima of every module input and of the residual stream."""
    n_layers = report.hidden.shape[0]
    kinds = sorted({m.kind for m in report.modules}, key=["qkv", "out", "gate_up", "down"].index)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", *kinds, "hidden"])
        for i in range(n_layers):
            row = [report.modules[ModuleId(i, k)].max_scale for k in kinds]
            w.writerow([i, *map(repr, row), repr(float(report.hidden[i].max()))])


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "token", "scale"])
        for i, (t, s) in enumerate(zip(trace.tokens, trace.scales)):
            w.writerow([i, int(t), repr(float(s))])
