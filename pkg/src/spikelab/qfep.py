"""Search a short full-precision prefix whose KV cache absorbs first-occurrence spikes."""

import json
from dataclasses import dataclass

import numpy as np

from .calibration import token_frequency
from .model import ModuleId, build_kv_cache
from .parallel import map_jobs

DEFAULT_TAU = 4.0
DEFAULT_POOL = 200


class QFePInapplicable(RuntimeError):
    """No candidate token spikes once and then stays quiet; a prefix cannot help."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PrefixResult:
    prefix: tuple
    target_module: ModuleId
    spike_ratio: float
    candidate_rank: int
    tau: float = DEFAULT_TAU
    provenance: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "prefix", tuple(int(t) for t in self.prefix))
        if not 2 <= len(self.prefix) <= 3:
            raise ValueError("prefix holds BOS, an optional context token and the candidate")
        if not self.spike_ratio > 1:
            raise ValueError("spike_ratio must exceed 1")

    @property
    def candidate(self):
        return self.prefix[-1]

    @property
    def context_token(self):
        return self.prefix[1] if len(self.prefix) == 3 else None

    def to_json(self, tokenizer=None):
        doc = {
            "prefix": list(self.prefix),
            "target_module": {"layer": self.target_module.layer, "kind": self.target_module.kind},
            "spike_ratio": self.spike_ratio,
            "candidate_rank": self.candidate_rank,
            "tau": self.tau,
            "provenance": self.provenance,
        }
        if tokenizer is not None:
            doc["prefix_text"] = repr(tokenizer.decode_bytes(self.prefix))
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        tm = doc["target_module"]
        return cls(tuple(doc["prefix"]), ModuleId(tm["layer"], tm["kind"]), doc["spike_ratio"],
                   doc["candidate_rank"], doc.get("tau", DEFAULT_TAU), doc.get("provenance"))

    def save(self, path, tokenizer=None):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json(tokenizer))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def target_module(report):
    """Module with the highest max-median ratio (first in module order on ties)."""
    from .qfem import module_ratios

    ratios = module_ratios(report)
    best = max(ratios.values())
    return next(m for m, r in ratios.items() if r == best), best


def find_candidate_tokens(report, k=3, min_ratio=DEFAULT_TAU):
    """Tokens ranked by their largest scale at the target module (ties by id).

    Raises QFePInapplicable when even the target module's ratio is below
    ``min_ratio``, i.e. the model shows no spikes to absorb.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    mid, ratio = target_module(report)
    if ratio < min_ratio:
        raise QFePInapplicable(f"highest max-median ratio is {ratio:.3g} at {mid}; no activation spikes")
    st = report.stats(mid)
    peak = {}
    for toks, sc in zip(st.tokens, st.scales):
        for t, s in zip(toks.tolist(), sc.tolist()):
            if t != report.bos_id and s > peak.get(t, -1.0):
                peak[t] = s
    ranked = sorted(peak, key=lambda t: (-peak[t], t))
    return ranked[:k]


def _reference_median(report, mid, candidates):
    st = report.stats(mid)
    toks = np.concatenate(st.tokens)
    sc = st.pooled
    keep = ~np.isin(toks, list(candidates)) & (toks != report.bos_id)
    return float(np.median(sc[keep] if keep.any() else sc))


def probe_scales(model, mid, probe):
    trace = model.forward(probe, taps=[mid])
    return np.abs(trace.taps[mid].astype(np.float64)).max(axis=1)


def search_prefix(model, report, candidates, context_pool, tau=DEFAULT_TAU, with_context=True,
                  tail=None, jobs=1):
    """Find [BOS, T, C] such that C spikes after T but a later C does not.

    Each (T, C) probe is ``[BOS, T, C, T, C]``; with ``tail`` the repeated
    ``[T, C]`` is replaced by those tokens and the quiet condition applies to
    all of them. Without context the probe is ``[BOS, C, C]``. Candidates are
    tried in rank order; the first with any passing context wins, choosing the
    context with the largest first/second scale ratio (ties by token id).
    """
    if not candidates:
        raise ValueError("no candidate tokens")
    if report.model_fingerprint != model.fingerprint():
        raise ValueError("calibration report does not belong to this model")
    mid, _ = target_module(report)
    med = _reference_median(report, mid, candidates)
    bos = model.cfg.bos_id
    tail = None if tail is None else [int(t) for t in tail]
    best_seen = 0.0

    def probe_for(t, c):
        head = [bos, t, c] if t is not None else [bos, c]
        rest = tail if tail is not None else ([t, c] if t is not None else [c])
        quiet = slice(len(head), None) if tail is not None else slice(-1, None)
        return head + rest, len(head) - 1, quiet

    for rank, c in enumerate(candidates):
        pool = [t for t in context_pool if t not in (c, bos)] if with_context else [None]

        def score(t):
            probe, first, quiet = probe_for(t, c)
            s = probe_scales(model, mid, probe)
            return s[first], s[quiet].max()

        results = map_jobs(score, pool, jobs)
        passing = []
        for t, (s1, s2) in zip(pool, results):
            best_seen = max(best_seen, s1 / s2)
            if s1 / med >= tau and s2 / med < tau / 2:
                passing.append((-(s1 / s2), -1 if t is None else t, t, s1 / s2))
        if passing:
            _, _, t, ratio = min(passing)
            prefix = (bos, t, c) if t is not None else (bos, c)
            return PrefixResult(prefix, mid, float(ratio), rank, tau, report.model_fingerprint)
    raise QFePInapplicable(
        f"no context makes candidates {list(candidates)} spike only once at {mid} "
        f"(best first/second ratio {best_seen:.3g})", best=best_seen)


def find_prefix(model, report, k=3, pool_size=DEFAULT_POOL, tau=DEFAULT_TAU, with_context=True,
                tail=None, jobs=1):
    cands = find_candidate_tokens(report, k, tau)
    pool = token_frequency(report, min(pool_size, len(report.freq)))
    return search_prefix(model, report, cands, pool, tau, with_context, tail, jobs)


def prepare_prefix_cache(model, result):
    prefix = result.prefix if isinstance(result, PrefixResult) else tuple(result)
    return build_kv_cache(model, prefix)


def eval_with_prefix(model, plan, corpus, result, seq_len=None, jobs=1):
    """Evaluate ``plan`` behind the prefix cache; each sequence's own BOS is dropped."""
    from .evaluation import evaluate

    cache = prepare_prefix_cache(model, result)
    return evaluate(model, plan.with_prefix(cache), corpus, seq_len, score_from=2, jobs=jobs)
