"""Max-median ratio scoring and threshold-based selection of unquantized modules."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModuleId
from .parallel import map_jobs
from .quant import ExecutionPlan


def max_median_ratio(scales):
    s = np.asarray(scales, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("max-median ratio of an empty scale list")
    med = np.median(s)
    if med <= 0:
        raise ValueError("median scale is zero; the ratio is undefined")
    return float(s.max() / med)


def module_ratios(report):
    return {m: max_median_ratio(st.pooled) for m, st in report.modules.items()}


@dataclass(frozen=True)
class ExclusionSet:
    alpha: float
    modules: frozenset
    ratios: dict
    provenance: str | None = None
    curve: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        expected = frozenset(m for m, r in self.ratios.items() if r > self.alpha)
        if frozenset(self.modules) != expected:
            raise ValueError("modules must be exactly those with ratio above alpha")
        object.__setattr__(self, "modules", frozenset(self.modules))

    def sorted_modules(self):
        return sorted(self.modules)

    def to_json(self):
        doc = {
            "alpha": "inf" if math.isinf(self.alpha) else self.alpha,
            "modules": [{"layer": m.layer, "kind": m.kind} for m in self.sorted_modules()],
            "ratios": [{"layer": m.layer, "kind": m.kind, "ratio": r} for m, r in sorted(self.ratios.items())],
            "provenance": self.provenance,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        alpha = math.inf if doc["alpha"] == "inf" else float(doc["alpha"])
        ratios = {ModuleId(e["layer"], e["kind"]): e["ratio"] for e in doc["ratios"]}
        modules = frozenset(ModuleId(e["layer"], e["kind"]) for e in doc["modules"])
        return cls(alpha, modules, ratios, doc.get("provenance"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def select_unquantized(ratios, alpha, provenance=None):
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return ExclusionSet(alpha, frozenset(m for m, r in ratios.items() if r > alpha), dict(ratios), provenance)


def candidate_alphas(ratios):
    """Sorted unique ratios, then infinity (quantize everything)."""
    return sorted(set(ratios.values())) + [math.inf]


@dataclass
class ThresholdSearch:
    alpha: float
    exclusions: ExclusionSet
    ppl_fp: float
    ppl_full: float
    curve: list  # (alpha, ppl, n_unquantized) for every evaluated candidate


def _accepts(ppl, n_unq, ppl_fp, ppl_full, n_modules):
    # normalized perplexity cost at or below the normalized module cost
    return (ppl - ppl_fp) / (ppl_full - ppl_fp) <= n_unq / n_modules


def optimize_threshold(model, report, corpus=None, plan=None, method="binary", curve=False,
                       seq_len=None, jobs=1):
    """Largest candidate alpha whose normalized perplexity stays under its normalized module cost.

    ``plan`` supplies the quantized configuration (default W8A8, dynamic per
    tensor); ``corpus`` defaults to the calibration samples. ``method`` is
    ``"binary"`` or ``"sweep"``; with ``curve=True`` every candidate is evaluated.
    """
    from .evaluation import perplexity

    if method not in ("binary", "sweep"):
        raise ValueError(f"unknown method {method!r}")
    if report.model_fingerprint != model.fingerprint():
        raise ValueError("calibration report does not belong to this model")
    corpus = report.sequences if corpus is None else corpus
    plan = plan or ExecutionPlan.w8a8()
    ratios = module_ratios(report)
    cands = candidate_alphas(ratios)
    n_modules = len(ratios)
    cache = {}

    def evaluate_at(i, inner_jobs):
        ex = select_unquantized(ratios, cands[i], report.model_fingerprint)
        return perplexity(model, plan.with_exclusions(ex.modules), corpus, seq_len, jobs=inner_jobs)[0]

    def ppl_at(i):
        if i not in cache:
            cache[i] = evaluate_at(i, jobs)
        return cache[i]

    ppl_fp = perplexity(model, ExecutionPlan.fp(), corpus, seq_len, jobs=jobs)[0]
    last = len(cands) - 1
    if method == "sweep" or curve:
        todo = list(range(len(cands)))
        cache.update(zip(todo, map_jobs(lambda i: evaluate_at(i, 1), todo, jobs)))
    ppl_full = ppl_at(last)

    def n_unq(i):
        return sum(r > cands[i] for r in ratios.values())

    if ppl_full <= ppl_fp:
        best = last
    elif method == "sweep":
        ok = [i for i in range(len(cands)) if _accepts(cache[i], n_unq(i), ppl_fp, ppl_full, n_modules)]
        best = max(ok) if ok else last
    else:
        # index 0 excludes everything above the smallest ratio; at infinity nothing is
        # excluded and the normalized cost is 1 > 0, so the predicate fails there
        lo, hi = 0, last
        if not _accepts(ppl_at(0), n_unq(0), ppl_fp, ppl_full, n_modules):
            lo = -1
        # invariant: predicate holds at lo (or lo == -1), fails at hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _accepts(ppl_at(mid), n_unq(mid), ppl_fp, ppl_full, n_modules):
                lo = mid
            else:
                hi = mid
        best = lo if lo >= 0 else last
    ex = select_unquantized(ratios, cands[best], report.model_fingerprint)
    pts = [(cands[i], cache[i], n_unq(i)) for i in sorted(cache)]
    return ThresholdSearch(cands[best], ex, ppl_fp, ppl_full, pts)


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "ppl", "n_unquantized"])
        for alpha, ppl, n in curve:
            w.writerow(["inf" if math.isinf(alpha) else repr(alpha), repr(ppl), n])
