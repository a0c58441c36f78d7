"""Perplexity, last-hidden MSE, the partial-quantization experiment and benchmarks."""

import csv
import gc
import json
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax

from .parallel import map_jobs
from .quant import ExecutionPlan

GROUPS = ("top4", "middle4", "bottom4")


@dataclass
class EvalResult:
    ppl: float
    tokens_evaluated: int
    plan: str
    mse: float | None = None
    modules: list = field(default_factory=list)
    note: str | None = None
    latency_s: float | None = None
    latencies_s: list | None = None
    peak_bytes: int | None = None

    def to_dict(self):
        d = asdict(self)
        d["modules"] = [str(m) for m in self.modules]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _windows(corpus, seq_len, bos):
    """Split sequences longer than ``seq_len`` into non-overlapping BOS-led windows."""
    out = []
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size < 2 or seq[0] != bos:
            raise ValueError("evaluation sequences must start with BOS and hold at least one target")
        if seq_len is None or seq.size <= seq_len:
            out.append(seq)
            continue
        body = seq[1:]
        step = seq_len - 1
        for i in range(0, body.size, step):
            chunk = body[i:i + step]
            out.append(np.concatenate([[bos], chunk]))
    if not out:
        raise ValueError("evaluation corpus is empty")
    return out


def run_plan(model, plan, seq):
    """Forward ``seq`` under ``plan``; returns (trace, original index of row 0).

    Behind a prefix cache the sequence's own BOS is dropped, so row 0 then
    belongs to original position 1.
    """
    if plan.prefix_cache is None:
        return model.forward(seq, plan=plan), 0
    if seq.size < 2:
        raise ValueError("sequence has no tokens after BOS")
    return model.forward(seq[1:], cache=plan.prefix_cache.copy(), plan=plan), 1


def _seq_nll(model, plan, seq, score_from):
    trace, first = run_plan(model, plan, seq)
    logp = log_softmax(trace.logits.astype(np.float64), axis=1)
    # row r predicts original position first + r + 1
    targets = np.arange(first + 1, seq.size)
    keep = (targets >= score_from) & (seq[targets] != model.cfg.bos_id)
    rows = targets[keep] - first - 1
    return float(-logp[rows, seq[targets[keep]]].sum()), int(keep.sum())


def perplexity(model, plan, corpus, seq_len=None, score_from=1, jobs=1):
    """exp(mean NLL) over predicted positions; BOS targets and targets before ``score_from`` are skipped."""
    seqs = _windows(corpus, seq_len, model.cfg.bos_id)
    parts = map_jobs(lambda s: _seq_nll(model, plan, s, score_from), seqs, jobs)
    n = sum(c for _, c in parts)
    if n == 0:
        raise ValueError("no scorable targets in corpus")
    return float(np.exp(sum(v for v, _ in parts) / n)), n


def evaluate(model, plan, corpus, seq_len=None, score_from=1, jobs=1):
    ppl, n = perplexity(model, plan, corpus, seq_len, score_from, jobs)
    return EvalResult(ppl=ppl, tokens_evaluated=n, plan=plan.describe())


def last_hidden_mse(model, ref_plan, test_plan, corpus, seq_len=None, jobs=1):
    """Per-element mean squared difference of final-block outputs over shared positions."""
    seqs = _windows(corpus, seq_len, model.cfg.bos_id)

    def one(seq):
        a, fa = run_plan(model, ref_plan, seq)
        b, fb = run_plan(model, test_plan, seq)
        start = max(fa, fb)
        ha = a.last_hidden[start - fa:].astype(np.float64)
        hb = b.last_hidden[start - fb:].astype(np.float64)
        return float(((ha - hb) ** 2).sum()), ha.size

    parts = map_jobs(one, seqs, jobs)
    return sum(s for s, _ in parts) / sum(n for _, n in parts)


def rank_modules(ratios):
    """Modules by ratio, descending; ties by layer then module order."""
    order = {"qkv": 0, "out": 1, "gate_up": 2, "down": 3}
    return sorted(ratios, key=lambda m: (-ratios[m], m.layer, order[m.kind]))


def select_group(ratios, group):
    ranked = rank_modules(ratios)
    n = len(ranked)
    size = 4 if n >= 12 else max(1, n // 3)
    if group == "top4":
        return ranked[:size]
    if group == "bottom4":
        return ranked[n - size:]
    if group == "middle4":
        start = (n - size) // 2
        return ranked[start:start + size]
    raise ValueError(f"unknown group {group!r}; expected one of {GROUPS}")


def partial_quant_experiment(model, report, group, corpus, seq_len=None, jobs=1):
    """Quantize one ratio-ranked group (W8A8, dynamic per-tensor) and keep the rest FP."""
    from .qfem import module_ratios

    modules = select_group(module_ratios(report), group)
    plan = ExecutionPlan.fp(overrides={m: "w8a8" for m in modules})
    res = evaluate(model, plan, corpus, seq_len, jobs=jobs)
    res.mse = last_hidden_mse(model, ExecutionPlan.fp(), plan, corpus, seq_len, jobs)
    res.modules = modules
    if len(modules) != 4:
        res.note = f"only {len(model.module_ids)} modules; groups hold {len(modules)}"
    return res


def bench(model, plan, seq_len=64, repetitions=5, seed=0):
    """Median wall-clock per forward over a fixed random sequence, plus peak traced memory.

    Timings run single-threaded; one warm-up forward is excluded.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be at least 3")
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    seq = np.concatenate([[cfg.bos_id], rng.integers(0, cfg.bos_id, seq_len - 1)])
    if plan.prefix_cache is not None:
        seq = seq[1:]

    def once():
        cache = plan.prefix_cache.copy() if plan.prefix_cache is not None else None
        return model.forward(seq, cache=cache, plan=plan)

    with _quiet_timing():
        ref = once().logits
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            out = once().logits
            times.append(time.perf_counter() - t0)
            if not np.array_equal(out, ref):
                raise RuntimeError("forward is not deterministic across repetitions")
        tracemalloc.start()
        once()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return EvalResult(ppl=float("nan"), tokens_evaluated=int(seq.size), plan=plan.describe(),
                      latency_s=float(np.median(times)), latencies_s=times, peak_bytes=int(peak))


def bench_interleaved(model, plans, seq_len=64, repetitions=15, seed=0):
    """Median latency per named plan, timing the plans round-robin so drift hits all equally."""
    if repetitions < 3:
        raise ValueError("repetitions must be at least 3")
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    seq = np.concatenate([[cfg.bos_id], rng.integers(0, cfg.bos_id, seq_len - 1)])
    times = {name: [] for name in plans}
    with _quiet_timing():
        for plan in plans.values():
            model.forward(seq, plan=plan)
        for _ in range(repetitions):
            for name, plan in plans.items():
                t0 = time.perf_counter()
                model.forward(seq, plan=plan)
                times[name].append(time.perf_counter() - t0)
    return {name: float(np.median(t)) for name, t in times.items()}


class _quiet_timing:
    """Pin BLAS to one thread (when threadpoolctl is available) and pause the GC, as timeit does."""

    def __enter__(self):
        self._gc = gc.isenabled()
        gc.collect()
        gc.disable()
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            self._ctx = None
            return self
        self._ctx = threadpool_limits(1)
        return self

    def __exit__(self, *exc):
        if self._gc:
            gc.enable()
        if self._ctx is not None:
            self._ctx.unregister()


def write_results_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "plan", "ppl", "mse", "tokens", "latency_s", "peak_bytes"])
        for name, r in results.items():
            w.writerow([name, r.plan, repr(r.ppl), "" if r.mse is None else repr(r.mse),
                        r.tokens_evaluated, "" if r.latency_s is None else repr(r.latency_s),
                        "" if r.peak_bytes is None else r.peak_bytes])
