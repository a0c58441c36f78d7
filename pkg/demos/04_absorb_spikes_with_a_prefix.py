"""
Absorbing the spike with a cached prefix
========================================

The spike only fires the first time the newline token appears. A three-token
prefix that already contains it, cached in full precision, leaves later
newlines quiet, so activations quantize cleanly.
"""

from spikelab import (eval_with_prefix, find_prefix, gen_spike_model, max_median_ratio, perplexity,
                      prepare_prefix_cache, run_calibration, sample_corpus)
from spikelab.quant import ExecutionPlan

model = gen_spike_model(seed=0)
report = run_calibration(model, sample_corpus("synthetic", 64, 64, seed=1))

prefix = find_prefix(model, report)
print("prefix:", list(prefix.prefix), "at", prefix.target_module, f"first/second scale {prefix.spike_ratio:.1f}")

fresh = sample_corpus("synthetic", 100, 64, seed=3, spike_token_rate=1.0)
cache = prepare_prefix_cache(model, prefix)
mid = prefix.target_module
print("ratio without prefix:", round(max_median_ratio(run_calibration(model, fresh).stats(mid).pooled), 1))
print("ratio behind prefix: ", round(max_median_ratio(run_calibration(model, fresh, prefix_cache=cache).stats(mid).pooled), 2))

fp = perplexity(model, ExecutionPlan.fp(), fresh, score_from=2)[0]
plain = perplexity(model, ExecutionPlan.w8a8(), fresh, score_from=2)[0]
behind = eval_with_prefix(model, ExecutionPlan.w8a8(), fresh, prefix).ppl
print(f"ppl FP {fp:.3f} | W8A8 {plain:.3f} | W8A8 behind prefix {behind:.3f}")
