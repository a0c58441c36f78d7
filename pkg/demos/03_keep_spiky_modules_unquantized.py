"""
Keeping spiky modules out of activation quantization
====================================================

Search the ratio threshold alpha; modules above it run weight-only (W8A16).
"""

import math

from spikelab import gen_spike_model, optimize_threshold, perplexity, run_calibration, sample_corpus
from spikelab.quant import ExecutionPlan

model = gen_spike_model(seed=0)
report = run_calibration(model, sample_corpus("synthetic", 64, 64, seed=1))

search = optimize_threshold(model, report, curve=True)
print(f"FP ppl {search.ppl_fp:.3f}, everything quantized {search.ppl_full:.3f}")
print(" alpha       ppl   unquantized")
for alpha, ppl, n in search.curve:
    a = "inf" if math.isinf(alpha) else f"{alpha:8.3f}"
    mark = "  <- chosen" if alpha == search.alpha else ""
    print(f"{a:>8s} {ppl:9.3f} {n:6d}{mark}")

heldout = sample_corpus("synthetic", 64, 64, seed=2)
plan = ExecutionPlan.w8a8(exclude=search.exclusions.modules)
print("held-out ppl with exclusions:", round(perplexity(model, plan, heldout)[0], 3))
