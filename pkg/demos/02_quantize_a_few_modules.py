"""
Quantizing only a few modules
=============================

Rank modules by their max-median ratio and quantize (W8A8, dynamic per tensor)
the top, middle or bottom four while everything else stays in floating point.
"""

from spikelab import gen_spike_model, partial_quant_experiment, perplexity, run_calibration, sample_corpus
from spikelab.quant import ExecutionPlan

model = gen_spike_model(seed=0)
report = run_calibration(model, sample_corpus("synthetic", 64, 64, seed=1))
heldout = sample_corpus("synthetic", 64, 64, seed=2)

fp = perplexity(model, ExecutionPlan.fp(), heldout)[0]
print(f"{'FP':8s} ppl {fp:8.3f}")
for group in ("top4", "middle4", "bottom4"):
    res = partial_quant_experiment(model, report, group, heldout)
    mods = ", ".join(str(m) for m in res.modules)
    print(f"{group:8s} ppl {res.ppl:8.3f}   mse {res.mse:10.4g}   [{mods}]")
