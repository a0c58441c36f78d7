"""
Activation quantization schemes
===============================

Per-token dynamic, per-tensor dynamic and per-tensor static scales, with and
without the two spike remedies.
"""

from spikelab import (find_prefix, gen_spike_model, optimize_threshold, perplexity, prepare_prefix_cache,
                      run_calibration, sample_corpus)
from spikelab.evaluation import bench_interleaved
from spikelab.quant import AQ1, AQ2, AQ3, ExecutionPlan, calibrate_static_scales

model = gen_spike_model(seed=0)
report = run_calibration(model, sample_corpus("synthetic", 64, 64, seed=1))
heldout = sample_corpus("synthetic", 64, 64, seed=2)

# static scales calibrated behind the prefix do not see the spike either
prefix = find_prefix(model, report)
cache = prepare_prefix_cache(model, prefix)
behind = run_calibration(model, report.sequences, prefix_cache=cache)
unq = optimize_threshold(model, report).exclusions.modules

schemes = {"AQ1": (AQ1, None, None), "AQ2": (AQ2, None, None),
           "AQ3": (AQ3, calibrate_static_scales(report), calibrate_static_scales(behind))}
fp = perplexity(model, ExecutionPlan.fp(), heldout, score_from=2)[0]
print(f"FP ppl {fp:.3f}")
print("scheme   plain   +exclusions   +prefix")
for name, (spec, static, static_behind) in schemes.items():
    plain = ExecutionPlan.w8a8(activation=spec, static_scales=static)
    excl = ExecutionPlan.w8a8(activation=spec, static_scales=static, exclude=unq)
    pref = ExecutionPlan.w8a8(activation=spec, static_scales=static_behind, prefix_cache=cache)
    row = [perplexity(model, p, heldout, score_from=2)[0] for p in (plain, excl, pref)]
    print(f"{name:6s} " + "  ".join(f"{v:10.3f}" for v in row))

plans = {n: ExecutionPlan.w8a8(activation=s, static_scales=st) for n, (s, st, _) in schemes.items()}
print("median latency (ms):", {k: round(v * 1e3, 3) for k, v in bench_interleaved(model, plans).items()})
