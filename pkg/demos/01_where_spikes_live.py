"""
Where the spikes live
=====================

Generate a small SwiGLU model, calibrate it, and look at the token-wise
input scales of every linear module.
"""

import numpy as np

from spikelab import gen_spike_model, module_ratios, run_calibration, sample_corpus, token_scale_trace
from spikelab.synth import ToyTokenizer

model = gen_spike_model(seed=0)
corpus = sample_corpus("synthetic", n=64, seq_len=64, seed=1, spike_token_rate=0.5)
report = run_calibration(model, corpus)

# one max-median ratio per module; almost everything sits near 2
ratios = module_ratios(report)
for mid, r in sorted(ratios.items(), key=lambda kv: -kv[1])[:6]:
    print(f"{str(mid):12s} ratio {r:9.2f}")

# the residual stream is much calmer than the module inputs
print("largest hidden-state value per layer:", np.round(report.hidden.max(axis=1), 1))

# %% a single sample: one token dominates the whole sequence
target = max(ratios, key=ratios.get)
sample = next(i for i, s in enumerate(report.sequences) if (s == 10).sum() == 2)
trace = token_scale_trace(report, target, sample)
spikes = np.flatnonzero(trace.tokens == 10)
print(f"sample {sample}: newline at positions {spikes.tolist()}")
print("scales there:", np.round(trace.scales[spikes], 1), " median:", round(float(np.median(trace.scales)), 2))
print("text:", repr(ToyTokenizer().decode_bytes(trace.tokens)[:40]))
