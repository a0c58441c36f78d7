"""Acceptance criteria, one test per criterion.

Each criterion prints a single PASS/FAIL line (shown in the terminal summary
under pytest, or directly with ``python tests/test_acceptance.py``).
"""

import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from spikelab.calibration import run_calibration
from spikelab.cli import main as cli_main
from spikelab.evaluation import bench_interleaved, last_hidden_mse, partial_quant_experiment, perplexity
from spikelab.model import build_kv_cache
from spikelab.qfem import max_median_ratio, module_ratios, optimize_threshold
from spikelab.qfep import QFePInapplicable, eval_with_prefix, find_prefix, prepare_prefix_cache
from spikelab.quant import AQ1, AQ2, AQ3, ExecutionPlan, absmax_scale, calibrate_static_scales, dequantize
from spikelab.quant import quantize_activation, quantize_symmetric
from spikelab.synth import SpikeConfig, gen_spike_model, sample_corpus

RESULTS = []
TAU = 4.0


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def model():
    return gen_spike_model(seed=0)


@pytest.fixture(scope="module")
def calib(model):
    return run_calibration(model, sample_corpus("synthetic", 64, 64, seed=1, spike_token_rate=0.5), seed=1)


@pytest.fixture(scope="module")
def heldout():
    return sample_corpus("synthetic", 64, 64, seed=2, spike_token_rate=0.5)


def test_criterion_1_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = 0.0
    coincide = True
    for i in range(1000):
        rows = int(rng.integers(1, 9))
        x = (rng.standard_normal((rows, int(rng.integers(1, 65)))) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        for gran in ("per_tensor", "per_token"):
            s = absmax_scale(x, gran, keepdims=True)
            err = np.abs(dequantize(quantize_symmetric(x, s), s) - x)
            worst = max(worst, float((err / (np.asarray(s) / 2)).max()))
        row = x[:1]
        qt, st_ = quantize_activation(row, AQ1)
        qp, sp = quantize_activation(row, AQ2)
        coincide &= bool(np.array_equal(qt, qp) and float(st_[0, 0]) == sp)
    dt = time.perf_counter() - t0
    ok = worst <= 1.0 and coincide and dt < 10
    assert report(1, ok, f"max err/(scale/2)={worst:.6f}, single-row per-token==per-tensor: {coincide}, {dt:.2f}s")


def test_criterion_2_ratio_oracle():
    rng = np.random.default_rng(200)
    n_exact = 0
    n_even = 0
    mismatched = {1e-3: 0, 1.0: 0, 1e3: 0}
    worst_ulps = 0.0
    for _ in range(10_000):
        s = rng.uniform(0.01, 100.0, int(rng.integers(1, 50)))
        srt = sorted(s.tolist())
        n = len(srt)
        n_even += n % 2 == 0
        med = srt[n // 2] if n % 2 else (srt[n // 2 - 1] + srt[n // 2]) / 2
        r = max_median_ratio(s)
        n_exact += r == srt[-1] / med
        for k in mismatched:
            rk = max_median_ratio(k * s)
            if rk != r:
                mismatched[k] += 1
                worst_ulps = max(worst_ulps, abs(rk - r) / np.spacing(r))
    ok = n_exact == 10_000 and not any(mismatched.values())
    detail = (f"sort oracle exact on {n_exact}/10000 ({n_even} even-length); "
              f"r(kS) != r(S) for k=1e-3: {mismatched[1e-3]}, k=1: {mismatched[1.0]}, k=1e3: {mismatched[1e3]} "
              f"vectors (worst {worst_ulps:.0f} ulp; k*s is rounded before the ratio is taken)")
    assert report(2, ok, detail)


def test_criterion_3_partial_quantization(model, calib, heldout):
    t0 = time.perf_counter()
    fp = perplexity(model, ExecutionPlan.fp(), heldout)[0]
    res = {g: partial_quant_experiment(model, calib, g, heldout) for g in ("top4", "middle4", "bottom4")}
    dt = time.perf_counter() - t0
    mse_ratio = res["top4"].mse / res["middle4"].mse
    ok = (mse_ratio >= 100 and res["top4"].ppl >= 1.5 * fp
          and abs(res["middle4"].ppl / fp - 1) <= 0.01 and abs(res["bottom4"].ppl / fp - 1) <= 0.01 and dt < 120)
    detail = (f"FP {fp:.3f}; top4 {res['top4'].ppl:.3f} (mse {res['top4'].mse:.4g}); "
              f"middle4 {res['middle4'].ppl:.3f} (mse {res['middle4'].mse:.3g}); bottom4 {res['bottom4'].ppl:.3f}; "
              f"mse ratio {mse_ratio:.3g}; {dt:.1f}s")
    assert report(3, ok, detail)


def test_criterion_4_qfem(model, calib, heldout):
    fp = perplexity(model, ExecutionPlan.fp(), heldout)[0]
    full = perplexity(model, ExecutionPlan.w8a8(), heldout)[0]
    binary = optimize_threshold(model, calib, method="binary")
    sweep = optimize_threshold(model, calib, method="sweep")
    ex = binary.exclusions
    recovered = perplexity(model, ExecutionPlan.w8a8(exclude=ex.modules), heldout)[0]
    frac = len(ex.modules) / len(ex.ratios)
    same = binary.alpha == sweep.alpha and binary.exclusions == sweep.exclusions
    ok = full >= 1.5 * fp and recovered <= 1.05 * fp and frac <= 0.25 and same
    detail = (f"FP {fp:.3f}, W8A8 {full:.3f}, with exclusions {recovered:.3f}; "
              f"alpha {binary.alpha:.4g}, |M_unq| {len(ex.modules)}/{len(ex.ratios)}; binary==sweep: {same}")
    assert report(4, ok, detail)


def test_criterion_5_qfep(model, calib, calib_static=None):
    res = find_prefix(model, calib)
    fresh = sample_corpus("synthetic", 100, 64, seed=3, spike_token_rate=1.0)
    cache = prepare_prefix_cache(model, res)
    mid = res.target_module
    behind = max_median_ratio(run_calibration(model, fresh, prefix_cache=cache).stats(mid).pooled)
    plain = max_median_ratio(run_calibration(model, fresh).stats(mid).pooled)
    fp = perplexity(model, ExecutionPlan.fp(), fresh, score_from=2)[0]
    q_plain = perplexity(model, ExecutionPlan.w8a8(), fresh, score_from=2)[0]
    q_prefix = eval_with_prefix(model, ExecutionPlan.w8a8(), fresh, res).ppl
    static = gen_spike_model(spike=SpikeConfig(spike_mode="static"), seed=0)
    srep = run_calibration(static, sample_corpus("synthetic", 64, 64, seed=1, spike_token_rate=0.5))
    try:
        find_prefix(static, srep)
        inapplicable = False
    except QFePInapplicable:
        inapplicable = True
    ok = (len(res.prefix) == 3 and res.prefix[-1] == 10 and behind < TAU and plain >= 10
          and q_prefix <= 1.05 * fp and inapplicable)
    detail = (f"prefix {list(res.prefix)}; ratio behind {behind:.3f} vs without {plain:.4g}; "
              f"ppl FP {fp:.3f}, W8A8 {q_plain:.3f}, W8A8+prefix {q_prefix:.3f}; static inapplicable: {inapplicable}")
    assert report(5, ok, detail)


def test_criterion_6_cache_positions(model):
    rng = np.random.default_rng(600)
    worst = 0.0
    for _ in range(50):
        toks = [256, *rng.integers(0, 256, int(rng.integers(4, 60))).tolist()]
        cache = build_kv_cache(model, toks[:3])
        behind = model.forward(toks[3:], cache=cache).logits
        whole = model.forward(toks).logits[3:]
        worst = max(worst, float(np.abs(behind - whole).max()))
    assert report(6, worst <= 1e-4, f"max |logit diff| over 50 sequences {worst:.3g}")


def test_criterion_7_scheme_ordering(model, calib, heldout):
    static = calibrate_static_scales(calib)
    plans = {"AQ1": ExecutionPlan.w8a8(activation=AQ1), "AQ2": ExecutionPlan.w8a8(activation=AQ2),
             "AQ3": ExecutionPlan.w8a8(activation=AQ3, static_scales=static)}
    ppl = {k: perplexity(model, p, heldout)[0] for k, p in plans.items()}
    lat = bench_interleaved(model, plans, seq_len=64, repetitions=21)
    ok = ppl["AQ1"] <= ppl["AQ2"] <= ppl["AQ3"] and lat["AQ3"] <= lat["AQ2"] <= lat["AQ1"]
    detail = ("ppl " + ", ".join(f"{k} {v:.3f}" for k, v in ppl.items()) + "; median ms "
              + ", ".join(f"{k} {v * 1e3:.3f}" for k, v in lat.items()))
    assert report(7, ok, detail)


PIPELINE = [
    ["genmodel", "--seed", "7", "--out", "m.gslm"],
    ["calibrate", "--model", "m.gslm", "--samples", "32", "--seed", "3", "--out", "c.json"],
    ["analyze", "--calib", "c.json", "--out", "r.csv", "--layers-out", "l.csv", "--trace-out", "t.csv"],
    ["qfem", "--model", "m.gslm", "--calib", "c.json", "--search-alpha", "--curve", "curve.csv", "--out", "ex.json"],
    ["qfep", "--model", "m.gslm", "--calib", "c.json", "--out", "p.json"],
    ["eval", "--model", "m.gslm", "--plan", "w8a8", "--qfem", "ex.json", "--qfep", "p.json", "--metric", "both",
     "--samples", "16", "--seed", "4", "--out", "e.json"],
]


def _run_pipeline(d, jobs):
    cwd = os.getcwd()
    os.chdir(d)
    try:
        for argv in PIPELINE:
            if cli_main([*argv, "--jobs", str(jobs)]) != 0:
                raise RuntimeError(f"{argv[0]} failed")
    finally:
        os.chdir(cwd)
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(Path(d).iterdir())}


def test_criterion_8_determinism(tmp_path):
    runs = {}
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        d = tmp_path / name
        d.mkdir()
        runs[name] = _run_pipeline(d, jobs)
    same = runs["a"] == runs["b"] == runs["c"]
    n_manifests = sum(k.endswith(".manifest.json") for k in runs["a"])
    diff = sorted(k for k in runs["a"] if runs["a"][k] != runs["c"].get(k))
    assert report(8, same and n_manifests == len(PIPELINE),
                  f"{len(runs['a'])} artifacts ({n_manifests} manifests) bit-identical across reruns and --jobs 4: "
                  f"{same}{'' if same else ' differ: ' + ', '.join(diff)}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
