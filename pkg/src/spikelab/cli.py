"""Command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 usage error (argparse),
3 artifacts from a different model, 4 prefix search inapplicable.
"""

import argparse
import hashlib
import json
import os
import sys

from . import __version__
from .calibration import (CalibrationReport, run_calibration, token_scale_trace, write_layer_csv,
                          write_summary_csv, write_trace_csv)
from .container import load_model, save_model
from .evaluation import bench, evaluate, last_hidden_mse, partial_quant_experiment, GROUPS
from .model import ModuleId
from .parallel import default_jobs
from .qfem import ExclusionSet, module_ratios, optimize_threshold, select_unquantized, write_curve_csv
from .qfep import DEFAULT_POOL, DEFAULT_TAU, PrefixResult, QFePInapplicable, find_prefix, prepare_prefix_cache
from .quant import ACT_SCHEMES, WEIGHT_SCHEMES, ExecutionPlan, calibrate_static_scales
from .synth import SpikeConfig, ToyTokenizer, default_config, gen_spike_model, sample_corpus

EXIT_MISMATCH = 3
EXIT_INAPPLICABLE = 4
SPIKE_MODES = {"first": "first_occurrence", "static": "static", "none": "none"}


class ArtifactMismatch(Exception):
    pass


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_manifest(args, inputs, outputs):
    """Record the command, its arguments and input/output hashes next to ``args.out``."""
    argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "jobs")}
    doc = {
        "command": args.command,
        "arguments": argv,
        "seed": getattr(args, "seed", None),
        "inputs": {p: _sha256(p) for p in inputs if p},
        "outputs": {p: _sha256(p) for p in outputs if p},
        "tool_version": __version__,
    }
    path = args.out + ".manifest.json"
    _write_json(path, doc)
    return path


def _check(kind, expected, found):
    if found is not None and expected != found:
        raise ArtifactMismatch(f"{kind} was produced for model {found[:12]}, not {expected[:12]}")


def _corpus(args, spike_token=None):
    kw = {"spike_token": spike_token} if spike_token is not None else {}
    return sample_corpus(args.corpus, args.samples, args.seqlen, args.seed, args.spike_rate, **kw)


def _spike_token(model):
    spike = (model.meta or {}).get("spike")
    return spike["spike_token"] if spike else None


def _add_corpus(p, samples=64, seqlen=64):
    p.add_argument("--corpus", default="synthetic", help="'synthetic' or a path to a text file")
    p.add_argument("--samples", type=int, default=samples)
    p.add_argument("--seqlen", type=int, default=seqlen)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spike-rate", type=float, default=0.5,
                   help="fraction of sequences that receive the spike token")


def _add_plan(p):
    p.add_argument("--plan", choices=["fp", "w8a8", "w8a16"], default="fp")
    p.add_argument("--act-scheme", choices=sorted(ACT_SCHEMES), default="per-tensor-dyn",
                   help="AQ1 per-token-dyn, AQ2 per-tensor-dyn, AQ3 per-tensor-static (needs --calib)")
    p.add_argument("--weight-scheme", choices=sorted(WEIGHT_SCHEMES), default="per-channel")
    p.add_argument("--bmm", action="store_true", help="also quantize q·kᵀ and probs·v")
    p.add_argument("--qfem", help="exclusions JSON; listed modules run weight-only")
    p.add_argument("--qfep", help="prefix JSON; inputs run behind its full-precision KV cache")
    p.add_argument("--calib", help="calibration JSON (static scales)")


def _build_plan(args, model):
    fp = model.fingerprint()
    inputs = []
    kw = {"activation": ACT_SCHEMES[args.act_scheme], "weight": WEIGHT_SCHEMES[args.weight_scheme],
          "bmm": args.bmm}
    if args.calib:
        report = CalibrationReport.load(args.calib)
        _check("calibration", fp, report.model_fingerprint)
        inputs.append(args.calib)
        if args.act_scheme == "per-tensor-static":
            kw["static_scales"] = calibrate_static_scales(report)
    elif args.plan == "w8a8" and args.act_scheme == "per-tensor-static":
        raise SystemExit("error: per-tensor-static activations need --calib")
    if args.qfem:
        ex = ExclusionSet.load(args.qfem)
        _check("exclusion set", fp, ex.provenance)
        kw["exclude"] = ex.modules
        inputs.append(args.qfem)
    prefix = None
    if args.qfep:
        prefix = PrefixResult.load(args.qfep)
        _check("prefix", fp, prefix.provenance)
        kw["prefix_cache"] = prepare_prefix_cache(model, prefix)
        inputs.append(args.qfep)
    return ExecutionPlan(default_mode=args.plan, **kw), prefix, inputs


def cmd_genmodel(args):
    cfg = default_config(args.layers, args.dim, args.heads, args.dff, args.ffn, args.max_seq_len)
    spike = SpikeConfig(spike_token=args.spike_token, spike_layer=args.spike_layer,
                        spike_mode=SPIKE_MODES[args.spike_mode], target_ratio=args.target_ratio)
    model = gen_spike_model(cfg, spike, args.seed)
    save_model(model, args.out)
    write_manifest(args, [], [args.out])
    print(f"wrote {args.out} ({model.fingerprint()[:12]})")


def cmd_calibrate(args):
    model = load_model(args.model)
    cache = None
    inputs = [args.model]
    if args.prefix:
        prefix = PrefixResult.load(args.prefix)
        _check("prefix", model.fingerprint(), prefix.provenance)
        cache = prepare_prefix_cache(model, prefix)
        inputs.append(args.prefix)
    report = run_calibration(model, _corpus(args, _spike_token(model)), seed=args.seed, seq_len=args.seqlen,
                             jobs=args.jobs, prefix_cache=cache)
    report.save(args.out)
    write_manifest(args, inputs, [args.out])
    print(f"calibrated {report.n_samples} samples -> {args.out}")


def cmd_analyze(args):
    report = CalibrationReport.load(args.calib)
    ratios = module_ratios(report)
    write_summary_csv(report, args.out, ratios)
    outputs = [args.out]
    if args.layers_out:
        write_layer_csv(report, args.layers_out)
        outputs.append(args.layers_out)
    if args.trace_out:
        mid = ModuleId.parse(args.module) if args.module else max(ratios, key=ratios.get)
        write_trace_csv(token_scale_trace(report, mid, args.sample), args.trace_out)
        outputs.append(args.trace_out)
    write_manifest(args, [args.calib], outputs)
    top = max(ratios, key=ratios.get)
    print(f"highest ratio {ratios[top]:.4g} at {top}")


def cmd_qfem(args):
    model = load_model(args.model)
    report = CalibrationReport.load(args.calib)
    _check("calibration", model.fingerprint(), report.model_fingerprint)
    inputs = [args.model, args.calib]
    if args.alpha is not None:
        ex = select_unquantized(module_ratios(report), args.alpha, report.model_fingerprint)
        curve = None
    else:
        corpus = None
        if args.corpus:
            corpus = _corpus(args, _spike_token(model))
        plan = ExecutionPlan.w8a8(activation=ACT_SCHEMES[args.act_scheme],
                                  weight=WEIGHT_SCHEMES[args.weight_scheme])
        res = optimize_threshold(model, report, corpus, plan, method=args.method,
                                 curve=bool(args.curve), jobs=args.jobs)
        ex, curve = res.exclusions, res.curve
    ex.save(args.out)
    outputs = [args.out]
    if args.curve and curve is not None:
        write_curve_csv(curve, args.curve)
        outputs.append(args.curve)
    write_manifest(args, inputs, outputs)
    print(f"alpha={ex.alpha:.4g}: {len(ex.modules)}/{len(ex.ratios)} modules unquantized")


def cmd_qfep(args):
    model = load_model(args.model)
    report = CalibrationReport.load(args.calib)
    _check("calibration", model.fingerprint(), report.model_fingerprint)
    tail = None
    if args.tail_from_corpus:
        tail = report.sequences[0][1:].tolist()
    try:
        res = find_prefix(model, report, args.candidates, args.context_pool, args.tau,
                          with_context=not args.no_context, tail=tail, jobs=args.jobs)
    except QFePInapplicable as exc:
        _write_json(args.out, {"status": "inapplicable", "reason": str(exc), "best_ratio": exc.best,
                               "provenance": report.model_fingerprint})
        write_manifest(args, [args.model, args.calib], [args.out])
        print(f"prefix search inapplicable: {exc}", file=sys.stderr)
        return EXIT_INAPPLICABLE
    res.save(args.out, ToyTokenizer())
    write_manifest(args, [args.model, args.calib], [args.out])
    print(f"prefix {list(res.prefix)} at {res.target_module}, first/second ratio {res.spike_ratio:.4g}")


def cmd_eval(args):
    model = load_model(args.model)
    plan, prefix, extra = _build_plan(args, model)
    corpus = _corpus(args, _spike_token(model))
    doc = {"model_fingerprint": model.fingerprint(), "plan": plan.describe()}
    if args.group:
        if not args.calib:
            raise SystemExit("error: --group needs --calib")
        res = partial_quant_experiment(model, CalibrationReport.load(args.calib), args.group, corpus,
                                       jobs=args.jobs)
        doc.update(res.to_dict())
    else:
        score_from = 2 if prefix is not None else 1
        if args.metric in ("ppl", "both"):
            res = evaluate(model, plan, corpus, score_from=score_from, jobs=args.jobs)
            doc.update(ppl=res.ppl, tokens_evaluated=res.tokens_evaluated)
            fp_plan = ExecutionPlan.fp(prefix_cache=plan.prefix_cache)
            doc["ppl_fp"] = evaluate(model, fp_plan, corpus, score_from=score_from, jobs=args.jobs).ppl
        if args.metric in ("mse", "both"):
            doc["mse"] = last_hidden_mse(model, ExecutionPlan.fp(), plan, corpus, jobs=args.jobs)
    _write_json(args.out, doc)
    write_manifest(args, [args.model, *extra], [args.out])
    print(json.dumps({k: doc[k] for k in ("ppl", "ppl_fp", "mse") if k in doc}, sort_keys=True))


def cmd_bench(args):
    model = load_model(args.model)
    plan, _, extra = _build_plan(args, model)
    res = bench(model, plan, args.seqlen, args.reps, args.seed)
    doc = {"model_fingerprint": model.fingerprint(), "plan": res.plan, "seq_len": args.seqlen,
           "median_s": res.latency_s, "latencies_s": res.latencies_s, "peak_bytes": res.peak_bytes}
    if plan.prefix_cache is not None:
        doc["prefix_cache_bytes"] = plan.prefix_cache.nbytes()
    _write_json(args.out, doc)
    write_manifest(args, [args.model, *extra], [args.out])
    print(f"median {res.latency_s * 1e3:.3f} ms per forward of {res.tokens_evaluated} tokens")


def build_parser():
    ap = argparse.ArgumentParser(prog="spikelab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        p.add_argument("--jobs", type=int, default=default_jobs(),
                       help="worker threads (default from SPIKELAB_JOBS, else 1)")
        return p

    p = add("genmodel", cmd_genmodel, "generate a synthetic spike model")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dff", type=int, default=128)
    p.add_argument("--ffn", choices=["swiglu", "geglu", "plain"], default="swiglu")
    p.add_argument("--spike-mode", choices=sorted(SPIKE_MODES), default="first")
    p.add_argument("--spike-token", type=int, default=SpikeConfig.spike_token)
    p.add_argument("--spike-layer", type=int, default=SpikeConfig.spike_layer)
    p.add_argument("--target-ratio", type=float, default=SpikeConfig.target_ratio)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("calibrate", cmd_calibrate, "record token-wise input scales of every linear module")
    p.add_argument("--model", required=True)
    _add_corpus(p)
    p.add_argument("--prefix", help="prefix JSON; calibrate behind its KV cache")
    p.add_argument("--out", required=True)

    p = add("analyze", cmd_analyze, "per-module max/median/ratio CSVs")
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers-out", help="per-layer maxima CSV")
    p.add_argument("--trace-out", help="token-wise scale trace CSV for one sample")
    p.add_argument("--module", help="module for the trace, e.g. L1.down (default: highest ratio)")
    p.add_argument("--sample", type=int, default=0)

    p = add("qfem", cmd_qfem, "choose modules to keep unquantized")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--search-alpha", action="store_true")
    g.add_argument("--alpha", type=float)
    p.add_argument("--method", choices=["binary", "sweep"], default="binary")
    p.add_argument("--act-scheme", choices=sorted(ACT_SCHEMES), default="per-tensor-dyn")
    p.add_argument("--weight-scheme", choices=sorted(WEIGHT_SCHEMES), default="per-channel")
    p.add_argument("--corpus", help="held-out corpus (default: the calibration samples)")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seqlen", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spike-rate", type=float, default=0.5)
    p.add_argument("--curve", help="write the alpha / perplexity / module-count curve here")
    p.add_argument("--out", required=True)

    p = add("qfep", cmd_qfep, "search a spike-absorbing prefix")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--context-pool", type=int, default=DEFAULT_POOL)
    p.add_argument("--candidates", type=int, default=3)
    p.add_argument("--no-context", action="store_true", help="search [BOS, C] prefixes")
    p.add_argument("--tail-from-corpus", action="store_true",
                   help="probe with a calibration sample instead of a repeated [T, C]")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "perplexity and last-hidden MSE of a plan")
    p.add_argument("--model", required=True)
    _add_plan(p)
    _add_corpus(p)
    p.add_argument("--metric", choices=["ppl", "mse", "both"], default="ppl")
    p.add_argument("--group", choices=GROUPS, help="quantize only this ratio-ranked group (needs --calib)")
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "latency and peak memory of a plan")
    p.add_argument("--model", required=True)
    _add_plan(p)
    p.add_argument("--seqlen", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ArtifactMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
