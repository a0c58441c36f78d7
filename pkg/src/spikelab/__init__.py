"""Activation spikes in GLU transformers: calibration, diagnostics and spike-aware INT8 quantization."""

__version__ = "0.1.0"

from .calibration import CalibrationReport, run_calibration, token_frequency, token_scale_trace
from .container import load_model, save_model
from .evaluation import EvalResult, bench, last_hidden_mse, partial_quant_experiment, perplexity
from .model import KVCache, Model, ModelConfig, ModuleId, build_kv_cache
from .qfem import ExclusionSet, max_median_ratio, module_ratios, optimize_threshold, select_unquantized
from .qfep import (PrefixResult, QFePInapplicable, eval_with_prefix, find_candidate_tokens, find_prefix,
                   prepare_prefix_cache, search_prefix)
from .quant import ExecutionPlan, QuantSpec, dequantize, quantize_symmetric
from .synth import SpikeConfig, ToyTokenizer, gen_spike_model, sample_corpus

__all__ = [
    "CalibrationReport", "EvalResult", "ExclusionSet", "ExecutionPlan", "KVCache", "Model", "ModelConfig",
    "ModuleId", "PrefixResult", "QFePInapplicable", "QuantSpec", "SpikeConfig", "ToyTokenizer",
    "bench", "build_kv_cache", "dequantize", "eval_with_prefix", "find_candidate_tokens", "find_prefix",
    "gen_spike_model", "last_hidden_mse", "load_model", "max_median_ratio", "module_ratios",
    "optimize_threshold", "partial_quant_experiment", "perplexity", "prepare_prefix_cache",
    "quantize_symmetric", "run_calibration", "sample_corpus", "save_model", "search_prefix",
    "select_unquantized", "token_frequency", "token_scale_trace",
]
