"""Desk-scale GLU models engineered to produce activation spikes.

The generated model is a byte-level bigram predictor for a built-in grammar
(``successor``) with three hand-placed mechanisms on top of small random
weights:

* a *copy* FFN at ``spike_layer`` moves the token code from residual subspace A
  to subspace B, which is the only subspace the LM head reads. Destroying the
  resolution of that FFN's down-projection input destroys the predictions;
* a *spike* neuron in the same FFN whose Hadamard product is huge for the
  spike token (always in ``static`` mode, only at its first occurrence in
  ``first_occurrence`` mode);
* an *occurrence marker* head one layer earlier. A spike-token query attends
  equally to BOS and to every occurrence of the spike token so far, whose values
  carry a constant; the marker therefore reads k/(k+1) at the k-th occurrence,
  and the spike neuron's gate is positive only below the midpoint of 1/2 and 2/3.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax

from .model import Model, ModelConfig, ModuleId

BOS_ID = 256
VOCAB_SIZE = 257
DEFAULT_SPIKE_TOKEN = 10  # newline byte
FOLLOW_PROB = 0.8

CONST_DIM, BOS_DIM, SPIKE_DIM = 0, 1, 2
EMBED_SCALE = 8.0
COPY_GAIN = 8.0
NOISE_GATE = 4.0
MARKER_VALUE = 2.0
ATTN_SHARPNESS = 12.0
GATE_SWING = 10.0


class GenerationError(RuntimeError):
    pass


# -- tokenizer ---------------------------------------------------------------

class ToyTokenizer:
    """Byte-level tokenizer: ids 0..255 are bytes, 256 is BOS."""

    bos_id = BOS_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text):
        data = text.encode("utf-8", "surrogateescape") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode_bytes(self, ids):
        ids = list(ids)
        if ids and ids[0] == BOS_ID:
            ids = ids[1:]
        if BOS_ID in ids:
            raise ValueError("BOS may only appear at the start of a sequence")
        if any(not 0 <= i < 256 for i in ids):
            raise ValueError("token id outside the byte range")
        return bytes(ids)

    def decode(self, ids):
        return self.decode_bytes(ids).decode("utf-8", "surrogateescape")


def encode(text):
    return ToyTokenizer().encode(text)


def decode(ids):
    return ToyTokenizer().decode(ids)


# -- corpus ------------------------------------------------------------------

def successor(b):
    """Preferred next byte of the built-in grammar (a permutation of 0..255)."""
    return (5 * int(b) + 17) % 256


def predecessor(b):
    # 205 is the inverse of 5 mod 256
    return (205 * (int(b) - 17)) % 256


def _spike_positions(rng, seq_len, rate):
    if rate <= 0 or rng.random() >= rate:
        return set()
    k = min(int(rng.integers(1, 3)), seq_len - 1)
    return {int(p) for p in rng.choice(np.arange(1, seq_len), size=k, replace=False)}


def _uniform_other(rng, spike_token):
    t = int(rng.integers(0, 255))
    return t + 1 if t >= spike_token else t


def sample_corpus(source="synthetic", n=64, seq_len=32, seed=0, spike_token_rate=0.5,
                  spike_token=DEFAULT_SPIKE_TOKEN):
    """BOS-prefixed token sequences of length ``seq_len``.

    ``source`` is ``"synthetic"`` for the built-in grammar or a path to a text
    file whose bytes are windowed at random offsets. With probability
    ``spike_token_rate`` a sequence receives one or two copies of
    ``spike_token`` at random positions. The grammar itself never emits the
    spike token, so a zero rate gives spike-free synthetic sequences.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    rng = np.random.default_rng(seed)
    out = []
    if source == "synthetic":
        for _ in range(n):
            spikes = _spike_positions(rng, seq_len, spike_token_rate)
            seq = [BOS_ID]
            for pos in range(1, seq_len):
                if pos in spikes:
                    t = spike_token
                elif pos == 1 or rng.random() >= FOLLOW_PROB:
                    t = _uniform_other(rng, spike_token)
                else:
                    t = successor(seq[-1])
                    if t == spike_token:
                        t = _uniform_other(rng, spike_token)
                seq.append(t)
            out.append(seq)
        return out
    with open(source, "rb") as fh:
        data = fh.read()
    width = seq_len - 1
    if len(data) < width:
        raise ValueError(f"{source} is shorter than one window of {width} bytes")
    for _ in range(n):
        spikes = _spike_positions(rng, seq_len, spike_token_rate)
        start = int(rng.integers(0, len(data) - width + 1))
        seq = [BOS_ID, *data[start:start + width]]
        for p in spikes:
            seq[p] = spike_token
        out.append(seq)
    return out


# -- model generation ----------------------------------------------------------

@dataclass(frozen=True)
class SpikeConfig:
    spike_token: int = DEFAULT_SPIKE_TOKEN
    spike_layer: int = 1
    spike_mode: str = "first_occurrence"
    target_ratio: float = 1000.0
    marker_dim: int = 3

    def validate(self, cfg):
        if self.spike_mode not in ("first_occurrence", "static", "none"):
            raise ValueError(f"unknown spike_mode {self.spike_mode!r}")
        if self.spike_token == cfg.bos_id or not 0 <= self.spike_token < 256:
            raise ValueError("spike_token must be a byte token other than BOS")
        if not 0 <= self.spike_layer < cfg.n_layers:
            raise ValueError("spike_layer out of range")
        if self.spike_mode == "first_occurrence" and self.spike_layer < 1:
            raise ValueError("first_occurrence spikes need a layer before spike_layer for the marker head")
        if self.target_ratio < 10:
            raise ValueError("target_ratio must be at least 10")
        if self.marker_dim in (CONST_DIM, BOS_DIM, SPIKE_DIM) or not 0 <= self.marker_dim < cfg.d_model:
            raise ValueError("marker_dim collides with a reserved dimension")


def default_config(n_layers=8, d_model=64, n_heads=4, d_ff=128, ffn_kind="swiglu", max_seq_len=512):
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_head=d_model // n_heads,
                       d_ff=d_ff, vocab_size=VOCAB_SIZE, bos_id=BOS_ID, ffn_kind=ffn_kind,
                       max_seq_len=max_seq_len)


def _layout(cfg, spike):
    free = [d for d in range(cfg.d_model) if d not in (CONST_DIM, BOS_DIM, SPIKE_DIM, spike.marker_dim)]
    half = len(free) // 2
    return np.array(free[:half]), np.array(free[half:2 * half])


def _random_parts(cfg, spike, rng):
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    A, _ = _layout(cfg, spike)
    codes = rng.standard_normal((V, A.size))
    parts = {"codes": codes, "layers": []}
    for _ in range(cfg.n_layers):
        parts["layers"].append({
            "wq": rng.normal(0, 0.05, (D, D)),
            "wk": rng.normal(0, 0.05, (D, D)),
            "wv": rng.normal(0, 0.1, (D, D)),
            "v_const": rng.standard_normal(D),
            "wo": rng.normal(0, 0.05, (D, D)),
            "w_gate": rng.normal(0, 0.1, (D, F)),
            "w_up": rng.normal(0, 1.0 / np.sqrt(D), (D, F)),
            "w_down": rng.normal(0, 0.01, (F, D)),
        })
    return parts


def _assemble(cfg, spike, parts, k):
    """Weights from the random parts and the tunable constants in ``k``."""
    D, F, V, dh = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.d_head
    A, B = _layout(cfg, spike)
    reserved = [CONST_DIM, BOS_DIM, SPIKE_DIM, spike.marker_dim]
    mdim = spike.marker_dim
    sl = spike.spike_layer
    glu = cfg.glu

    # unit-rms token rows: constant, flags, and a random code in subspace A
    e = np.zeros((V, D))
    e[:, CONST_DIM] = 1.0
    e[cfg.bos_id, BOS_DIM] = 1.0
    if spike.spike_mode != "none":
        e[spike.spike_token, SPIKE_DIM] = 1.0
    flags = (e ** 2).sum(axis=1, keepdims=True)
    codes = parts["codes"] / np.linalg.norm(parts["codes"], axis=1, keepdims=True)
    e[:, A] = codes * np.sqrt(D - flags)
    w = {"embed": EMBED_SCALE * e, "final_norm": np.ones(D)}

    for i, lp in enumerate(parts["layers"]):
        p = f"layers.{i}."
        w[p + "attn_norm"] = np.ones(D)
        w[p + "ffn_norm"] = np.ones(D)
        wq, wk = lp["wq"].copy(), lp["wk"].copy()
        wv = lp["wv"].copy()
        wv[CONST_DIM] += lp["v_const"]
        wo = lp["wo"].copy()
        wo[:, reserved] = 0.0
        if spike.spike_mode == "first_occurrence" and i == sl - 1:
            h = slice(0, dh)
            wq[:, h] = 0.0
            wk[:, h] = 0.0
            lift = ATTN_SHARPNESS * np.sqrt(dh)
            wq[SPIKE_DIM, dh - 2] = lift
            wk[SPIKE_DIM, dh - 2] = 1.0
            wq[CONST_DIM, dh - 4] = lift
            wk[BOS_DIM, dh - 4] = 1.0
            wv[:, 0] = 0.0
            wv[SPIKE_DIM, 0] = MARKER_VALUE
            wo[0] = 0.0
            wo[0, mdim] = k["marker_gain"]
        w[p + "wq"], w[p + "wk"], w[p + "wv"], w[p + "wo"] = wq, wk, wv, wo

        up = lp["w_up"].copy()
        down = lp["w_down"].copy()
        down[:, reserved] = 0.0
        gate = lp["w_gate"].copy()
        gate[CONST_DIM] += NOISE_GATE
        if i == sl:
            if glu:
                n_copy = A.size
                gate[:, :n_copy] = 0.0
                gate[CONST_DIM, :n_copy] = COPY_GAIN
                up[:, :n_copy] = 0.0
                up[A, np.arange(n_copy)] = 1.0
                down[:n_copy] = 0.0
                down[np.arange(n_copy), B] = EMBED_SCALE / COPY_GAIN
            else:
                # silu(u) - silu(-u) == u, likewise for gelu
                n_copy = 2 * A.size
                up[:, :n_copy] = 0.0
                up[A, 2 * np.arange(A.size)] = 1.0
                up[A, 2 * np.arange(A.size) + 1] = -1.0
                down[:n_copy] = 0.0
                down[2 * np.arange(A.size), B] = EMBED_SCALE
                down[2 * np.arange(A.size) + 1, B] = -EMBED_SCALE
            if spike.spike_mode != "none":
                s = F - 1
                gate[:, s] = 0.0
                up[:, s] = 0.0
                down[s] = 0.0
                if spike.spike_mode == "static":
                    gate[SPIKE_DIM, s] = GATE_SWING
                else:
                    gate[SPIKE_DIM, s] = k["gate_scale"] * k["threshold"]
                    gate[mdim, s] = -k["gate_scale"]
                up[SPIKE_DIM, s] = k["spike_gain"]
        if glu:
            w[p + "w_gate"] = gate
        w[p + "w_up"] = up
        w[p + "w_down"] = down

    head = np.zeros((D, V))
    for j in range(256):
        head[B, j] = codes[predecessor(j)]
    head[CONST_DIM, cfg.bos_id] = -4.0
    w["lm_head"] = k["readout"] * head
    return {n: np.asarray(a, dtype=np.float32) for n, a in w.items()}


def _build(cfg, spike, parts, k, seed):
    meta = {"generator": "spikelab.synth", "seed": int(seed), "spike": asdict(spike),
            "constants": {n: float(v) for n, v in k.items()}}
    return Model(cfg, _assemble(cfg, spike, parts, k), meta)


def _fit_readout(model, corpus):
    """Readout gain minimising FP negative log-likelihood on ``corpus``."""
    logits, targets = [], []
    for seq in corpus:
        tr = model.forward(seq)
        logits.append(tr.logits[1:-1].astype(np.float64) / model.meta["constants"]["readout"])
        targets.append(np.asarray(seq[2:]))
    z = np.concatenate(logits)
    t = np.concatenate(targets)

    def nll(beta):
        return -log_softmax(beta * z, axis=1)[np.arange(t.size), t].mean()

    return float(minimize_scalar(nll, bounds=(1e-3, 50.0), method="bounded").x)


def _ratio(scales):
    pooled = np.concatenate(scales)
    return pooled.max() / np.median(pooled)


def check_postconditions(model, spike, corpus):
    """Evaluate the generator contract on ``corpus``; returns a dict of findings."""
    from .calibration import run_calibration

    report = run_calibration(model, corpus)
    target = ModuleId(spike.spike_layer, "down")
    ratios = {m: _ratio(st.scales) for m, st in report.modules.items()}
    others = max(r for m, r in ratios.items() if m != target)
    found = {"target_ratio": float(ratios[target]), "max_other_ratio": float(others),
             "finite": bool(np.isfinite(report.hidden).all())}
    firsts, seconds = [], []
    st = report.modules[target]
    for toks, sc in zip(st.tokens, st.scales):
        where = np.flatnonzero(toks == spike.spike_token)
        if where.size >= 2:
            firsts.append(sc[where[0]])
            seconds.append(sc[where[1]])
    found["second_over_first"] = float(max(s / f for f, s in zip(firsts, seconds))) if firsts else float("nan")
    return found


def _marker_readings(model, spike):
    """Normalized spike flag and marker at the spike-layer FFN input for 3 occurrences."""
    S = spike.spike_token
    probe = [model.cfg.bos_id, 65, S, 66, S, 67, S]
    tr = model.forward(probe, taps=[ModuleId(spike.spike_layer, "gate_up")])
    tap = tr.taps[ModuleId(spike.spike_layer, "gate_up")].astype(np.float64)
    pos = [2, 4, 6]
    return tap[pos, SPIKE_DIM], tap[pos, spike.marker_dim]


def gen_spike_model(cfg=None, spike=None, seed=0, max_iter=8, probe_samples=48, probe_len=32):
    """Generate a model whose calibration shows the configured spike pattern.

    Raises GenerationError if the postconditions cannot be met within
    ``max_iter`` tuning rounds.
    """
    cfg = cfg or default_config()
    spike = spike or SpikeConfig()
    spike.validate(cfg)
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    A, _ = _layout(cfg, spike)
    if cfg.d_model < 16 or cfg.d_head < 4:
        raise ValueError("need d_model >= 16 and d_head >= 4")
    need = (2 if cfg.ffn_kind == "plain" else 1) * A.size + (spike.spike_mode != "none")
    if cfg.d_ff < need:
        raise ValueError(f"d_ff must be at least {need} for this d_model")
    if cfg.ffn_kind == "plain" and spike.spike_mode != "none":
        raise ValueError("activation spikes come from the GLU Hadamard product; use spike_mode='none' for plain FFNs")

    rng = np.random.default_rng(seed)
    parts = _random_parts(cfg, spike, rng)
    probe_seed = int(rng.integers(2 ** 31))
    rate = 0.0 if spike.spike_mode == "none" else 1.0
    probe = sample_corpus("synthetic", probe_samples, probe_len, probe_seed, rate, spike.spike_token)

    k = {"marker_gain": 2.0 * EMBED_SCALE / MARKER_VALUE, "gate_scale": 0.0, "threshold": 0.0,
         "spike_gain": 0.0, "readout": 1.0}
    model = _build(cfg, spike, parts, k, seed)
    if spike.spike_mode == "first_occurrence":
        flag, marker = _marker_readings(model, spike)
        rho = marker / flag
        if not rho[0] < rho[1] < rho[2]:
            raise GenerationError(f"occurrence marker is not increasing: {rho}")
        k["threshold"] = float((rho[0] + rho[1]) / 2)
        k["gate_scale"] = float(GATE_SWING / flag[0] / ((rho[1] - rho[0]) / 2))
    k["readout"] = _fit_readout(model, probe)
    model = _build(cfg, spike, parts, k, seed)
    if spike.spike_mode == "none":
        found = check_postconditions(model, spike, probe)
        if not (found["max_other_ratio"] < 3 and found["finite"]):
            raise GenerationError(f"spike-free model violates its contract: {found}")
        return model

    # size the spike neuron from the typical down-input scale
    from .calibration import run_calibration
    target = ModuleId(spike.spike_layer, "down")
    base = run_calibration(model, probe).modules[target]
    typical = float(np.median(np.concatenate(base.scales)))
    S = spike.spike_token
    tr = model.forward([cfg.bos_id, S], taps=[ModuleId(spike.spike_layer, "gate_up")])
    row = tr.taps[ModuleId(spike.spike_layer, "gate_up")][1].astype(np.float64)
    gate_pre = row[SPIKE_DIM] * (GATE_SWING if spike.spike_mode == "static" else k["gate_scale"] * k["threshold"])
    if spike.spike_mode == "first_occurrence":
        gate_pre -= k["gate_scale"] * row[spike.marker_dim]
    act = gate_pre / (1 + np.exp(-gate_pre)) if cfg.ffn_kind == "swiglu" else gate_pre
    k["spike_gain"] = float(1.5 * spike.target_ratio * typical / (act * row[SPIKE_DIM]))

    for _ in range(max_iter):
        model = _build(cfg, spike, parts, k, seed)
        found = check_postconditions(model, spike, probe)
        ok_ratio = found["target_ratio"] >= spike.target_ratio
        ok_other = found["max_other_ratio"] < 3
        ok_first = spike.spike_mode != "first_occurrence" or found["second_over_first"] < 0.5
        if ok_ratio and ok_other and ok_first and found["finite"]:
            model.meta["postconditions"] = found
            return model
        if not ok_other or not found["finite"]:
            break
        if not ok_ratio:
            k["spike_gain"] *= 2.0
        if not ok_first:
            k["gate_scale"] *= 1.5
    raise GenerationError(f"could not meet spike postconditions: {found}")
