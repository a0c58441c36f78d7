import numpy as np
import pytest
from scipy.special import erf

from conftest import random_model
from spikelab.container import ContainerError, from_bytes, load_model, save_model, to_bytes
from spikelab.model import KVCache, ModelConfig, ModuleId, build_kv_cache, module_ids
from spikelab.quant import ExecutionPlan


def reference_forward(model, tokens):
    """Position-by-position float64 forward written independently of the engine."""
    cfg, W = model.cfg, model.weights
    H, dh = cfg.n_heads, cfg.d_head

    def norm(x, g):
        return x / np.sqrt((x * x).mean() + cfg.norm_eps) * g

    def rot(v, pos):
        out = v.copy()
        for i in range(0, dh, 2):
            a = pos * cfg.rope_theta ** (-i / dh)
            c, s = np.cos(a), np.sin(a)
            out[i], out[i + 1] = v[i] * c - v[i + 1] * s, v[i] * s + v[i + 1] * c
        return out

    act = (lambda z: z / (1 + np.exp(-z))) if cfg.activation == "silu" else (lambda z: 0.5 * z * (1 + erf(z / np.sqrt(2))))
    xs = [W["embed"][t].astype(np.float64) for t in tokens]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        keys, vals, new = [], [], []
        for pos, x in enumerate(xs):
            h = norm(x, W[p + "attn_norm"])
            q, k, v = h @ W[p + "wq"], h @ W[p + "wk"], h @ W[p + "wv"]
            keys.append([rot(k[j * dh:(j + 1) * dh], pos) for j in range(H)])
            vals.append([v[j * dh:(j + 1) * dh] for j in range(H)])
            heads = []
            for j in range(H):
                qj = rot(q[j * dh:(j + 1) * dh], pos)
                sc = np.array([qj @ keys[t][j] for t in range(pos + 1)]) / np.sqrt(dh)
                w = np.exp(sc - sc.max())
                w /= w.sum()
                heads.append(sum(w[t] * vals[t][j] for t in range(pos + 1)))
            x = x + np.concatenate(heads) @ W[p + "wo"]
            h = norm(x, W[p + "ffn_norm"])
            if cfg.glu:
                a = act(h @ W[p + "w_gate"]) * (h @ W[p + "w_up"])
            else:
                a = act(h @ W[p + "w_up"])
            new.append(x + a @ W[p + "w_down"])
        xs = new
    return np.array([norm(x, W["final_norm"]) @ W["lm_head"] for x in xs])


@pytest.mark.parametrize("kind", ["swiglu", "geglu", "plain"])
def test_forward_matches_reference(kind):
    m = random_model(ffn_kind=kind)
    toks = [m.cfg.bos_id, 3, 7, 1, 7, 0]
    np.testing.assert_allclose(m.forward(toks).logits, reference_forward(m, toks), rtol=1e-4, atol=1e-4)


def test_module_ids_and_taps(tiny_model):
    ids = module_ids(tiny_model.cfg)
    assert len(ids) == 4 * tiny_model.cfg.n_layers
    tr = tiny_model.forward([18, 1, 2], taps=True)
    assert set(tr.taps) == set(ids)
    assert tr.taps[ModuleId(0, "gate_up")].shape == (3, tiny_model.cfg.d_model)
    assert tr.taps[ModuleId(0, "down")].shape == (3, tiny_model.cfg.d_ff)
    assert tr.hidden_absmax.shape == (tiny_model.cfg.n_layers, 3)


def test_module_id_parse_round_trip():
    m = ModuleId(3, "gate_up")
    assert str(m) == "L3.gate_up"
    assert ModuleId.parse(str(m)) == m


def test_cache_continuation_matches_full_forward(tiny_model):
    toks = [18, 4, 9, 2, 11, 5, 6]
    full = tiny_model.forward(toks).logits
    cache = build_kv_cache(tiny_model, toks[:3])
    assert cache.cached_len == 3 and cache.full_precision
    part = tiny_model.forward(toks[3:], cache=cache).logits
    np.testing.assert_allclose(part, full[3:], atol=1e-5)
    assert cache.cached_len == len(toks)


def test_cache_copy_is_independent(tiny_model):
    cache = build_kv_cache(tiny_model, [18, 1, 2])
    c2 = cache.copy()
    tiny_model.forward([3], cache=c2)
    assert cache.cached_len == 3 and c2.cached_len == 4
    assert cache.keys[0].shape[0] == 3


def test_quantized_forward_clears_full_precision_flag(tiny_model):
    cache = build_kv_cache(tiny_model, [18, 1])
    tiny_model.forward([2], cache=cache, plan=ExecutionPlan.w8a8())
    assert not cache.full_precision


def test_forward_errors(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.forward([])
    with pytest.raises(ValueError):
        tiny_model.forward([99])
    with pytest.raises(ValueError):
        tiny_model.forward([1] * 65)
    with pytest.raises(ValueError):
        build_kv_cache(tiny_model, [1, 2])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_layers=1, d_model=10, n_heads=3, d_head=3, d_ff=4, vocab_size=5, bos_id=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=1, d_model=8, n_heads=2, d_head=4, d_ff=4, vocab_size=5, bos_id=4, ffn_kind="moe")


def test_container_round_trip_bit_exact(tmp_path, tiny_model):
    path = tmp_path / "m.gslm"
    data = save_model(tiny_model, path)
    assert data[:4] == b"GSLM"
    again = load_model(path)
    assert to_bytes(again) == data
    assert again.fingerprint() == tiny_model.fingerprint()
    for name, w in tiny_model.weights.items():
        np.testing.assert_array_equal(again.weights[name], w)


def test_container_offsets_aligned(tiny_model):
    import json
    import struct

    data = to_bytes(tiny_model)
    _, hlen = struct.unpack("<II", data[4:12])
    header = json.loads(data[12:12 + hlen])
    assert all(t["offset"] % 64 == 0 for t in header["tensors"])


def test_container_rejects_garbage():
    with pytest.raises(ContainerError):
        from_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContainerError):
        from_bytes(b"GSLM" + (2).to_bytes(4, "little") + bytes(8))


def test_forward_deterministic(tiny_model):
    a = tiny_model.forward([18, 5, 6, 7], plan=ExecutionPlan.w8a8(bmm=True)).logits
    b = tiny_model.forward([18, 5, 6, 7], plan=ExecutionPlan.w8a8(bmm=True)).logits
    np.testing.assert_array_equal(a, b)


def test_empty_cache_matches_no_cache(tiny_model):
    toks = [18, 3, 4]
    cache = KVCache.empty(tiny_model.cfg)
    np.testing.assert_array_equal(tiny_model.forward(toks, cache=cache).logits, tiny_model.forward(toks).logits)
