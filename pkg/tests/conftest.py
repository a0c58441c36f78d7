import numpy as np
import pytest

from spikelab.calibration import run_calibration
from spikelab.model import Model, ModelConfig, weight_shapes
from spikelab.synth import SpikeConfig, gen_spike_model, sample_corpus


def random_model(seed=0, ffn_kind="swiglu", n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab=19, scale=0.3):
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_head=d_model // n_heads,
                      d_ff=d_ff, vocab_size=vocab, bos_id=vocab - 1, ffn_kind=ffn_kind, max_seq_len=64)
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith("norm"):
            w[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            w[name] = scale * rng.standard_normal(shape)
    return Model(cfg, w)


@pytest.fixture(scope="session")
def tiny_model():
    return random_model()


@pytest.fixture(scope="session")
def spike_model():
    return gen_spike_model(seed=0)


@pytest.fixture(scope="session")
def static_model():
    return gen_spike_model(spike=SpikeConfig(spike_mode="static"), seed=0)


@pytest.fixture(scope="session")
def calib_corpus():
    return sample_corpus("synthetic", 64, 64, seed=1, spike_token_rate=0.5)


@pytest.fixture(scope="session")
def spike_report(spike_model, calib_corpus):
    return run_calibration(spike_model, calib_corpus, seed=1)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
