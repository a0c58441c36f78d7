import csv

import numpy as np
import pytest

from spikelab.calibration import (CalibrationReport, run_calibration, token_frequency, token_scale_trace,
                                  write_layer_csv, write_summary_csv, write_trace_csv)
from spikelab.model import ModuleId


def test_scales_are_token_absmax(tiny_model):
    seqs = [[18, 1, 2, 3], [18, 4, 5]]
    rep = run_calibration(tiny_model, seqs)
    tr = tiny_model.forward(seqs[0], taps=True)
    mid = ModuleId(1, "down")
    np.testing.assert_array_equal(rep.stats(mid).scales[0], np.abs(tr.taps[mid]).max(axis=1))
    assert rep.n_samples == 2
    assert rep.freq == {1: 1, 2: 1, 3: 1, 4: 1, 5: 1}


def test_requires_bos(tiny_model):
    with pytest.raises(ValueError):
        run_calibration(tiny_model, [[1, 2, 3]])
    with pytest.raises(ValueError):
        run_calibration(tiny_model, [])


def test_jobs_do_not_change_results(tiny_model):
    rng = np.random.default_rng(0)
    seqs = [[18, *rng.integers(0, 18, 10)] for _ in range(12)]
    a = run_calibration(tiny_model, seqs, jobs=1)
    b = run_calibration(tiny_model, seqs, jobs=4)
    assert a.to_json() == b.to_json()


def test_json_round_trip(tiny_model, tmp_path):
    rep = run_calibration(tiny_model, [[18, 1, 2], [18, 3]])
    path = tmp_path / "c.json"
    rep.save(path)
    again = CalibrationReport.load(path)
    assert again.to_json() == rep.to_json()
    assert again.modules.keys() == rep.modules.keys()


def test_sampler_corpus(tiny_model):
    def sampler(n, seq_len, seed):
        rng = np.random.default_rng(seed)
        return [[18, *rng.integers(0, 18, seq_len - 1)] for _ in range(n)]

    a = run_calibration(tiny_model, sampler, n_samples=3, seq_len=5, seed=7)
    b = run_calibration(tiny_model, sampler, n_samples=3, seq_len=5, seed=7)
    assert a.to_json() == b.to_json()
    assert a.seq_len == 5 and a.n_samples == 3


def test_trace_and_frequency(spike_model, spike_report):
    mid = ModuleId(1, "down")
    for i in range(spike_report.n_samples):
        tr = token_scale_trace(spike_report, mid, i)
        assert tr.argmax == int(np.argmax(tr.scales))
        if 10 in tr.tokens.tolist():
            # the first occurrence of the spike token dominates the sample
            assert tr.tokens[tr.argmax] == 10
            assert tr.argmax == tr.tokens.tolist().index(10)
    top = token_frequency(spike_report, 5)
    counts = [spike_report.freq[t] for t in top]
    assert counts == sorted(counts, reverse=True)
    with pytest.raises(IndexError):
        token_scale_trace(spike_report, mid, 10_000)
    with pytest.raises(KeyError):
        spike_report.stats(ModuleId(99, "down"))


def test_csv_writers(spike_report, tmp_path):
    write_summary_csv(spike_report, tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 32
    top = max(rows, key=lambda r: float(r["ratio"]))
    assert (top["layer"], top["kind"]) == ("1", "down")
    write_layer_csv(spike_report, tmp_path / "l.csv")
    assert len(list(csv.reader(open(tmp_path / "l.csv")))) == 9
    write_trace_csv(token_scale_trace(spike_report, ModuleId(1, "down"), 0), tmp_path / "t.csv")
    assert len(list(csv.reader(open(tmp_path / "t.csv")))) == 65
