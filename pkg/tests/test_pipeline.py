import numpy as np
import pytest

from hst.config import load_run_config
from hst.dsp import DspConfig
from hst.evaluation import ManifestRecord
from hst.pipeline import balance_training_set, cache_key, load_cached, num_workers, prep, run_cv
from hst.synth import SynthSpec, generate_corpus

from test_cli import CONFIG


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    return generate_corpus(SynthSpec(n_per_class=6, seed=9), tmp_path_factory.mktemp("c"))


def test_num_workers_env(monkeypatch):
    monkeypatch.delenv("HST_NUM_WORKERS", raising=False)
    assert num_workers() == 1
    monkeypatch.setenv("HST_NUM_WORKERS", "3")
    assert num_workers() == 3
    monkeypatch.setenv("HST_NUM_WORKERS", "zero")
    assert num_workers(2) == 2


def test_cache_key_tracks_audio_and_dsp(records):
    a = cache_key(records[0].path, DspConfig())
    assert a == cache_key(records[0].path, DspConfig())
    assert a != cache_key(records[0].path, DspConfig(n_fft=1024))
    assert a != cache_key(records[1].path, DspConfig())


def test_balance_oversamples_minority_only(records, tmp_path):
    dsp = DspConfig(out_size=32)
    train = [r for r in records if r.label == 1] + [r for r in records if r.label == 0][:2]
    res = prep(train, dsp, tmp_path)
    x = load_cached(res.index, tmp_path, [r.id for r in train])
    y = np.array([r.label for r in train])
    xb, yb = balance_training_set(x, y, train, dsp, seed=0)
    assert np.bincount(yb).tolist() == [6, 6]
    assert np.array_equal(xb[:len(x)], x) and xb.shape == (12, 32, 32)
    again, _ = balance_training_set(x, y, train, dsp, seed=0)
    assert np.array_equal(again, xb)


def test_balanced_input_untouched():
    x, y = np.zeros((4, 8, 8)), np.array([0, 1, 0, 1])
    xb, yb = balance_training_set(x, y, [], DspConfig(out_size=8), seed=0)
    assert xb is x and yb is y


def test_parallel_cv_matches_serial(records, tmp_path):
    cfg = load_run_config(CONFIG, {"train.max_epochs": 1, "eval.folds": 3})
    serial, _ = run_cv(records, cfg, tmp_path / "s", workers=1)
    parallel, _ = run_cv(records, cfg, tmp_path / "p", workers=2)
    assert (tmp_path / "s" / "metrics.csv").read_bytes() == (tmp_path / "p" / "metrics.csv").read_bytes()
    assert len(serial.rows) == 3
