import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efn.data import (
    DatasetFormatError,
    GPPriorSpec,
    SpikeDataset,
    bin_spikes,
    dataset_load,
    dataset_save,
    gp_kernel,
    simulate_corpus,
    simulate_dataset,
)
from efn.families import LogGaussianPoisson
from efn.special import cholesky


def test_kernel_diagonal_and_one_length_scale_apart():
    spec = GPPriorSpec(variance=2.0, length_scale=0.1, jitter=0.0)
    k = gp_kernel(spec, [0.0, 0.1, 0.5])
    assert k[0, 0] == 2.0
    assert k[0, 1] == pytest.approx(2.0 * math.exp(-0.5), rel=1e-14)
    np.testing.assert_allclose(k, k.T)


def test_kernel_jitter_and_default_grid_factorizes():
    spec = GPPriorSpec()
    k = spec.kernel()
    assert k[0, 0] == pytest.approx(1.0 + 1e-6)
    assert k.shape == (20, 20)
    cholesky(k)


def test_default_grid_matches_recording_window():
    spec = GPPriorSpec()
    np.testing.assert_allclose(spec.bin_edges[[0, -1]], [0.28, 0.68])
    np.testing.assert_allclose(np.diff(spec.bin_edges), 0.02)
    mu = spec.mean_vector()
    assert mu.shape == (20,)
    assert mu.mean() == pytest.approx(math.log(10.0), abs=0.1)


def test_vanishing_intensity_gives_no_spikes():
    spec = GPPriorSpec(mean=tuple([-20.0] * 20))
    ds, draw = simulate_dataset(spec, 100, np.random.default_rng(0))
    assert ds.counts.sum() == 0
    assert (draw.intensity > 0).all()


def test_constant_rate_gives_unit_mean_count():
    spec = GPPriorSpec()
    n = 10_000
    ds, draw = simulate_dataset(spec, n, np.random.default_rng(1), z=np.full(20, math.log(50.0)))
    np.testing.assert_allclose(draw.intensity, 1.0)
    per_bin = ds.counts.mean(axis=0)
    # Poisson(1): standard error of the mean is 1 / sqrt(n)
    assert np.abs(per_bin - 1.0).max() <= 4.0 / math.sqrt(n)


def test_per_bin_means_converge_to_intensity():
    spec = GPPriorSpec()
    n = 10_000
    ds, draw = simulate_dataset(spec, n, np.random.default_rng(2))
    se = np.sqrt(draw.intensity / n)
    assert (np.abs(ds.counts.mean(axis=0) - draw.intensity) <= 4 * se).all()


def test_same_seed_same_dataset():
    spec = GPPriorSpec()
    a, _ = simulate_dataset(spec, 20, np.random.default_rng(3))
    b, _ = simulate_dataset(spec, 20, np.random.default_rng(3))
    assert a == b
    c = simulate_corpus(spec, 3, 5, np.random.default_rng(4))
    d = simulate_corpus(spec, 3, 5, np.random.default_rng(4))
    assert [x[0] for x in c] == [x[0] for x in d]


def test_negative_trial_count_is_rejected():
    with pytest.raises(ValueError):
        simulate_dataset(GPPriorSpec(), -1, np.random.default_rng(0))


def test_binning_examples():
    assert bin_spikes([[]]).shape == (1, 20)
    assert not bin_spikes([[], []]).any()
    assert bin_spikes([[0.290]])[0, 0] == 1
    assert bin_spikes([[0.680]]).sum() == 0
    assert bin_spikes([[0.2799]]).sum() == 0


def test_spikes_on_a_nominal_edge_open_the_next_bin():
    for k in range(20):
        counts = bin_spikes([[round(0.28 + 0.02 * k, 10)]])[0]
        assert counts[k] == 1 and counts.sum() == 1


def test_binning_rejects_incommensurate_width():
    with pytest.raises(ValueError):
        bin_spikes([[0.3]], delta=0.03)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0.0, 1.0), max_size=60), min_size=1, max_size=5))
def test_binning_conserves_in_window_spikes(trials):
    counts = bin_spikes(trials)
    in_window = sum(sum(1 for t in trial if 0.28 <= t < 0.68) for trial in trials)
    assert counts.sum() == in_window
    assert (counts >= 0).all()


def test_posterior_params_consume_only_the_count_summary():
    lgp = LogGaussianPoisson()
    ds, _ = simulate_dataset(lgp.gp, 20, np.random.default_rng(5))
    totals, n = ds.summary()
    shuffled = SpikeDataset(ds.counts[::-1], ds.bin_edges, ds.delta, ds.meta)
    np.testing.assert_array_equal(lgp.natural_params(ds), lgp.natural_params(shuffled))
    eta = lgp.natural_params(ds)
    assert eta[-1] == -n
    # brute-force per-trial Poisson log-likelihood up to z-free terms
    z = np.random.default_rng(6).normal(size=20) + lgp.gp.mean_vector()
    brute = sum(float(c @ z - ds.delta * np.exp(z).sum()) for c in ds.counts)
    lik = eta[-21:-1] @ z + eta[-1] * ds.delta * np.exp(z).sum()
    assert lik == pytest.approx(brute, abs=1e-9)
    assert totals.sum() == ds.counts.sum()


def test_save_load_round_trip(tmp_path):
    ds, _ = simulate_dataset(GPPriorSpec(), 7, np.random.default_rng(7))
    ds.meta["seed"] = 7
    dataset_save(ds, tmp_path / "d.json")
    assert dataset_load(tmp_path / "d.json") == ds


def _payload(tmp_path):
    ds, _ = simulate_dataset(GPPriorSpec(), 3, np.random.default_rng(8))
    dataset_save(ds, tmp_path / "d.json")
    return json.loads((tmp_path / "d.json").read_text())


def _write(tmp_path, payload):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload))
    return path


def test_negative_count_is_rejected(tmp_path):
    p = _payload(tmp_path)
    p["counts"][1][4] = -1
    with pytest.raises(DatasetFormatError, match=r"counts\[1\]\[4\]"):
        dataset_load(_write(tmp_path, p))


def test_bin_count_mismatch_is_rejected(tmp_path):
    p = _payload(tmp_path)
    p["counts"][2] = p["counts"][2][:-1]
    with pytest.raises(DatasetFormatError, match="row 2"):
        dataset_load(_write(tmp_path, p))
    p = _payload(tmp_path)
    p["n_bins"] = 19
    with pytest.raises(DatasetFormatError, match="bin_edges"):
        dataset_load(_write(tmp_path, p))


def test_malformed_files_are_rejected(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{\n  \"format\": \n")
    with pytest.raises(DatasetFormatError, match="line"):
        dataset_load(path)
    p = _payload(tmp_path)
    p["format"] = "csv"
    with pytest.raises(DatasetFormatError, match="format"):
        dataset_load(_write(tmp_path, p))
    p = _payload(tmp_path)
    del p["delta"]
    with pytest.raises(DatasetFormatError, match="delta"):
        dataset_load(_write(tmp_path, p))
    p = _payload(tmp_path)
    p["n_trials"] = 5
    with pytest.raises(DatasetFormatError, match="rows"):
        dataset_load(_write(tmp_path, p))


def test_dataset_invariants_are_enforced():
    edges = np.linspace(0.28, 0.68, 21)
    with pytest.raises(DatasetFormatError):
        SpikeDataset(np.zeros((2, 20), int), edges[::-1], 0.02)
    with pytest.raises(DatasetFormatError):
        SpikeDataset(np.zeros((2, 20), int), edges, 0.03)
    with pytest.raises(DatasetFormatError):
        SpikeDataset(np.zeros((2, 19), int), edges, 0.02)
    with pytest.raises(DatasetFormatError):
        SpikeDataset(-np.ones((2, 20), int), edges, 0.02)


def test_gp_spec_round_trip():
    spec = GPPriorSpec(n_bins=4, mean=(1.0, 2.0, 3.0, 4.0))
    assert GPPriorSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        GPPriorSpec(n_bins=3, mean=(1.0, 2.0)).mean_vector()
