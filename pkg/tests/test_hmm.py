"""
Tests for the Gaussian HMM: forward likelihood, K-means initialization and Baum-Welch.
"""

import itertools
import json
import logging

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from src import hmm
from src.errors import DimensionMismatchError, TrainingError


def _random_model(rng, n_states, dim):
    transition = rng.dirichlet(np.ones(n_states), size=n_states)
    initial = rng.dirichlet(np.ones(n_states))
    means = rng.normal(0, 3, size=(n_states, dim))
    variances = rng.uniform(0.5, 2.0, size=(n_states, dim))
    return hmm.GaussianHmm(transition, initial, means, variances)


def _brute_force_loglik(model, obs):
    """log P(O|λ) summed over every hidden path."""
    log_b = norm.logpdf(obs[:, None, :], model.means[None], np.sqrt(model.variances)[None]).sum(axis=2)
    terms = []
    for path in itertools.product(range(model.n_states), repeat=len(obs)):
        total = np.log(model.initial[path[0]]) + log_b[0, path[0]]
        for t in range(1, len(obs)):
            total += np.log(model.transition[path[t - 1], path[t]]) + log_b[t, path[t]]
        terms.append(total)
    return logsumexp(terms)


def test_forward_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_states = int(rng.integers(1, 4))
        dim = int(rng.integers(1, 3))
        length = int(rng.integers(1, 7))
        model = _random_model(rng, n_states, dim)
        _, obs = hmm.sample(model, length, rng)

        assert hmm.log_likelihood(model, obs) == pytest.approx(_brute_force_loglik(model, obs), rel=1e-9)


def test_batched_likelihoods_match_single_sequences():
    rng = np.random.default_rng(1)
    model = _random_model(rng, 3, 2)
    seqs = [hmm.sample(model, length, rng)[1] for length in (1, 4, 9, 2)]

    batched = hmm.log_likelihoods(model, seqs)
    assert batched == pytest.approx([hmm.log_likelihood(model, s) for s in seqs], rel=1e-12)


def test_one_dimensional_sequence_can_be_flat():
    rng = np.random.default_rng(2)
    model = _random_model(rng, 2, 1)
    _, obs = hmm.sample(model, 5, rng)
    assert hmm.log_likelihood(model, obs[:, 0]) == pytest.approx(hmm.log_likelihood(model, obs))


def test_dimension_mismatch():
    model = _random_model(np.random.default_rng(3), 2, 2)
    with pytest.raises(DimensionMismatchError):
        hmm.log_likelihoods(model, [np.zeros((4, 3))])


def test_empty_sequence_is_rejected():
    model = _random_model(np.random.default_rng(3), 2, 1)
    with pytest.raises(ValueError):
        hmm.log_likelihood(model, np.zeros((0, 1)))


def test_model_validation():
    with pytest.raises(ValueError, match="rows must sum"):
        hmm.GaussianHmm([[0.5, 0.4], [0.5, 0.5]], [0.5, 0.5], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError, match="positive"):
        hmm.GaussianHmm([[1.0]], [1.0], [[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        hmm.GaussianHmm([[1.0]], [1.0], [[0.0, 1.0]], [[1.0]])


def test_model_arrays_are_read_only():
    model = _random_model(np.random.default_rng(4), 2, 1)
    with pytest.raises(ValueError):
        model.means[0, 0] = 1.0


def test_kmeans_init_separates_clusters():
    rng = np.random.default_rng(5)
    seqs = [np.concatenate([rng.normal(-10, 0.5, (5, 1)), rng.normal(10, 0.5, (5, 1))]) for _ in range(6)]
    model = hmm.kmeans_init(seqs, 2, seed=11)

    np.testing.assert_allclose(np.sort(model.means[:, 0]), [-10, 10], atol=0.5)
    np.testing.assert_allclose(model.transition, 0.5)
    np.testing.assert_allclose(model.initial, 0.5)


def test_kmeans_init_is_seeded():
    rng = np.random.default_rng(6)
    seqs = [rng.normal(size=(8, 2)) for _ in range(5)]
    a = hmm.kmeans_init(seqs, 3, seed=42)
    b = hmm.kmeans_init(seqs, 3, seed=42)
    np.testing.assert_array_equal(a.means, b.means)


def test_kmeans_init_needs_enough_vectors():
    with pytest.raises(TrainingError):
        hmm.kmeans_init([np.zeros((2, 1))], 3, seed=0)


def test_variances_respect_the_floor():
    seqs = [np.array([[1.0], [1.0], [1.0], [5.0]])]
    model = hmm.kmeans_init(seqs, 2, seed=0)
    assert (model.variances >= hmm.variance_floor(np.concatenate(seqs))).all()
    assert (model.variances > 0).all()


def test_baum_welch_never_decreases_likelihood():
    rng = np.random.default_rng(7)
    for run in range(50):
        n_states = int(rng.integers(2, 4))
        dim = int(rng.integers(1, 3))
        truth = _random_model(rng, n_states, dim)
        seqs = [hmm.sample(truth, int(rng.integers(5, 20)), rng)[1] for _ in range(int(rng.integers(3, 6)))]
        init = hmm.kmeans_init(seqs, n_states, seed=run)

        _, trace = hmm.baum_welch(seqs, n_states, init, max_iter=30, tol=0.0)
        diffs = np.diff(trace)
        assert (diffs >= -1e-8).all(), f"run {run}: {trace}"


def test_baum_welch_recovers_well_separated_means():
    truth = hmm.GaussianHmm(
        transition=[[0.9, 0.1], [0.1, 0.9]], initial=[0.5, 0.5], means=[[-5.0], [5.0]], variances=[[1.0], [1.0]]
    )
    recovered = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        seqs = [hmm.sample(truth, 50, rng)[1] for _ in range(10)]
        model, _ = hmm.baum_welch(seqs, 2, hmm.kmeans_init(seqs, 2, seed=seed))
        if np.allclose(np.sort(model.means[:, 0]), [-5.0, 5.0], atol=0.5):
            recovered += 1
    assert recovered >= 9


def test_baum_welch_stops_on_tolerance():
    rng = np.random.default_rng(8)
    truth = hmm.GaussianHmm([[0.8, 0.2], [0.3, 0.7]], [0.5, 0.5], [[-4.0], [4.0]], [[1.0], [1.0]])
    seqs = [hmm.sample(truth, 10, rng)[1] for _ in range(4)]
    _, trace = hmm.baum_welch(seqs, 2, hmm.kmeans_init(seqs, 2, seed=0), max_iter=500, tol=1e-4)
    assert len(trace) < 500
    assert trace[-1] - trace[-2] < 1e-4


def test_baum_welch_result_is_stochastic():
    rng = np.random.default_rng(9)
    truth = _random_model(rng, 3, 2)
    seqs = [hmm.sample(truth, 12, rng)[1] for _ in range(5)]
    model, _ = hmm.baum_welch(seqs, 3, hmm.kmeans_init(seqs, 3, seed=1), max_iter=10)

    np.testing.assert_allclose(model.transition.sum(axis=1), 1.0, atol=1e-9)
    assert model.initial.sum() == pytest.approx(1.0, abs=1e-9)


def test_dead_state_is_reseeded(caplog):
    seqs = [np.array([[0.0], [0.5], [1.0], [4.0]]), np.array([[0.2], [0.8], [3.5]])]
    init = hmm.GaussianHmm(
        transition=[[0.5, 0.5], [0.5, 0.5]], initial=[0.5, 0.5], means=[[0.0], [1e6]], variances=[[1.0], [1.0]]
    )
    with caplog.at_level(logging.WARNING, logger="src.hmm"):
        model, _ = hmm.baum_welch(seqs, 2, init, max_iter=5)

    assert "lost all posterior mass" in caplog.text
    assert model.means[:, 0].max() < 1e3
    assert np.isfinite(model.variances).all()


def test_baum_welch_rejects_mismatched_init():
    init = _random_model(np.random.default_rng(10), 2, 1)
    with pytest.raises(ValueError):
        hmm.baum_welch([np.zeros((3, 1))], 3, init)


def test_sample_statistics_of_single_state_model():
    model = hmm.GaussianHmm([[1.0]], [1.0], [[3.0, -2.0]], [[4.0, 0.25]])
    states, obs = hmm.sample(model, 20_000, np.random.default_rng(11))

    assert (states == 0).all()
    np.testing.assert_allclose(obs.mean(axis=0), [3.0, -2.0], atol=0.05)
    np.testing.assert_allclose(obs.var(axis=0), [4.0, 0.25], rtol=0.05)


def test_serialization_round_trip():
    model = _random_model(np.random.default_rng(12), 3, 2)
    document = json.loads(json.dumps(hmm.to_dict(model, "Pkts+Bytes")))

    assert document["subset"] == "Pkts+Bytes"
    restored = hmm.from_dict(document)
    np.testing.assert_array_equal(restored.transition, model.transition)
    np.testing.assert_array_equal(restored.means, model.means)
    np.testing.assert_array_equal(restored.variances, model.variances)


def test_from_dict_rejects_other_formats():
    with pytest.raises(ValueError):
        hmm.from_dict({"format": "something-else", "version": 1})
