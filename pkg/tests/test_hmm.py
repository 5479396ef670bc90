import numpy as np
import pytest

from oracles import viterbi_bruteforce
from twinmdp.errors import DegenerateData, DimensionMismatch
from twinmdp.hmm import Hmm, fit_hmm, sequence_log_likelihood, viterbi_decode


def random_hmm(k, d, rng):
    initial = rng.dirichlet(np.ones(k))
    transition = np.stack([rng.dirichlet(np.ones(k)) for _ in range(k)])
    means = rng.normal(0, 2, size=(k, d))
    variances = rng.uniform(0.2, 1.5, size=(k, d))
    return Hmm(initial=initial, transition=transition, means=means,
               variances=variances)


def sample_sequences(hmm, n_seqs, length, rng):
    seqs = []
    for _ in range(n_seqs):
        obs = np.empty((length, hmm.n_features))
        z = rng.choice(hmm.n_states, p=hmm.initial)
        for t in range(length):
            obs[t] = rng.normal(hmm.means[z], np.sqrt(hmm.variances[z]))
            z = rng.choice(hmm.n_states, p=hmm.transition[z])
        seqs.append(obs)
    return seqs


class TestFit:
    def test_single_state_matches_pooled_moments(self):
        rng = np.random.default_rng(0)
        seqs = [rng.normal(3.0, 2.0, size=(15, 2)) for _ in range(4)]
        model, _ = fit_hmm(seqs, 1, max_iter=10, seed=0)
        pooled = np.concatenate(seqs)
        assert model.transition == pytest.approx(np.array([[1.0]]))
        assert model.means[0] == pytest.approx(pooled.mean(axis=0), abs=1e-9)
        assert model.variances[0] == pytest.approx(pooled.var(axis=0), abs=1e-9)

    def test_log_likelihood_never_decreases(self):
        rng = np.random.default_rng(1)
        for trial in range(50):
            k = int(rng.integers(1, 4))
            d = int(rng.integers(1, 4))
            true = random_hmm(k, d, rng)
            seqs = sample_sequences(true, 5, 12, rng)
            _, trace = fit_hmm(seqs, k, max_iter=25, tol=0.0, seed=trial)
            diffs = np.diff(trace)
            assert np.all(diffs >= -1e-9), f"trial {trial}: {diffs.min()}"

    def test_two_state_recovery_with_separated_means(self):
        rng = np.random.default_rng(2)
        true = Hmm(
            initial=np.array([0.6, 0.4]),
            transition=np.array([[0.8, 0.2], [0.3, 0.7]]),
            means=np.array([[0.0, 0.0], [6.0, 6.0]]),
            variances=np.ones((2, 2)),
        )
        seqs = sample_sequences(true, 200, 20, rng)
        model, _ = fit_hmm(seqs, 2, max_iter=60, seed=0)
        # states may come back permuted
        perms = [(0, 1), (1, 0)]
        err = min(
            np.max(np.abs(model.means[list(p)] - true.means)) for p in perms
        )
        assert err < 0.1

    def test_degenerate_data_rejected(self):
        seqs = [np.ones((5, 2)) for _ in range(3)]
        with pytest.raises(DegenerateData):
            fit_hmm(seqs, 2)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            fit_hmm([np.ones((3, 2)), np.ones((3, 3))], 1)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        seqs = sample_sequences(random_hmm(2, 2, rng), 10, 8, rng)
        a, _ = fit_hmm(seqs, 2, max_iter=15, seed=9)
        b, _ = fit_hmm(seqs, 2, max_iter=15, seed=9)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.transition, b.transition)

    def test_variance_floor_enforced(self):
        rng = np.random.default_rng(6)
        base = rng.normal(0, 1, size=(30, 1))
        seqs = [np.concatenate([base, np.full((30, 1), 2.0)], axis=1)]
        model, _ = fit_hmm(seqs, 1, max_iter=5, seed=0)
        assert np.all(model.variances >= 1e-6)


class TestViterbi:
    def test_single_state_path_is_zeros(self):
        model = Hmm(
            initial=np.array([1.0]),
            transition=np.array([[1.0]]),
            means=np.zeros((1, 2)),
            variances=np.ones((1, 2)),
        )
        seq = np.random.default_rng(0).normal(size=(6, 2))
        assert viterbi_decode(model, seq) == [0] * 6

    @pytest.mark.parametrize("k,t", [(2, 6), (3, 8)])
    def test_matches_bruteforce_enumeration(self, k, t):
        rng = np.random.default_rng(100 * k + t)
        for _ in range(30):
            model = random_hmm(k, 2, rng)
            seq = rng.normal(0, 2, size=(t, 2))
            got = viterbi_decode(model, seq)
            want = viterbi_bruteforce(model.initial, model.transition,
                                      model.means, model.variances, seq)
            assert got == want

    def test_bruteforce_equivalence_many_shapes(self):
        rng = np.random.default_rng(77)
        cases = 0
        while cases < 160:
            k = int(rng.integers(1, 4))
            t = int(rng.integers(1, 9))
            model = random_hmm(k, int(rng.integers(1, 3)), rng)
            seq = rng.normal(0, 2, size=(t, model.n_features))
            got = viterbi_decode(model, seq)
            want = viterbi_bruteforce(model.initial, model.transition,
                                      model.means, model.variances, seq)
            assert got == want
            cases += 1

    def test_dimension_mismatch(self):
        model = random_hmm(2, 3, np.random.default_rng(0))
        with pytest.raises(DimensionMismatch):
            viterbi_decode(model, np.zeros((4, 2)))


def test_sequence_log_likelihood_matches_trace():
    rng = np.random.default_rng(8)
    true = random_hmm(2, 2, rng)
    seqs = sample_sequences(true, 6, 10, rng)
    model, trace = fit_hmm(seqs, 2, max_iter=1, tol=0.0, seed=0)
    # trace[0] is the likelihood under the k-means initialization, evaluated
    # before the first M-step; recompute it against the initial parameters
    model2, trace2 = fit_hmm(seqs, 2, max_iter=2, tol=0.0, seed=0)
    total = sum(sequence_log_likelihood(model, s) for s in seqs)
    assert total == pytest.approx(trace2[1], abs=1e-9)
