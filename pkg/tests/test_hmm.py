import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from conation import hmm
from conation.features import ObservationSequence
from conation.hmm import GaussianState, HmmModel
from conftest import random_model


def scalar_log_density(mean, cov, x):
    """Independent density via det/inv, no Cholesky."""
    mean, cov, x = (np.asarray(v, dtype=float) for v in (mean, cov, x))
    d = len(mean)
    diff = x - mean
    expo = -0.5 * diff @ np.linalg.inv(cov) @ diff
    return expo - 0.5 * d * math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(cov))


def enumerate_paths(model, frames):
    """log P(O, I | model) for every path I, via linear-domain products."""
    n, T = model.n_states, len(frames)
    b = [[math.exp(scalar_log_density(s.mean, s.covariance, o)) for s in model.states] for o in frames]
    out = {}
    for path in itertools.product(range(n), repeat=T):
        p = model.initial[path[0]] * b[0][path[0]]
        for t in range(1, T):
            p *= model.transitions[path[t - 1], path[t]] * b[t][path[t]]
        out[path] = math.log(p) if p > 0 else -math.inf
    return out


def log_sum(values):
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


# --- Gaussian occurrence probability ---------------------------------------


def test_standard_normal_at_mode():
    st_ = GaussianState([0.0], [[1.0]])
    lp = hmm.log_occurrence_probability(st_, [0.0])
    assert lp == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert math.exp(lp) == pytest.approx(0.3989422804014327, abs=1e-12)


def test_bivariate_standard_at_mode():
    lp = hmm.log_occurrence_probability(GaussianState([0, 0], np.eye(2)), [0, 0])
    assert lp == pytest.approx(-1.8378770664093453, abs=1e-12)


def test_diagonal_closed_form():
    lp = hmm.log_occurrence_probability(GaussianState([1, 2], np.diag([4.0, 9.0])), [3, 2])
    expected = -math.log(2 * math.pi) - 0.5 * math.log(36.0) - 0.5
    assert lp == pytest.approx(expected, abs=1e-12)


def test_density_matches_independent_formula(rng):
    for _ in range(20):
        m = random_model(rng, 1, 3)
        s = m.states[0]
        x = rng.normal(size=3)
        assert hmm.log_occurrence_probability(s, x) == pytest.approx(
            scalar_log_density(s.mean, s.covariance, x), rel=1e-10)


def test_density_integrates_to_one():
    mu, sigma = 0.7, 1.3
    s = GaussianState([mu], [[sigma ** 2]])
    grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 200001)
    dens = np.exp(s.log_density(grid[:, None]))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-6)


def test_density_permutation_invariant(rng):
    m = random_model(rng, 1, 3).states[0]
    x = rng.normal(size=3)
    perm = [2, 0, 1]
    permuted = GaussianState(m.mean[perm], m.covariance[np.ix_(perm, perm)])
    assert hmm.log_occurrence_probability(permuted, x[perm]) == pytest.approx(
        hmm.log_occurrence_probability(m, x), abs=1e-12)


def test_dimension_mismatch():
    with pytest.raises(hmm.DimensionMismatchError):
        hmm.log_occurrence_probability(GaussianState([0, 0], np.eye(2)), [1.0])


def test_cached_inverse_and_logdet(rng):
    s = random_model(rng, 1, 4).states[0]
    np.testing.assert_allclose(s.precision @ s.covariance, np.eye(4), atol=1e-9)
    assert s.log_det == pytest.approx(math.log(np.linalg.det(s.covariance)), rel=1e-9)


@pytest.mark.parametrize("cov", [
    [[1.0, 0.5], [0.4, 1.0]],
    [[1.0, 2.0], [2.0, 1.0]],
    [[0.0, 0.0], [0.0, 0.0]],
])
def test_invalid_covariance(cov):
    with pytest.raises(hmm.HmmError):
        GaussianState([0, 0], cov)


# --- model validation -------------------------------------------------------


def test_model_rejects_non_stochastic_rows():
    s = (GaussianState([0], [[1]]), GaussianState([1], [[1]]))
    with pytest.raises(hmm.HmmError, match="row"):
        HmmModel([0.5, 0.5], [[0.5, 0.4], [0.5, 0.5]], s)
    with pytest.raises(hmm.HmmError, match="initial"):
        HmmModel([0.6, 0.5], [[0.5, 0.5], [0.5, 0.5]], s)


def test_model_is_immutable(rng):
    m = random_model(rng, 2, 2)
    with pytest.raises(ValueError):
        m.transitions[0, 0] = 1.0


# --- forward ----------------------------------------------------------------


def test_single_state_forward_is_sum_of_emissions(rng):
    s = GaussianState([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    m = HmmModel([1.0], [[1.0]], (s,))
    frames = rng.normal(size=(7, 2))
    expected = sum(hmm.log_occurrence_probability(s, f) for f in frames)
    assert hmm.forward_log_likelihood(m, frames).log_likelihood == pytest.approx(expected, rel=1e-12)


def test_forward_two_state_brute_force(rng):
    m = random_model(rng, 2, 2)
    frames = hmm.as_frames(hmm.sample_sequence(m, 3, 5))
    brute = log_sum(list(enumerate_paths(m, frames).values()))
    got = hmm.forward_log_likelihood(m, frames).log_likelihood
    assert abs(got - brute) <= 1e-9 * abs(brute)


def test_forward_zero_initial_mass():
    s = (GaussianState([0.0], [[1.0]]), GaussianState([3.0], [[1.0]]))
    m = HmmModel([1.0, 0.0], [[1.0, 0.0], [0.3, 0.7]], s)
    res = hmm.forward_log_likelihood(m, [[0.1], [0.2]], keep_trellis=True)
    assert res.trellis[0, 1] == -math.inf
    assert res.trellis[1, 1] == -math.inf
    assert np.isfinite(res.log_likelihood)


def test_forward_no_support_returns_minus_inf():
    # valid chains always leave some path open, so drive the trellis directly
    log_pi = np.array([0.0, -math.inf])
    log_a = np.array([[-math.inf, 0.0], [-math.inf, 0.0]])
    log_b = np.array([[0.0, 0.0], [0.0, -math.inf], [0.0, 0.0]])
    alpha = hmm.forward_trellis(log_pi, log_a, log_b)
    assert np.all(alpha[1:] == -math.inf)
    assert not np.any(np.isnan(alpha))


def test_forward_errors(rng):
    m = random_model(rng, 2, 2)
    with pytest.raises(hmm.DimensionMismatchError):
        hmm.forward_log_likelihood(m, np.zeros((4, 3)))
    with pytest.raises(hmm.EmptySequenceError):
        hmm.forward_log_likelihood(m, np.zeros((0, 2)))


def test_forward_accepts_observation_sequence(rng):
    m = random_model(rng, 2, 3)
    seq = hmm.sample_sequence(m, 10, 1)
    assert isinstance(seq, ObservationSequence)
    a = hmm.forward_log_likelihood(m, seq).log_likelihood
    b = hmm.forward_log_likelihood(m, seq.frames.astype(float)).log_likelihood
    assert a == b


def test_forward_long_sequence_does_not_underflow(rng):
    m = random_model(rng, 3, 2)
    seq = hmm.sample_sequence(m, 5000, 3)
    ll = hmm.forward_log_likelihood(m, seq).log_likelihood
    assert np.isfinite(ll) and ll < -1000


# --- Viterbi ----------------------------------------------------------------


def test_viterbi_single_admissible_path(rng):
    s = (GaussianState([0.0], [[1.0]]), GaussianState([5.0], [[1.0]]))
    m = HmmModel([1.0, 0.0], np.eye(2), s)
    res = hmm.viterbi(m, [[5.0], [5.0], [5.0], [0.0]])
    assert res.path.tolist() == [0, 0, 0, 0]


def test_viterbi_three_state_enumeration(rng):
    m = random_model(rng, 3, 2)
    frames = hmm.as_frames(hmm.sample_sequence(m, 5, 9))
    joint = enumerate_paths(m, frames)
    assert len(joint) == 243
    best = max(joint, key=joint.get)
    res = hmm.viterbi(m, frames)
    assert tuple(res.path) == best
    assert res.log_joint == pytest.approx(joint[best], rel=1e-9)
    assert res.log_joint <= hmm.forward_log_likelihood(m, frames).log_likelihood + 1e-9


def test_viterbi_tie_break_prefers_lowest_index():
    s = GaussianState([0.0], [[1.0]])
    m = HmmModel([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], (s, s))
    assert hmm.viterbi(m, [[0.0]] * 4).path.tolist() == [0, 0, 0, 0]


def test_viterbi_forced_chain():
    s = (GaussianState([0.0], [[1.0]]), GaussianState([1.0], [[1.0]]))
    m = HmmModel([1.0, 0.0], [[0.0, 1.0], [0.0, 1.0]], s)
    assert hmm.viterbi(m, [[0.0]] * 3).path.tolist() == [0, 1, 1]


def test_viterbi_no_admissible_path():
    log_pi = np.array([0.0, -math.inf])
    log_a = np.array([[-math.inf, 0.0], [-math.inf, 0.0]])
    log_b = np.array([[0.0, 0.0], [0.0, -math.inf]])
    with pytest.raises(hmm.NoAdmissiblePathError):
        hmm.viterbi_trellis(log_pi, log_a, log_b)
    assert not issubclass(hmm.NoAdmissiblePathError, hmm.DimensionMismatchError)


def test_path_log_joint_matches_viterbi(rng):
    m = random_model(rng, 3, 2)
    seq = hmm.sample_sequence(m, 12, 4)
    res = hmm.viterbi(m, seq)
    assert hmm.path_log_joint(m, seq, res.path) == pytest.approx(res.log_joint, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), d=st.integers(1, 2),
       T=st.integers(1, 5), zero=st.sampled_from([0.0, 0.4]))
def test_forward_and_viterbi_match_enumeration(seed, n, d, T, zero):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n, d, zero_prob=zero)
    frames = rng.normal(size=(T, d))
    joint = enumerate_paths(m, frames)
    brute = log_sum(list(joint.values()))
    ll = hmm.forward_log_likelihood(m, frames).log_likelihood
    assert abs(ll - brute) <= 1e-9 * abs(brute)
    res = hmm.viterbi(m, frames)
    assert res.log_joint == pytest.approx(max(joint.values()), rel=1e-9)
    assert res.log_joint <= ll + 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-50, 50))
def test_constant_emission_shift(seed, c):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 3, 2)
    log_b = m.log_emissions(rng.normal(size=(6, 2)))
    base_f = hmm.forward_trellis(m.log_initial, m.log_transitions, log_b)[-1]
    shift_f = hmm.forward_trellis(m.log_initial, m.log_transitions, log_b + c)[-1]
    assert logsumexp(shift_f) == pytest.approx(logsumexp(base_f) + 6 * c, abs=1e-9)
    v0 = hmm.viterbi_trellis(m.log_initial, m.log_transitions, log_b)
    v1 = hmm.viterbi_trellis(m.log_initial, m.log_transitions, log_b + c)
    assert v1.log_joint == pytest.approx(v0.log_joint + 6 * c, abs=1e-9)
    assert v1.path.tolist() == v0.path.tolist()


# --- estimators -------------------------------------------------------------


@pytest.mark.parametrize("vectors, mean", [
    ([(1, 1), (3, 3)], (2, 2)),
    ([(4, -1)], (4, -1)),
    ([(0, 0), (0, 6), (6, 0)], (2, 2)),
])
def test_estimate_mean(vectors, mean):
    np.testing.assert_allclose(hmm.estimate_mean(vectors), mean)


def test_estimate_mean_empty():
    with pytest.raises(hmm.HmmError):
        hmm.estimate_mean([])


def test_covariance_1d_two_points():
    np.testing.assert_allclose(hmm.estimate_covariance([[1.0], [3.0]], [2.0], regularizer=0.0), [[1.0]])
    np.testing.assert_allclose(hmm.estimate_covariance([[1.0], [3.0]], [2.0]), [[1.0001]])


def test_covariance_identical_points():
    cov = hmm.estimate_covariance([[2.0, 5.0]] * 4, [2.0, 5.0])
    np.testing.assert_allclose(cov, 1e-4 * np.eye(2))


def test_covariance_rank_deficient():
    raw = hmm.estimate_covariance([[1, 0], [-1, 0]], [0, 0], regularizer=0.0)
    np.testing.assert_allclose(raw, [[1, 0], [0, 0]])
    reg = hmm.estimate_covariance([[1, 0], [-1, 0]], [0, 0])
    np.testing.assert_allclose(reg, [[1.0001, 0], [0, 0.0001]])
    GaussianState([0, 0], reg)


def test_covariance_errors():
    with pytest.raises(hmm.HmmError):
        hmm.estimate_covariance([], [0.0])
    with pytest.raises(hmm.DimensionMismatchError):
        hmm.estimate_covariance([[1, 2]], [0.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 6), d=st.integers(1, 5))
def test_regularized_covariance_always_factorizes(seed, m, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, d)) * rng.choice([1e-6, 1.0, 1e3])
    cov = hmm.estimate_covariance(x, hmm.estimate_mean(x))
    np.linalg.cholesky(cov)
    np.testing.assert_allclose(cov, cov.T, atol=1e-9)


# --- sampling ---------------------------------------------------------------


def test_sample_tight_gaussian():
    m = HmmModel([1.0], [[1.0]], (GaussianState([5.0, 5.0], 1e-4 * np.eye(2)),))
    seq = hmm.sample_sequence(m, 3, 0)
    assert len(seq) == 3
    assert np.all(np.abs(seq.frames - 5.0) < 5 * 1e-2)


def test_sample_is_deterministic(rng):
    m = random_model(rng, 3, 2)
    assert hmm.sample_sequence(m, 20, 42) == hmm.sample_sequence(m, 20, 42)
    assert hmm.sample_sequence(m, 20, 42) != hmm.sample_sequence(m, 20, 43)


def test_sample_mean_law_of_large_numbers():
    m = HmmModel([1.0], [[1.0]], (GaussianState([1.5, -2.0], [[1.0, 0.3], [0.3, 2.0]]),))
    seq = hmm.sample_sequence(m, 10000, 2024)
    assert np.all(np.abs(seq.frames.mean(axis=0) - [1.5, -2.0]) < 0.1)
