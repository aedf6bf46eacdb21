"""Continuous-density HMM: Gaussian states, forward scoring, Viterbi decoding.

All probabilities are handled in the log domain (natural log). Zero
initial or transition probabilities become ``-inf`` and are carried
through explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

from conation.features import ObservationSequence

REGULARIZER = 1e-4
STOCHASTIC_TOL = 1e-9
SYMMETRY_TOL = 1e-9
_LOG_2PI = np.log(2.0 * np.pi)


class HmmError(ValueError):
    pass


class DimensionMismatchError(HmmError):
    pass


class EmptySequenceError(HmmError):
    pass


class NoAdmissiblePathError(HmmError):
    """Every state sequence has zero probability under the model."""


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianState:
    """One emitting state: a full-covariance multivariate normal.

    The Cholesky factor, inverse and log-determinant are computed once on
    construction; a covariance that is not symmetric positive definite is
    rejected.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.covariance, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionMismatchError(
                f"covariance shape {cov.shape} does not match mean dimension {d}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise HmmError("state parameters must be finite")
        if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(cov))):
            raise HmmError("covariance is not symmetric")
        try:
            chol = cholesky(cov, lower=True)
        except LinAlgError as exc:
            raise HmmError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "covariance", _readonly(cov))
        object.__setattr__(self, "cholesky", _readonly(chol))
        object.__setattr__(self, "log_det", float(2.0 * np.sum(np.log(np.diag(chol)))))
        object.__setattr__(self, "precision", _readonly(cho_solve((chol, True), np.eye(d))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, frames: np.ndarray) -> np.ndarray:
        """Log density at each row of ``frames`` (shape (T, D)) -> shape (T,)."""
        diff = np.asarray(frames, dtype=np.float64) - self.mean
        z = solve_triangular(self.cholesky, diff.T, lower=True)
        maha = np.sum(z * z, axis=0)
        return -0.5 * (self.dim * _LOG_2PI + self.log_det + maha)


@dataclass(frozen=True, eq=False)
class HmmModel:
    """One word's model: initial probabilities, transition matrix, states."""

    initial: np.ndarray
    transitions: np.ndarray
    states: tuple
    word: str = ""

    def __post_init__(self):
        pi = np.array(self.initial, dtype=np.float64).reshape(-1)
        a = np.array(self.transitions, dtype=np.float64)
        states = tuple(self.states)
        n = pi.shape[0]
        if n < 1:
            raise HmmError("model needs at least one state")
        if a.shape != (n, n):
            raise DimensionMismatchError(f"transition matrix shape {a.shape}, expected {(n, n)}")
        if len(states) != n:
            raise DimensionMismatchError(f"{len(states)} states given for N={n}")
        for name, arr in (("initial", pi), ("transition", a)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
                raise HmmError(f"{name} probabilities must lie in [0, 1]")
        if abs(pi.sum() - 1.0) > STOCHASTIC_TOL:
            raise HmmError(f"initial probabilities sum to {pi.sum()!r}")
        bad = np.flatnonzero(np.abs(a.sum(axis=1) - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise HmmError(f"transition row {bad[0]} sums to {a[bad[0]].sum()!r}")
        dims = {s.dim for s in states}
        if len(dims) != 1:
            raise DimensionMismatchError(f"states disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "initial", _readonly(pi))
        object.__setattr__(self, "transitions", _readonly(a))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "log_initial", _readonly(_log(pi)))
        object.__setattr__(self, "log_transitions", _readonly(_log(a)))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def dim(self) -> int:
        return self.states[0].dim

    def log_emissions(self, seq) -> np.ndarray:
        """(T, N) matrix of log b_i(O_t)."""
        frames = as_frames(seq)
        if frames.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"sequence dimension {frames.shape[1]} != model dimension {self.dim}"
                + (f" (model {self.word!r})" if self.word else "")
            )
        return np.column_stack([s.log_density(frames) for s in self.states])


@dataclass(frozen=True)
class ForwardResult:
    log_likelihood: float
    trellis: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PathResult:
    path: np.ndarray
    log_joint: float


def as_frames(seq) -> np.ndarray:
    """Float64 (T, D) view of an ObservationSequence or array-like."""
    if isinstance(seq, ObservationSequence):
        frames = seq.frames.astype(np.float64)
    else:
        frames = np.asarray(seq, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[:, None]
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptySequenceError("observation sequence is empty")
    return frames


# --- single-state density ---------------------------------------------------


def log_occurrence_probability(state: GaussianState, obs) -> float:
    """log N(obs; mean, covariance) with the standard |V|^(1/2) normalizer."""
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if obs.shape[0] != state.dim:
        raise DimensionMismatchError(
            f"observation dimension {obs.shape[0]} != state dimension {state.dim}"
        )
    return float(state.log_density(obs[None, :])[0])


# --- forward / Viterbi on precomputed log emissions -------------------------


def forward_trellis(log_initial, log_transitions, log_emissions) -> np.ndarray:
    """log alpha_t(i) for every t, i.

    Each step computes log sum_i exp(alpha_i) a_ij as
    m + log(exp(alpha - m) @ A) with m = max_i alpha_i.
    """
    log_emissions = np.asarray(log_emissions, dtype=np.float64)
    T, n = log_emissions.shape
    trans = np.exp(log_transitions)
    alpha = np.empty((T, n))
    alpha[0] = log_initial + log_emissions[0]
    with np.errstate(divide="ignore"):
        for t in range(1, T):
            m = alpha[t - 1].max()
            if m == -np.inf:
                alpha[t:] = -np.inf
                break
            alpha[t] = m + np.log(np.exp(alpha[t - 1] - m) @ trans) + log_emissions[t]
    return alpha


def viterbi_trellis(log_initial, log_transitions, log_emissions) -> PathResult:
    log_emissions = np.asarray(log_emissions, dtype=np.float64)
    T, n = log_emissions.shape
    delta = log_initial + log_emissions[0]
    back = np.zeros((T, n), dtype=np.intp)
    for t in range(1, T):
        cand = delta[:, None] + log_transitions
        # argmax returns the first maximum: lowest predecessor wins ties
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(n)] + log_emissions[t]
    last = int(np.argmax(delta))
    best = float(delta[last])
    if best == -np.inf:
        raise NoAdmissiblePathError("no state sequence has non-zero probability")
    path = np.empty(T, dtype=np.intp)
    path[-1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return PathResult(_readonly(path), best)


# --- model-level operations -------------------------------------------------


def forward_log_likelihood(model: HmmModel, seq, keep_trellis: bool = False) -> ForwardResult:
    """log P(O | model) by the forward recursion."""
    alpha = forward_trellis(model.log_initial, model.log_transitions, model.log_emissions(seq))
    ll = float(logsumexp(alpha[-1]))
    return ForwardResult(ll, _readonly(alpha) if keep_trellis else None)


def viterbi(model: HmmModel, seq) -> PathResult:
    """Most probable state path and its joint log probability log P(O, I* | model)."""
    return viterbi_trellis(model.log_initial, model.log_transitions, model.log_emissions(seq))


def path_log_joint(model: HmmModel, seq, path: Sequence[int]) -> float:
    """log P(O, I | model) for a given state path I."""
    log_b = model.log_emissions(seq)
    path = np.asarray(path, dtype=np.intp)
    if path.shape[0] != log_b.shape[0]:
        raise DimensionMismatchError("path length differs from sequence length")
    total = model.log_initial[path[0]] + np.sum(log_b[np.arange(len(path)), path])
    total += np.sum(model.log_transitions[path[:-1], path[1:]])
    return float(total)


# --- estimators -------------------------------------------------------------


def _stack(assigned) -> np.ndarray:
    x = np.asarray(assigned, dtype=np.float64)
    if x.size == 0 or x.shape[0] == 0:
        raise HmmError("cannot estimate from an empty assignment")
    if x.ndim == 1:
        x = x[:, None]
    return x


def estimate_mean(assigned) -> np.ndarray:
    return _stack(assigned).mean(axis=0)


def estimate_covariance(assigned, mean, regularizer: float = REGULARIZER) -> np.ndarray:
    """(1/M) sum (x - mean)(x - mean)^T over the M assigned vectors, plus regularizer * I."""
    x = _stack(assigned)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mean.shape[0] != x.shape[1]:
        raise DimensionMismatchError(f"mean dimension {mean.shape[0]} != data dimension {x.shape[1]}")
    diff = x - mean
    cov = diff.T @ diff / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    return cov + regularizer * np.eye(x.shape[1])


# --- sampling ---------------------------------------------------------------


def sample_sequence(model: HmmModel, length: int, seed: int) -> ObservationSequence:
    """Draw a state path and Gaussian emissions from ``model``; deterministic in ``seed``."""
    if length < 1:
        raise HmmError("length must be at least 1")
    rng = np.random.default_rng(seed)
    n = model.n_states
    states = np.empty(length, dtype=np.intp)
    states[0] = rng.choice(n, p=model.initial)
    for t in range(1, length):
        states[t] = rng.choice(n, p=model.transitions[states[t - 1]])
    z = rng.standard_normal((length, model.dim))
    frames = np.empty((length, model.dim))
    for i, state in enumerate(model.states):
        rows = states == i
        frames[rows] = state.mean + z[rows] @ state.cholesky.T
    return ObservationSequence(frames)
