"""Segmental K-means training of a word HMM.

Training starts from N equally spaced frames of the first training
sequence, assigns every other frame to its nearest seed, and then
alternates Viterbi segmentation with re-estimation until no frame
changes state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, List, Sequence

import numpy as np

from conation import hmm
from conation.hmm import GaussianState, HmmModel

OBJECTIVE_SLACK = 1e-9


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    n_states: int
    dim: int
    max_iterations: int = 100
    regularizer: float = hmm.REGULARIZER
    transition_floor: float = 0.0

    def __post_init__(self):
        if self.n_states < 1:
            raise TrainingError(f"n_states must be >= 1, got {self.n_states}")
        if self.dim < 1:
            raise TrainingError(f"dim must be >= 1, got {self.dim}")
        if self.max_iterations < 1:
            raise TrainingError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.regularizer > 0:
            raise TrainingError(f"regularizer must be > 0, got {self.regularizer}")
        if not 0.0 <= self.transition_floor < 1.0:
            raise TrainingError(f"transition_floor must be in [0, 1), got {self.transition_floor}")


@dataclass
class Assignment:
    paths: List[np.ndarray]
    iteration: int = 0
    changed: int = 0

    def copy(self) -> "Assignment":
        return Assignment([p.copy() for p in self.paths], self.iteration, self.changed)


@dataclass(frozen=True)
class Sweep:
    """Outcome of one segmental K-means sweep.

    ``objective`` is sum over training sets of log P(O, I* | model) for the
    model in effect after the sweep. ``accepted`` is False when the
    re-estimated model would have lowered the objective and was discarded.
    """

    iteration: int
    model: HmmModel
    objective: float
    changed: int
    accepted: bool = True
    assignment: Assignment = field(repr=False, default=None)


def _check_sets(config: TrainingConfig, sets) -> List[np.ndarray]:
    if not sets:
        raise TrainingError("no training sequences given")
    frames = [hmm.as_frames(s) for s in sets]
    for k, f in enumerate(frames):
        if f.shape[1] != config.dim:
            raise TrainingError(
                f"training set {k} has dimension {f.shape[1]}, expected {config.dim}"
            )
    if frames[0].shape[0] < config.n_states:
        raise TrainingError(
            f"first training set has {frames[0].shape[0]} frames, "
            f"need at least {config.n_states} to seed the states"
        )
    return frames


def seed_indices(n_frames: int, n_states: int) -> List[int]:
    """Frame indices round(i (T-1) / (N-1)), rounding halves up."""
    if n_states == 1:
        return [0]
    return [int(math.floor(i * (n_frames - 1) / (n_states - 1) + 0.5)) for i in range(n_states)]


def _nearest(frames: np.ndarray, means: np.ndarray) -> np.ndarray:
    d2 = np.sum((frames[:, None, :] - means[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def _repair_empty(frames: Sequence[np.ndarray], paths: List[np.ndarray], n_states: int) -> None:
    """Give every empty state one frame taken from the most populous state.

    The donated frame is the donor state's member farthest from the
    donor's mean. Mutates ``paths`` in place.
    """
    total = sum(len(p) for p in paths)
    if total < n_states:
        raise TrainingError(f"{total} observations cannot populate {n_states} states")
    all_frames = np.concatenate(frames)
    while True:
        flat = np.concatenate(paths)
        counts = np.bincount(flat, minlength=n_states)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return
        donor = int(np.argmax(counts))
        members = np.flatnonzero(flat == donor)
        mean = all_frames[members].mean(axis=0)
        dist = np.sum((all_frames[members] - mean) ** 2, axis=1)
        victim = members[int(np.argmax(dist))]
        k = int(np.searchsorted(np.cumsum([len(p) for p in paths]), victim, side="right"))
        offset = victim - sum(len(p) for p in paths[:k])
        paths[k][offset] = int(empty[0])


def estimate_model(config: TrainingConfig, frames: Sequence[np.ndarray],
                   paths: Sequence[np.ndarray], word: str = "") -> HmmModel:
    """Maximum-likelihood parameters for a fixed state assignment.

    Rows of the transition matrix with no outgoing counts are uniform.
    With ``transition_floor > 0`` unseen transitions get that probability
    before the row is renormalised.
    """
    n = config.n_states
    pi_counts = np.zeros(n)
    a_counts = np.zeros((n, n))
    for p in paths:
        pi_counts[p[0]] += 1
        np.add.at(a_counts, (p[:-1], p[1:]), 1)
    pi = pi_counts / pi_counts.sum()

    rows = a_counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(rows > 0, a_counts / rows, 1.0 / n)
    if config.transition_floor > 0:
        a = np.where(a_counts == 0, config.transition_floor, a)
        a = np.where(rows > 0, a, 1.0 / n)
        a = a / a.sum(axis=1, keepdims=True)

    all_frames = np.concatenate(frames)
    flat = np.concatenate(paths)
    states = []
    for i in range(n):
        members = all_frames[flat == i]
        if members.shape[0] == 0:
            raise TrainingError(f"state {i} has no assigned observations")
        mean = hmm.estimate_mean(members)
        cov = hmm.estimate_covariance(members, mean, config.regularizer)
        states.append(GaussianState(mean, cov))
    return HmmModel(pi, a, tuple(states), word)


def initialize_model(config: TrainingConfig, sets, word: str = ""):
    """Seed states from the first set and assign all frames to the nearest seed.

    Returns ``(model, assignment)``.
    """
    frames = _check_sets(config, sets)
    seeds = seed_indices(frames[0].shape[0], config.n_states)
    seed_means = frames[0][seeds]
    paths = [_nearest(f, seed_means).astype(np.intp) for f in frames]
    # each seed frame trains its own state even when seeds coincide
    paths[0][seeds] = np.arange(config.n_states)
    _repair_empty(frames, paths, config.n_states)
    model = estimate_model(config, frames, paths, word)
    return model, Assignment(paths)


def _decode(model: HmmModel, frames: Sequence[np.ndarray]):
    results = [hmm.viterbi(model, f) for f in frames]
    return [np.array(r.path) for r in results], float(sum(r.log_joint for r in results))


def iterate_segmental_kmeans(config: TrainingConfig, sets, word: str = "") -> Iterator[Sweep]:
    """Yield one :class:`Sweep` per iteration until convergence or the cap.

    Each sweep decodes every training set with Viterbi under the current
    model, moves frames whose state differs from the optimal path, and
    re-estimates the model. A zero-change sweep ends the loop; so does a
    re-estimate that would lower the objective (it is not accepted).
    """
    frames = _check_sets(config, sets)
    model, assignment = initialize_model(config, frames, word)
    paths, objective = _decode(model, frames)
    for it in range(1, config.max_iterations + 1):
        changed = int(sum(np.count_nonzero(p != q) for p, q in zip(paths, assignment.paths)))
        if changed == 0:
            assignment = Assignment(assignment.paths, it, 0)
            yield Sweep(it, model, objective, 0, True, assignment)
            return
        new_paths = [p.copy() for p in paths]
        _repair_empty(frames, new_paths, config.n_states)
        candidate = estimate_model(config, frames, new_paths, word)
        cand_paths, cand_objective = _decode(candidate, frames)
        if cand_objective < objective - OBJECTIVE_SLACK:
            yield Sweep(it, model, objective, changed, False, Assignment(assignment.paths, it, changed))
            return
        model, objective = candidate, cand_objective
        assignment = Assignment(new_paths, it, changed)
        paths = cand_paths
        yield Sweep(it, model, objective, changed, True, assignment)


def segmental_kmeans(config: TrainingConfig, sets, word: str = "") -> HmmModel:
    """Train a word model; see :func:`iterate_segmental_kmeans`."""
    sweep = None
    for sweep in iterate_segmental_kmeans(config, sets, word):
        pass
    return sweep.model
