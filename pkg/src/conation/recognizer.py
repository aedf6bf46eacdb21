"""Word scoring with threshold rejection, and the command interpreter.

Scores are forward log-likelihoods divided by the number of frames, so a
single threshold (nats per frame) applies to utterances of any length.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from conation.hmm import DimensionMismatchError, HmmModel, as_frames, forward_log_likelihood

UNMAPPED = "unmapped"

ACTIVATE = "activate"
DEACTIVATE = "deactivate"
ENTER_NUMERIC = "enterthenumericstate"
EXIT_NUMERIC = "exitthenumericstate"
ENTER_ALPHABETIC = "enteralphabeticstate"
EXIT_ALPHABETIC = "exitthealphabeticstate"

NONE, NUMERIC, ALPHABETIC = "none", "numeric", "alphabetic"


@dataclass(frozen=True)
class RecognitionResult:
    scores: List[Tuple[str, float]]
    best_word: Optional[str]
    accepted: bool
    threshold: Optional[float] = None
    skipped: List[str] = field(default_factory=list)

    @property
    def best_score(self) -> float:
        if self.best_word is None:
            return -math.inf
        return max(s for _, s in self.scores)


def recognize(models: Sequence[HmmModel], seq, threshold: Optional[float] = None,
              permissive: bool = False) -> RecognitionResult:
    """Score ``seq`` against every model and pick the best word.

    ``threshold=None`` disables rejection. A model whose dimension differs
    from the sequence is a hard error unless ``permissive``, in which case
    it scores ``-inf`` and is listed in ``skipped``. Ties go to the model
    listed first; a best score of ``-inf`` is never accepted.
    """
    n_frames = as_frames(seq).shape[0]
    scores, skipped = [], []
    for model in models:
        try:
            ll = forward_log_likelihood(model, seq).log_likelihood
        except DimensionMismatchError:
            if not permissive:
                raise
            skipped.append(model.word)
            ll = -math.inf
        scores.append((model.word, ll / n_frames))
    if not scores:
        return RecognitionResult([], None, False, threshold, skipped)
    best = 0
    for i, (_, s) in enumerate(scores):
        if s > scores[best][1]:
            best = i
    best_score = scores[best][1]
    accepted = best_score > -math.inf and (threshold is None or best_score >= threshold)
    return RecognitionResult(scores, scores[best][0], accepted, threshold, skipped)


# --- dispatch map -----------------------------------------------------------


def parse_dispatch(text: str) -> Dict[str, str]:
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1].strip():
            raise ValueError(f"dispatch line {lineno}: expected 'word<TAB>action'")
        mapping[parts[0]] = parts[1].strip()
    return mapping


def load_dispatch(path=None) -> Dict[str, str]:
    """Read a ``word<TAB>action`` map; the bundled 30-command map by default."""
    if path is None:
        text = resources.files("conation").joinpath("dispatch.conf").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_dispatch(text)


def default_vocabulary() -> List[str]:
    return list(load_dispatch())


# --- interpreter ------------------------------------------------------------


@dataclass(frozen=True)
class InterpreterState:
    active: bool = False
    sub_mode: str = NONE

    def __post_init__(self):
        if self.sub_mode not in (NONE, NUMERIC, ALPHABETIC):
            raise ValueError(f"unknown sub-mode {self.sub_mode!r}")
        if not self.active and self.sub_mode != NONE:
            raise ValueError("sub-mode requires an active interpreter")

    def to_dict(self):
        return {"active": self.active, "sub_mode": self.sub_mode}


@dataclass(frozen=True)
class ActionEvent:
    word: str
    action: str
    mode_before: InterpreterState
    mode_after: InterpreterState
    score: float
    timestamp: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "word": self.word,
            "action": self.action,
            "mode_before": self.mode_before.to_dict(),
            "mode_after": self.mode_after.to_dict(),
            "score": self.score,
        }, sort_keys=False)


def _lookup(dispatch: Dict[str, str], word: str) -> Optional[str]:
    if word in dispatch:
        return dispatch[word]
    folded = word.casefold()
    for key, action in dispatch.items():
        if key.casefold() == folded:
            return action
    return None


def interpret(state: InterpreterState, result: RecognitionResult, dispatch: Dict[str, str],
              clock=time.time):
    """Advance the interpreter by one recognition result.

    Returns ``(new_state, event_or_None)``. Mode words are matched
    case-insensitively. While inactive only "Activate" has an effect.
    """
    if not result.accepted or result.best_word is None:
        return state, None
    word = result.best_word
    key = word.casefold().replace(" ", "")
    mapped = _lookup(dispatch, word)

    def emit(new_state, default_action):
        action = mapped if mapped is not None else default_action
        return new_state, ActionEvent(word, action, state, new_state, result.best_score, clock())

    if key == ACTIVATE:
        return emit(InterpreterState(True, state.sub_mode), "mode:activate")
    if not state.active:
        return state, None
    if key == DEACTIVATE:
        return emit(InterpreterState(False, NONE), "mode:deactivate")
    if key == ENTER_NUMERIC:
        return emit(InterpreterState(True, NUMERIC), "mode:enter-numeric")
    if key == ENTER_ALPHABETIC:
        return emit(InterpreterState(True, ALPHABETIC), "mode:enter-alphabetic")
    if key == EXIT_NUMERIC:
        if state.sub_mode != NUMERIC:
            return state, None
        return emit(InterpreterState(True, NONE), "mode:exit-numeric")
    if key == EXIT_ALPHABETIC:
        if state.sub_mode != ALPHABETIC:
            return state, None
        return emit(InterpreterState(True, NONE), "mode:exit-alphabetic")
    return emit(state, UNMAPPED)
