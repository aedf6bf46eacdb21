"""Recognition experiments and their report tables.

Reports carry four tables: known/unknown-user summary, per-command
recognition probability, per-user recognition percentage, and optional
training-time vs accuracy rows. A trial whose result is rejected counts as
"no decision", separate from correct and incorrect recognitions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from conation import hmm
from conation.features import ObservationSequence, read_mfcc
from conation.hmm import GaussianState, HmmModel
from conation.recognizer import recognize
from conation.registry import ModelRegistry
from conation.trainer import TrainingConfig, segmental_kmeans

CORRECT, INCORRECT, NO_DECISION = "correct", "incorrect", "no_decision"

COMMAND_HEADER = ["Commands", "Number of Testing", "Recognition Probability"]
USER_HEADER = ["User", "Recognition Percentage"]
SUMMARY_HEADER = ["Type of user", "No of sound", "Correct recognition",
                  "Incorrect Recognition", "No decision"]
TIMING_HEADER = ["User", "Time to Trained the system (In Hours)", "Accuracy in percentage"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Optional[Path]
    word: str
    user: str = ""
    known: bool = True
    sequence: Optional[ObservationSequence] = field(default=None, repr=False, compare=False)

    def load(self) -> ObservationSequence:
        if self.sequence is not None:
            return self.sequence
        if self.path is None or not Path(self.path).is_file():
            raise ManifestError(f"feature file not found: {self.path}")
        return read_mfcc(self.path)


@dataclass
class TestManifest:
    entries: List[ManifestEntry]
    hours: Dict[str, float] = field(default_factory=dict)


_TRUE = {"1", "true", "yes", "y", "known", "t"}
_FALSE = {"0", "false", "no", "n", "unknown", "f"}


def _parse_bool(text: str, where: str) -> bool:
    v = text.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ManifestError(f"{where}: cannot read {text!r} as known/unknown")


def parse_manifest(text: str, base_dir=".") -> TestManifest:
    """Parse CSV with header ``path,word,user,known`` and optional ``hours``.

    Relative paths resolve against ``base_dir``.
    """
    reader = csv.DictReader(io.StringIO(text))
    required = {"path", "word", "user", "known"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise ManifestError(f"manifest header must contain {sorted(required)}")
    entries, hours = [], {}
    for lineno, row in enumerate(reader, 2):
        where = f"manifest line {lineno}"
        word = (row["word"] or "").strip()
        if not word:
            raise ManifestError(f"{where}: empty word")
        path = Path(base_dir) / row["path"].strip()
        user = (row["user"] or "").strip()
        entries.append(ManifestEntry(path, word, user, _parse_bool(row["known"] or "", where)))
        h = (row.get("hours") or "").strip()
        if h:
            try:
                hours[user] = float(h)
            except ValueError as exc:
                raise ManifestError(f"{where}: bad hours value {h!r}") from exc
    if not entries:
        raise ManifestError("manifest has no entries")
    return TestManifest(entries, hours)


def load_manifest(path) -> TestManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


# --- report -----------------------------------------------------------------


@dataclass(frozen=True)
class CommandRow:
    word: str
    n_tests: int
    n_correct: int

    @property
    def recognition_probability(self) -> float:
        return self.n_correct / self.n_tests if self.n_tests else 0.0


@dataclass(frozen=True)
class UserRow:
    user: str
    percentage: float


@dataclass(frozen=True)
class SummaryRow:
    label: str
    n: int
    correct: int
    incorrect: int
    no_decision: int


@dataclass(frozen=True)
class TimingRow:
    user: str
    hours: float
    accuracy: float


@dataclass
class EvaluationReport:
    commands: List[CommandRow] = field(default_factory=list)
    users: List[UserRow] = field(default_factory=list)
    summary: List[SummaryRow] = field(default_factory=list)
    timing: List[TimingRow] = field(default_factory=list)
    outcomes: List[str] = field(default_factory=list, repr=False)

    @property
    def n_trials(self) -> int:
        return len(self.outcomes)

    @property
    def n_correct(self) -> int:
        return self.outcomes.count(CORRECT)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_trials if self.outcomes else 0.0


def _ordered_groups(keys):
    groups: Dict[str, List[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    return groups


def build_report(manifest: TestManifest, outcomes: Sequence[str]) -> EvaluationReport:
    entries = manifest.entries
    report = EvaluationReport(outcomes=list(outcomes))
    for word, idx in _ordered_groups([e.word for e in entries]).items():
        report.commands.append(CommandRow(word, len(idx), sum(outcomes[i] == CORRECT for i in idx)))
    users = _ordered_groups([e.user for e in entries if e.user])
    user_idx = [i for i, e in enumerate(entries) if e.user]
    for user, idx in users.items():
        rows = [user_idx[j] for j in idx]
        pct = 100.0 * sum(outcomes[i] == CORRECT for i in rows) / len(rows)
        report.users.append(UserRow(user, pct))
        if user in manifest.hours:
            report.timing.append(TimingRow(user, manifest.hours[user], pct))
    for label, flag in (("Known User", True), ("Unknown user", False)):
        idx = [i for i, e in enumerate(entries) if e.known == flag]
        if idx:
            sub = [outcomes[i] for i in idx]
            report.summary.append(SummaryRow(label, len(idx), sub.count(CORRECT),
                                             sub.count(INCORRECT), sub.count(NO_DECISION)))
    return report


def evaluate(manifest: TestManifest, registry: Union[ModelRegistry, Sequence[HmmModel]],
             threshold: Optional[float] = None) -> EvaluationReport:
    """Recognise every manifest entry and tabulate the outcomes."""
    if not manifest.entries:
        raise ManifestError("manifest has no entries")
    models = registry.models() if isinstance(registry, ModelRegistry) else list(registry)
    outcomes = []
    for entry in manifest.entries:
        result = recognize(models, entry.load(), threshold)
        if not result.accepted:
            outcomes.append(NO_DECISION)
        elif result.best_word == entry.word:
            outcomes.append(CORRECT)
        else:
            outcomes.append(INCORRECT)
    return build_report(manifest, outcomes)


# --- rendering --------------------------------------------------------------


def format_percent(fraction_or_pct: float, *, is_fraction: bool = False) -> str:
    pct = 100.0 * fraction_or_pct if is_fraction else fraction_or_pct
    return f"{round(pct, 1):g}"


def _tables(report: EvaluationReport):
    return [
        ("Recognition result", SUMMARY_HEADER,
         [[r.label, r.n, r.correct, r.incorrect, r.no_decision] for r in report.summary]),
        ("Command recognition probability", COMMAND_HEADER,
         [[r.word, r.n_tests, format_percent(r.recognition_probability, is_fraction=True) + "%"]
          for r in report.commands]),
        ("Per-user recognition", USER_HEADER,
         [[r.user, format_percent(r.percentage)] for r in report.users]),
        ("Training time vs accuracy", TIMING_HEADER,
         [[r.user, f"{r.hours:g}", format_percent(r.accuracy)] for r in report.timing]),
    ]


def render_report(report: EvaluationReport, fmt: str = "markdown") -> str:
    """Render as ``markdown`` (empty tables omitted) or ``csv`` (all headers kept)."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for k, (_, header, rows) in enumerate(_tables(report)):
            if k:
                buf.write("\n")
            writer.writerow(header)
            writer.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    out = []
    for title, header, rows in _tables(report):
        if not rows:
            continue
        out.append(f"## {title}\n")
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "|".join("---" for _ in header) + "|")
        out.extend("| " + " | ".join(str(c) for c in row) + " |" for row in rows)
        out.append("")
    out.append(f"Overall accuracy: {report.n_correct}/{report.n_trials} "
               f"({format_percent(report.accuracy, is_fraction=True)}%)")
    return "\n".join(out) + "\n"


# --- synthetic closed-loop benchmark ----------------------------------------


def _separated_means(rng, count: int, dim: int, separation: float) -> np.ndarray:
    """``count`` points with pairwise distance >= ``separation``."""
    scale = separation * max(2.0, count ** (1.0 / dim))
    points: List[np.ndarray] = []
    for _ in range(100000):
        if len(points) == count:
            break
        p = rng.uniform(-scale, scale, dim)
        if all(np.linalg.norm(p - q) >= separation for q in points):
            points.append(p)
    else:
        raise RuntimeError("could not place well-separated means")
    return np.array(points)


def random_word_models(n_words: int, n_states: int, dim: int, separation: float,
                       seed: int, identical: bool = False) -> List[HmmModel]:
    """Ground-truth models with unit-variance emissions.

    Every state mean (across all models) is at least ``separation``
    standard deviations from every other. With ``identical`` all words share
    the first model's parameters.
    """
    rng = np.random.default_rng(seed)
    means = _separated_means(rng, n_words * n_states, dim, separation)
    models = []
    for w in range(n_words):
        pi = rng.dirichlet(np.ones(n_states))
        a = rng.dirichlet(np.ones(n_states), size=n_states) + 2.0 * np.eye(n_states)
        a /= a.sum(axis=1, keepdims=True)
        states = tuple(GaussianState(means[w * n_states + i], np.eye(dim))
                       for i in range(n_states))
        models.append(HmmModel(pi, a, states, f"w{w:02d}"))
    if identical:
        base = models[0]
        models = [HmmModel(base.initial, base.transitions, base.states, m.word) for m in models]
    return models


@dataclass(frozen=True)
class SynthResult:
    report: EvaluationReport
    truth: List[HmmModel]
    trained: List[HmmModel]


def run_synth(n_words: int, n_train: int, n_test: int, seed: int, config: TrainingConfig,
              separation: float = 8.0, identical: bool = False,
              min_len: int = 30, max_len: int = 60) -> SynthResult:
    if n_words < 2:
        raise ValueError("n_words must be at least 2")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    if min_len < config.n_states or max_len < min_len:
        raise ValueError(f"sequence lengths [{min_len}, {max_len}] cannot seed {config.n_states} states")
    truth = random_word_models(n_words, config.n_states, config.dim, separation, seed, identical)
    rng = np.random.default_rng([seed, 1])

    def draw(model, count):
        lengths = rng.integers(min_len, max_len + 1, size=count)
        seeds = rng.integers(0, 2**63, size=count)
        return [hmm.sample_sequence(model, int(t), int(s)) for t, s in zip(lengths, seeds)]

    trained = [segmental_kmeans(config, draw(m, n_train), m.word) for m in truth]
    entries = [ManifestEntry(None, m.word, "synthetic", True, seq)
               for m in truth for seq in draw(m, n_test)]
    report = evaluate(TestManifest(entries), trained)
    return SynthResult(report, truth, trained)


def synth_benchmark(n_words: int, n_train: int, n_test: int, seed: int,
                    config: Optional[TrainingConfig] = None, **kwargs) -> EvaluationReport:
    """Train on sequences sampled from random ground-truth HMMs and evaluate.

    Fully determined by ``seed``. Keyword arguments go to :func:`run_synth`.
    """
    if config is None:
        config = TrainingConfig(n_states=3, dim=13)
    return run_synth(n_words, n_train, n_test, seed, config, **kwargs).report
