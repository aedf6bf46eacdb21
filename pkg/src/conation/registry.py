"""Model XML files and the per-profile ``hmms/models`` word index.

Layout of a profile directory::

    <profile>/hmms/models        word<TAB>relative-path lines
    <profile>/hmms/<word>.xml    one trained model per word
"""

from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from conation._io import atomic_write_text
from conation.hmm import GaussianState, HmmError, HmmModel

HMMS_DIR = "hmms"
INDEX_NAME = "models"
DEFAULT_PROFILE = "default"
RENORMALIZE_TOL = 1e-6


class RegistryError(ValueError):
    pass


class ModelFormatError(RegistryError):
    pass


class DuplicateWordError(RegistryError):
    pass


# --- model XML --------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _values(parent, tag, values):
    for v in values:
        ET.SubElement(parent, tag).text = _fmt(v)


def model_to_xml(model: HmmModel) -> str:
    for st in model.states:
        if not (np.all(np.isfinite(st.mean)) and np.all(np.isfinite(st.covariance))):
            raise HmmError("model has non-finite parameters")
    root = ET.Element("hmm", word=model.word, states=str(model.n_states), dim=str(model.dim))
    _values(ET.SubElement(root, "initial"), "p", model.initial)
    trans = ET.SubElement(root, "transitions")
    for row in model.transitions:
        _values(ET.SubElement(trans, "row"), "p", row)
    for i, st in enumerate(model.states):
        el = ET.SubElement(root, "state", id=str(i))
        _values(ET.SubElement(el, "mean"), "v", st.mean)
        cov = ET.SubElement(el, "covariance")
        for row in st.covariance:
            _values(ET.SubElement(cov, "row"), "v", row)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def _read_values(el, tag) -> np.ndarray:
    if el is None:
        raise ModelFormatError("missing element")
    try:
        return np.array([float(v.text) for v in el.findall(tag)], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad number in <{el.tag}>: {exc}") from exc


def _read_matrix(el, tag, n) -> np.ndarray:
    if el is None:
        raise ModelFormatError("missing matrix element")
    rows = [_read_values(r, tag) for r in el.findall("row")]
    if len(rows) != n or any(len(r) != n for r in rows):
        raise ModelFormatError(f"<{el.tag}> must be {n}x{n}")
    return np.vstack(rows)


def _stochastic(v: np.ndarray, what: str) -> np.ndarray:
    total = v.sum()
    if abs(total - 1.0) > RENORMALIZE_TOL:
        raise ModelFormatError(f"{what} sums to {total!r}")
    return v / total


def model_from_xml(text: str) -> HmmModel:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ModelFormatError(f"malformed XML: {exc}") from exc
    if root.tag != "hmm":
        raise ModelFormatError(f"root element is <{root.tag}>, expected <hmm>")
    try:
        n = int(root.get("states"))
        d = int(root.get("dim"))
    except (TypeError, ValueError) as exc:
        raise ModelFormatError("<hmm> needs integer 'states' and 'dim' attributes") from exc
    if n < 1 or d < 1:
        raise ModelFormatError("states and dim must be positive")
    word = root.get("word", "")

    pi = _read_values(root.find("initial"), "p")
    if pi.shape[0] != n:
        raise ModelFormatError(f"<initial> has {pi.shape[0]} entries, expected {n}")
    a = _read_matrix(root.find("transitions"), "p", n)
    if np.any(pi < 0) or np.any(a < 0):
        raise ModelFormatError("negative probability")
    pi = _stochastic(pi, "initial distribution")
    a = np.vstack([_stochastic(row, f"transition row {i}") for i, row in enumerate(a)])

    state_els = root.findall("state")
    if len(state_els) != n:
        raise ModelFormatError(f"states={n} but {len(state_els)} <state> elements")
    states = []
    for i, el in enumerate(sorted(state_els, key=lambda e: int(e.get("id", -1)))):
        if el.get("id") != str(i):
            raise ModelFormatError("state ids must be 0..N-1")
        mean = _read_values(el.find("mean"), "v")
        if mean.shape[0] != d:
            raise ModelFormatError(f"state {i} mean has {mean.shape[0]} values, expected {d}")
        cov = _read_matrix(el.find("covariance"), "v", d)
        try:
            states.append(GaussianState(mean, cov))
        except HmmError as exc:
            raise ModelFormatError(f"state {i}: {exc}") from exc
    try:
        return HmmModel(pi, a, tuple(states), word)
    except HmmError as exc:
        raise ModelFormatError(str(exc)) from exc


def save_model(model: HmmModel, path) -> None:
    atomic_write_text(Path(path), model_to_xml(model))


def load_model(path) -> HmmModel:
    return model_from_xml(Path(path).read_text(encoding="utf-8"))


# --- registry index ---------------------------------------------------------


def profiles_root() -> Path:
    """Directory holding all profiles: ``$CONATION_HOME`` or ``./profiles``."""
    return Path(os.environ.get("CONATION_HOME") or "profiles")


def profile_dir(name: str = DEFAULT_PROFILE) -> Path:
    if not name or "/" in name or "\\" in name or name in (".", ".."):
        raise RegistryError(f"invalid profile name {name!r}")
    return profiles_root() / name


def _check_word(word: str):
    if not word or word != word.strip() or any(c in word for c in "\t\n\r/\\") or word.startswith("#"):
        raise RegistryError(f"invalid word {word!r}")


@dataclass
class ModelRegistry:
    """Ordered word -> model-file mapping for one profile directory.

    Mutations are single-writer: callers serialise ``add_entry`` calls on a
    given profile.
    """

    root: Path
    entries: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def hmms_dir(self) -> Path:
        return Path(self.root) / HMMS_DIR

    @property
    def index_path(self) -> Path:
        return self.hmms_dir / INDEX_NAME

    @property
    def words(self) -> List[str]:
        return [w for w, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word):
        return word in self.words

    def model_path(self, word: str) -> Path:
        for w, rel in self.entries:
            if w == word:
                return self.hmms_dir / rel
        raise KeyError(word)

    def load(self, word: str) -> HmmModel:
        model = load_model(self.model_path(word))
        if model.word != word:
            model = HmmModel(model.initial, model.transitions, model.states, word)
        return model

    def models(self) -> List[HmmModel]:
        return [self.load(w) for w in self.words]


def _render_index(entries) -> str:
    return "".join(f"{w}\t{rel}\n" for w, rel in entries)


def create_registry(profile_root) -> ModelRegistry:
    """Open the registry at ``profile_root``, creating an empty one if absent."""
    reg = ModelRegistry(Path(profile_root))
    if reg.index_path.exists():
        return load_registry(profile_root)
    reg.hmms_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(reg.index_path, "")
    return reg


def load_registry(profile_root) -> ModelRegistry:
    reg = ModelRegistry(Path(profile_root))
    if not reg.index_path.is_file():
        raise RegistryError(f"no model index at {reg.index_path}")
    seen = set()
    for lineno, line in enumerate(reg.index_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise RegistryError(f"{reg.index_path}:{lineno}: expected 'word<TAB>path'")
        word, rel = parts
        if word in seen:
            raise DuplicateWordError(f"{reg.index_path}:{lineno}: duplicate word {word!r}")
        if not (reg.hmms_dir / rel).is_file():
            raise RegistryError(f"{reg.index_path}:{lineno}: model file {rel!r} not found")
        seen.add(word)
        reg.entries.append((word, rel))
    return reg


def add_entry(registry: ModelRegistry, word: str, model: HmmModel) -> ModelRegistry:
    """Save ``model`` as ``hmms/<word>.xml`` and append it to the index."""
    _check_word(word)
    if word in registry:
        raise DuplicateWordError(f"word {word!r} already registered")
    registry.hmms_dir.mkdir(parents=True, exist_ok=True)
    rel = f"{word}.xml"
    if model.word != word:
        model = HmmModel(model.initial, model.transitions, model.states, word)
    save_model(model, registry.hmms_dir / rel)
    entries = registry.entries + [(word, rel)]
    atomic_write_text(registry.index_path, _render_index(entries))
    return ModelRegistry(registry.root, entries)
