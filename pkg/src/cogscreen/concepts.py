"""Concept lexicon matching: 15 named regex categories counted per patient.

Patterns run against preprocessed lowercase text, so they are written in
lowercase with word-boundary anchors. Matches are counted non-overlapping,
leftmost first per pattern; distinct patterns in one category may each match
the same text (counts sum). Negation is deliberately not handled.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .preprocess import CleanNote

DEFAULT_CATEGORY_COUNT = 15


class LexiconError(ValueError):
    """Lexicon file failed to parse or a pattern failed to compile."""


@dataclass(frozen=True)
class ConceptCategory:
    name: str
    patterns: tuple[str, ...]

    def __post_init__(self):
        if not self.patterns:
            raise LexiconError(f"category {self.name!r} has no patterns")


@dataclass(frozen=True)
class ConceptLexicon:
    categories: tuple[ConceptCategory, ...]
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.categories]
        if len(names) != len(set(names)):
            raise LexiconError("duplicate category name in lexicon")

    def __len__(self) -> int:
        return len(self.categories)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]


@dataclass(frozen=True)
class ConceptCounts:
    counts: tuple[int, ...]


@dataclass(frozen=True)
class MatchSpan:
    """One pattern match inside one clean note."""
    note_id: str
    category: str
    start: int
    end: int


@lru_cache(maxsize=8)
def _compiled(lexicon: ConceptLexicon) -> tuple[tuple[re.Pattern, ...], ...]:
    return tuple(
        tuple(re.compile(p) for p in cat.patterns) for cat in lexicon.categories
    )


def default_lexicon_path() -> Path:
    return Path(str(resources.files("cogscreen").joinpath("data/default_lexicon.json")))


def compile_lexicon(path: str | Path | None = None) -> ConceptLexicon:
    """Load and compile a lexicon file; None loads the packaged default.

    The default ships 15 categories. A file with a different category count
    still loads, but carries a warning flag so callers can surface it.
    """
    src = Path(path) if path is not None else default_lexicon_path()
    try:
        with src.open("r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise LexiconError(f"lexicon {src}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, list):
        raise LexiconError(f"lexicon {src}: expected a JSON array of categories")

    categories = []
    for entry in raw:
        name = entry.get("name")
        patterns = entry.get("patterns")
        if not name or not isinstance(patterns, list) or not patterns:
            raise LexiconError(f"lexicon {src}: category entry needs name and patterns")
        for pat in patterns:
            try:
                re.compile(pat)
            except re.error as exc:
                raise LexiconError(
                    f"category {name!r}: pattern {pat!r} does not compile: {exc}"
                ) from None
        categories.append(ConceptCategory(name=name, patterns=tuple(patterns)))

    warnings = ()
    if len(categories) != DEFAULT_CATEGORY_COUNT:
        warnings = (
            f"lexicon has {len(categories)} categories; the reference setup uses "
            f"{DEFAULT_CATEGORY_COUNT}",
        )
    lex = ConceptLexicon(categories=tuple(categories), warnings=warnings)
    _compiled(lex)
    return lex


def concept_features(notes: list[CleanNote], lexicon: ConceptLexicon
                     ) -> tuple[ConceptCounts, list[MatchSpan]]:
    """Total non-overlapping matches per category across all notes, plus the
    per-note match spans (clean-text offsets) for highlighting."""
    compiled = _compiled(lexicon)
    counts = [0] * len(lexicon.categories)
    spans: list[MatchSpan] = []
    for note in notes:
        for ci, pats in enumerate(compiled):
            cat_name = lexicon.categories[ci].name
            for pat in pats:
                for m in pat.finditer(note.text):
                    counts[ci] += 1
                    spans.append(MatchSpan(
                        note_id=note.note_id, category=cat_name,
                        start=m.start(), end=m.end(),
                    ))
    return ConceptCounts(counts=tuple(counts)), spans


def save_features_csv(rows: dict[str, ConceptCounts], lexicon: ConceptLexicon,
                      path: str | Path) -> None:
    """One row per patient: patient_id plus one count column per category."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("patient_id," + ",".join(lexicon.names) + "\n")
        for pid, counts in rows.items():
            fh.write(pid + "," + ",".join(str(c) for c in counts.counts) + "\n")


def load_features_csv(path: str | Path) -> tuple[list[str], dict[str, list[int]]]:
    """Returns (category names, patient_id -> counts)."""
    with Path(path).open("r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:1] != ["patient_id"]:
            raise ValueError(f"{path}: expected header starting with patient_id")
        names = header[1:]
        rows: dict[str, list[int]] = {}
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            rows[parts[0]] = [int(x) for x in parts[1:]]
    return names, rows
