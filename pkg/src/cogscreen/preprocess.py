"""Note-trimming pipeline: six ordered steps that roughly halve note length.

Steps, applied in order: whitespace collapse, fixed-header strip, blocked
section removal, entity scrubbing (dates, times, persons, quantities),
special-character and digit removal, lowercasing. The output alphabet is
lowercase letters and single spaces.

Every transformation also carries a per-character offset back into the raw
note so clean-text token spans can be highlighted in the original text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .corpus import Corpus, Note

DEFAULT_HEADER_TERMINATOR = r"^Encounter Date\b.*$"

DEFAULT_SECTION_BLOCKLIST = (
    r"^MEDICATIONS?\b",
    r"^ALLERGIES\b",
    r"^LAB RESULTS?\b",
    r"^BILLING\b",
    r"^FAMILY HISTORY\b",
)

DEFAULT_ENTITY_RULES = (
    ("date",
     r"\b\d{1,2}/\d{1,2}/\d{2,4}\b"
     r"|\b\d{4}-\d{2}-\d{2}\b"
     r"|\b(?:January|February|March|April|May|June|July|August|September|"
     r"October|November|December)\s+\d{1,2},?\s+\d{4}\b"),
    ("time",
     r"\b\d{1,2}:\d{2}(?::\d{2})?(?:\s?(?i:[ap]m))?\b"),
    ("person",
     r"\b(?:Dr|Mr|Mrs|Ms|Mx|Prof)\.?\s+[A-Z][a-z]+(?:\s+[A-Z][a-z]+)?"),
    ("quantity",
     r"\b\d+(?:\.\d+)?\s?(?i:mg|mcg|g|kg|ml|l|cm|mm|lbs?|oz|units?|tabs?|"
     r"tablets?|capsules?|puffs?|mmhg|bpm)\b"),
)

# A section title is a line of its own: uppercase-leading phrase ending in ":"
_TITLE_RE = re.compile(r"^[A-Z][A-Za-z0-9 /&'()-]*:\s*$")

_CLEAN_RE = re.compile(r"^[a-z]+( [a-z]+)*$")


@dataclass(frozen=True)
class PreprocessConfig:
    header_terminator: str = DEFAULT_HEADER_TERMINATOR
    section_blocklist: tuple[str, ...] = DEFAULT_SECTION_BLOCKLIST
    entity_scrub_rules: tuple[tuple[str, str], ...] = DEFAULT_ENTITY_RULES

    def __post_init__(self):
        re.compile(self.header_terminator)
        for pat in self.section_blocklist:
            if not pat:
                raise ValueError("blocklist titles must be nonempty")
            re.compile(pat)
        for name, pat in self.entity_scrub_rules:
            try:
                re.compile(pat)
            except re.error as exc:
                raise ValueError(f"entity rule {name!r} does not compile: {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "PreprocessConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(
            header_terminator=obj.get("header_terminator", DEFAULT_HEADER_TERMINATOR),
            section_blocklist=tuple(obj.get("section_blocklist", DEFAULT_SECTION_BLOCKLIST)),
            entity_scrub_rules=tuple(
                (name, pat) for name, pat in obj.get("entity_scrub_rules", DEFAULT_ENTITY_RULES)
            ),
        )


@dataclass(frozen=True)
class TokenSpan:
    """Clean-text token with its span in the raw note text."""
    clean_start: int
    clean_end: int
    raw_start: int
    raw_end: int


@dataclass(frozen=True)
class CleanNote:
    note_id: str
    text: str
    tokens: tuple[TokenSpan, ...] = ()

    def __post_init__(self):
        if self.text and not _CLEAN_RE.match(self.text):
            raise ValueError(f"note {self.note_id}: text violates the clean alphabet")


# ---------------------------------------------------------------------------
# Offset-tracked text transformations
# ---------------------------------------------------------------------------

def _delete_spans(text: str, offsets: list[int], spans: list[tuple[int, int]]):
    """Remove sorted non-overlapping [start, end) spans from text+offsets."""
    if not spans:
        return text, offsets
    out_t: list[str] = []
    out_o: list[int] = []
    pos = 0
    for s, e in spans:
        out_t.append(text[pos:s])
        out_o.extend(offsets[pos:s])
        pos = e
    out_t.append(text[pos:])
    out_o.extend(offsets[pos:])
    return "".join(out_t), out_o


def _iter_lines(text: str):
    """Yield (start, end) for each line, end exclusive of the newline."""
    start = 0
    while start <= len(text):
        nl = text.find("\n", start)
        if nl == -1:
            yield start, len(text)
            return
        yield start, nl
        start = nl + 1


def _normalize_lines(text: str, offsets: list[int]):
    """Drop empty lines, strip line edges, collapse internal blank runs."""
    out_t: list[str] = []
    out_o: list[int] = []
    for ls, le in _iter_lines(text):
        line = text[ls:le]
        piece_t: list[str] = []
        piece_o: list[int] = []
        in_ws = False
        for i, ch in enumerate(line):
            if ch in " \t\r\f\v":
                in_ws = True
                continue
            if in_ws and piece_t:
                piece_t.append(" ")
                piece_o.append(offsets[ls + i - 1])
            in_ws = False
            piece_t.append(ch)
            piece_o.append(offsets[ls + i])
        if not piece_t:
            continue
        if out_t:
            out_t.append("\n")
            out_o.append(piece_o[0])
        out_t.extend(piece_t)
        out_o.extend(piece_o)
    return "".join(out_t), out_o


def _strip_header(text: str, offsets: list[int], terminator: re.Pattern):
    """Remove everything through the first line matching the terminator."""
    for ls, le in _iter_lines(text):
        if terminator.match(text[ls:le]):
            cut = le + 1 if le < len(text) else le
            return text[cut:], offsets[cut:]
    return text, offsets


def _drop_blocked_sections(text: str, offsets: list[int], blocklist: list[re.Pattern]):
    """Drop content from a blocklisted title line to the next title line."""
    lines = list(_iter_lines(text))
    drop_spans: list[tuple[int, int]] = []
    i = 0
    while i < len(lines):
        ls, le = lines[i]
        line = text[ls:le]
        if _TITLE_RE.match(line) and any(b.match(line) for b in blocklist):
            j = i + 1
            while j < len(lines):
                js, je = lines[j]
                if _TITLE_RE.match(text[js:je]):
                    break
                j += 1
            end = lines[j][0] if j < len(lines) else len(text)
            drop_spans.append((ls, end))
            i = j
        else:
            i += 1
    return _delete_spans(text, offsets, drop_spans)


def _scrub_tracked(text: str, offsets: list[int], rules: list[tuple[str, re.Pattern]]):
    for _name, pattern in rules:
        spans = [m.span() for m in pattern.finditer(text)]
        text, offsets = _delete_spans(text, offsets, spans)
        text, offsets = _normalize_lines(text, offsets)
    return text, offsets


def _strip_nonletters(text: str, offsets: list[int]):
    """Replace every character outside [A-Za-z] with a space, then collapse
    all whitespace (including newlines) to single spaces."""
    out_t: list[str] = []
    out_o: list[int] = []
    pending_space_offset: Optional[int] = None
    for i, ch in enumerate(text):
        if ("a" <= ch <= "z") or ("A" <= ch <= "Z"):
            if pending_space_offset is not None and out_t:
                out_t.append(" ")
                out_o.append(pending_space_offset)
            pending_space_offset = None
            out_t.append(ch)
            out_o.append(offsets[i])
        else:
            if pending_space_offset is None:
                pending_space_offset = offsets[i]
    return "".join(out_t), out_o


def _tokenize(text: str, offsets: list[int]) -> tuple[TokenSpan, ...]:
    tokens = []
    for m in re.finditer(r"[a-z]+", text):
        s, e = m.span()
        tokens.append(TokenSpan(
            clean_start=s, clean_end=e,
            raw_start=offsets[s], raw_end=offsets[e - 1] + 1,
        ))
    return tuple(tokens)


def preprocess_note(note: Note, config: PreprocessConfig | None = None) -> CleanNote:
    """Apply the six trimming steps in order and return the clean note with
    its token-to-raw offset map. A fully stripped note yields empty text."""
    if config is None:
        config = PreprocessConfig()
    terminator = re.compile(config.header_terminator, re.IGNORECASE)
    blocklist = [re.compile(p, re.IGNORECASE) for p in config.section_blocklist]
    rules = [(name, re.compile(pat)) for name, pat in config.entity_scrub_rules]

    text = note.text
    offsets = list(range(len(text)))
    text, offsets = _normalize_lines(text, offsets)
    text, offsets = _strip_header(text, offsets, terminator)
    text, offsets = _drop_blocked_sections(text, offsets, blocklist)
    text, offsets = _scrub_tracked(text, offsets, rules)
    text, offsets = _strip_nonletters(text, offsets)
    text = text.lower()
    return CleanNote(note_id=note.note_id, text=text, tokens=_tokenize(text, offsets))


def scrub_entities(text: str, rules: tuple[tuple[str, str], ...] = DEFAULT_ENTITY_RULES) -> str:
    """Delete every maximal substring matching a rule, in rule order then
    left to right; residual whitespace runs collapse to single spaces."""
    offsets = list(range(len(text)))
    compiled = [(name, re.compile(pat)) for name, pat in rules]
    text, _ = _scrub_tracked(text, offsets, compiled)
    return text


def corpus_reduction_ratio(raw: list[Note], clean: list[CleanNote]) -> float:
    """1 - (total clean chars / total raw chars), in [0, 1]."""
    if len(raw) != len(clean):
        raise ValueError("raw and clean note lists must be parallel")
    total_raw = sum(len(n.text) for n in raw)
    if total_raw == 0:
        raise ValueError("total raw length is zero")
    total_clean = sum(len(c.text) for c in clean)
    return 1.0 - (total_clean / total_raw)


# ---------------------------------------------------------------------------
# Clean corpus persistence (parallel JSONL keyed by patient)
# ---------------------------------------------------------------------------

def preprocess_corpus(corpus: Corpus, config: PreprocessConfig | None = None
                      ) -> dict[str, list[CleanNote]]:
    """Preprocess every note; notes that strip to empty text are dropped."""
    out: dict[str, list[CleanNote]] = {}
    for patient in corpus:
        cleans = [preprocess_note(n, config) for n in patient.notes]
        out[patient.patient_id] = [c for c in cleans if c.text]
    return out


def save_clean_corpus(clean: dict[str, list[CleanNote]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for pid, notes in clean.items():
            obj = {
                "patient_id": pid,
                "notes": [
                    {
                        "note_id": c.note_id,
                        "text": c.text,
                        "tokens": [
                            [t.clean_start, t.clean_end, t.raw_start, t.raw_end]
                            for t in c.tokens
                        ],
                    }
                    for c in notes
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def load_clean_corpus(path: str | Path) -> dict[str, list[CleanNote]]:
    out: dict[str, list[CleanNote]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            notes = [
                CleanNote(
                    note_id=n["note_id"],
                    text=n["text"],
                    tokens=tuple(TokenSpan(*span) for span in n["tokens"]),
                )
                for n in obj["notes"]
            ]
            out[obj["patient_id"]] = notes
    return out
