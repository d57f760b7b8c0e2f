"""Active-learning loop: select uncertain at-risk patients, queue them for
human review with two highlight layers, journal the labels, and retrain.

Eligibility follows the screening target: unlabeled patients at or above a
minimum age with no flagged ICD code or medication. Uncertainty sampling
keeps patients whose probability sits inside a band around 0.5, most
uncertain first. Labels append to a durable JSONL journal; replaying the
journal reconstructs the queue and label state exactly.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .attention import (AttnModel, HighlightToken, TokenVocab, WindowConfig,
                        attention_highlights, predict_patient)
from .concepts import ConceptLexicon, MatchSpan, concept_features
from .corpus import Corpus, PatientRecord, flag_structured
from .evaluation import ScoredSet, roc_auc
from .linear_model import DesignMatrix, LogisticModel, fit_l1_logistic, predict_proba
from .preprocess import CleanNote

LABEL_VALUES = ("present", "absent", "uncertain")


class TaskNotFound(KeyError):
    pass


class LabelConflict(RuntimeError):
    pass


class TaskStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    min_age: int = 65
    require_no_structured_flags: bool = True
    uncertainty_delta: float = 0.15
    batch_size: int = 10
    retrain_after: int = 10

    def __post_init__(self):
        if not 0.0 < self.uncertainty_delta <= 0.5:
            raise ValueError("uncertainty_delta must be in (0, 0.5]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.retrain_after < 1:
            raise ValueError("retrain_after must be >= 1")

    @classmethod
    def from_json(cls, path: str | Path) -> "LoopConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


@dataclass(frozen=True)
class Segment:
    """One display segment of a note; segments tile the note text exactly."""
    text: str
    regex_tags: tuple[str, ...] = ()
    attention_weight: Optional[float] = None


@dataclass(frozen=True)
class NoteView:
    note_id: str
    segments: tuple[Segment, ...]

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments)


@dataclass
class AnnotationTask:
    task_id: str
    patient_id: str
    probability: float
    notes: tuple[NoteView, ...]
    patient_age: int
    patient_sex: str
    med_count: int
    icd_count: int
    status: str = "pending"  # pending -> assigned -> labeled | skipped
    assigned_label: Optional[str] = None
    annotator: Optional[str] = None
    created_at: float = 0.0
    updated_at: float = 0.0


def is_eligible(patient: PatientRecord, cfg: LoopConfig,
                label_overlay: Optional[dict[str, bool]] = None) -> bool:
    """Pure predicate: unlabeled, old enough, and (by default) carrying no
    flagged structured data."""
    label = patient.gold_label
    if label_overlay and patient.patient_id in label_overlay:
        label = label_overlay[patient.patient_id]
    if label is not None:
        return False
    if patient.age < cfg.min_age:
        return False
    if cfg.require_no_structured_flags:
        flags = flag_structured(patient)
        if flags.med_count > 0 or flags.icd_count > 0:
            return False
    return True


def select_candidates(corpus: Corpus, scores: dict[str, float], cfg: LoopConfig,
                      label_overlay: Optional[dict[str, bool]] = None) -> list[str]:
    """Eligible patients inside the uncertainty band, most uncertain first
    (ties by patient_id), truncated to batch_size."""
    ranked = []
    for patient in corpus:
        if not is_eligible(patient, cfg, label_overlay):
            continue
        p = scores.get(patient.patient_id)
        if p is None:
            continue
        gap = abs(p - 0.5)
        if gap < cfg.uncertainty_delta:
            ranked.append((gap, patient.patient_id))
    ranked.sort()
    return [pid for _, pid in ranked[: cfg.batch_size]]


# ---------------------------------------------------------------------------
# Highlight segmentation
# ---------------------------------------------------------------------------

def _clean_span_to_raw(note: CleanNote, start: int, end: int
                       ) -> Optional[tuple[int, int]]:
    covered = [t for t in note.tokens
               if t.clean_start < end and t.clean_end > start]
    if not covered:
        return None
    return covered[0].raw_start, covered[-1].raw_end


def build_note_view(raw_text: str, note: CleanNote,
                    regex_spans: list[MatchSpan],
                    attn_tokens: list[tuple[int, float]]) -> NoteView:
    """Merge regex matches (clean-text coords) and attention tokens into
    non-overlapping display segments over the raw note text. attn_tokens are
    (token_index, weight) pairs for this note."""
    if note.text and not note.tokens:
        raise ValueError(f"note {note.note_id}: offset map missing")

    tagged: list[tuple[int, int, str, Optional[float]]] = []
    for span in regex_spans:
        raw = _clean_span_to_raw(note, span.start, span.end)
        if raw is not None:
            tagged.append((raw[0], raw[1], span.category, None))
    for token_index, weight in attn_tokens:
        tok = note.tokens[token_index]
        tagged.append((tok.raw_start, tok.raw_end, "", weight))

    bounds = {0, len(raw_text)}
    for s, e, _, _ in tagged:
        bounds.add(max(0, min(s, len(raw_text))))
        bounds.add(max(0, min(e, len(raw_text))))
    cuts = sorted(bounds)

    segments = []
    for a, b in zip(cuts, cuts[1:]):
        tags = sorted({cat for s, e, cat, _ in tagged if cat and s < b and e > a})
        weights = [w for s, e, _, w in tagged if w is not None and s < b and e > a]
        segments.append(Segment(
            text=raw_text[a:b],
            regex_tags=tuple(tags),
            attention_weight=max(weights) if weights else None,
        ))
    if not segments and raw_text == "":
        segments = [Segment(text="")]
    return NoteView(note_id=note.note_id, segments=tuple(segments))


def build_highlights(patient: PatientRecord, clean_notes: list[CleanNote],
                     lexicon: ConceptLexicon,
                     attn_highlights: list[HighlightToken],
                     probability: float, task_id: str) -> AnnotationTask:
    """Assemble the review task for one patient: raw notes segmented with
    regex-category tags and attention weights."""
    _, spans = concept_features(clean_notes, lexicon)
    spans_by_note: dict[str, list[MatchSpan]] = {}
    for s in spans:
        spans_by_note.setdefault(s.note_id, []).append(s)
    attn_by_note: dict[int, list[tuple[int, float]]] = {}
    for h in attn_highlights:
        attn_by_note.setdefault(h.note_index, []).append((h.token_index, h.weight))

    raw_by_id = {n.note_id: n.text for n in patient.notes}
    views = []
    for ni, cn in enumerate(clean_notes):
        views.append(build_note_view(
            raw_by_id[cn.note_id], cn,
            spans_by_note.get(cn.note_id, []),
            attn_by_note.get(ni, []),
        ))
    flags = flag_structured(patient)
    now = time.time()
    return AnnotationTask(
        task_id=task_id, patient_id=patient.patient_id, probability=probability,
        notes=tuple(views), patient_age=patient.age, patient_sex=patient.sex,
        med_count=flags.med_count, icd_count=flags.icd_count,
        created_at=now, updated_at=now,
    )


# ---------------------------------------------------------------------------
# Model backends
# ---------------------------------------------------------------------------

class ModelBackend(Protocol):
    def score(self, patient_id: str) -> float: ...
    def highlights(self, patient_id: str) -> list[HighlightToken]: ...
    def retrain(self, labels: dict[str, bool]) -> None: ...


class RegexModelBackend:
    """Concept-count logistic model; retrains on the augmented gold set."""

    def __init__(self, corpus: Corpus, clean: dict[str, list[CleanNote]],
                 lexicon: ConceptLexicon, model: LogisticModel):
        self.corpus = corpus
        self.clean = clean
        self.lexicon = lexicon
        self.model = model
        self._counts: dict[str, np.ndarray] = {}
        for patient in corpus:
            counts, _ = concept_features(clean.get(patient.patient_id, []), lexicon)
            self._counts[patient.patient_id] = np.array(counts.counts, dtype=float)

    def score(self, patient_id: str) -> float:
        return float(predict_proba(self.model, self._counts[patient_id][None, :]))

    def highlights(self, patient_id: str) -> list[HighlightToken]:
        return []  # regex spans are added by the task builder independently

    def retrain(self, labels: dict[str, bool]) -> None:
        pids = sorted(labels)
        X = np.stack([self._counts[pid] for pid in pids])
        y = np.array([1.0 if labels[pid] else 0.0 for pid in pids])
        dm = DesignMatrix.from_raw(X, self.model.feature_names)
        self.model = fit_l1_logistic(dm, y, self.model.lambda_)


class AttnModelBackend:
    """Windowed-attention model scoring plus CLS-attention highlights."""

    def __init__(self, clean: dict[str, list[CleanNote]], model: AttnModel,
                 vocab: TokenVocab, wcfg: WindowConfig, top_k: int = 10):
        self.clean = clean
        self.model = model
        self.vocab = vocab
        self.wcfg = wcfg
        self.top_k = top_k

    def score(self, patient_id: str) -> float:
        notes = self.clean.get(patient_id, [])
        if not notes:
            return 0.5
        return predict_patient(self.model, notes, self.vocab, self.wcfg).probability

    def highlights(self, patient_id: str) -> list[HighlightToken]:
        notes = self.clean.get(patient_id, [])
        if not notes:
            return []
        return attention_highlights(self.model, notes, self.vocab, self.wcfg,
                                    top_k=self.top_k)

    def retrain(self, labels: dict[str, bool]) -> None:
        return  # desk-scale services retrain the linear backend instead


class StubBackend:
    """Deterministic stand-in model: hash-based probabilities and pseudo
    attention weights; lets the review service run without trained models."""

    def __init__(self, clean: dict[str, list[CleanNote]], top_k: int = 5):
        self.clean = clean
        self.top_k = top_k

    def score(self, patient_id: str) -> float:
        h = sum(ord(c) * (i + 1) for i, c in enumerate(patient_id))
        return 0.35 + (h % 31) / 100.0  # inside (0.35, 0.66): mostly uncertain

    def highlights(self, patient_id: str) -> list[HighlightToken]:
        out = []
        for ni, note in enumerate(self.clean.get(patient_id, [])):
            rng = np.random.default_rng(abs(hash((patient_id, note.note_id))) % (2**32))
            k = min(self.top_k, len(note.tokens))
            if k == 0:
                continue
            picks = rng.choice(len(note.tokens), size=k, replace=False)
            for ti in sorted(picks.tolist()):
                out.append(HighlightToken(note_index=ni, token_index=int(ti),
                                          weight=float(rng.uniform(0.2, 0.9))))
        return out[: self.top_k]

    def retrain(self, labels: dict[str, bool]) -> None:
        return


# ---------------------------------------------------------------------------
# Journal
# ---------------------------------------------------------------------------

class LabelJournal:
    """Append-only JSONL event log with fsync on every append."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a", encoding="utf-8")

    def append(self, event: dict) -> None:
        self._fh.write(json.dumps(event, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def replay(path: str | Path) -> list[dict]:
        path = Path(path)
        if not path.exists():
            return []
        events = []
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    events.append(json.loads(line))
        return events


def _task_to_payload(task: AnnotationTask) -> dict:
    return {
        "task_id": task.task_id, "patient_id": task.patient_id,
        "probability": task.probability, "patient_age": task.patient_age,
        "patient_sex": task.patient_sex, "med_count": task.med_count,
        "icd_count": task.icd_count,
        "notes": [
            {
                "note_id": nv.note_id,
                "segments": [
                    {"text": s.text, "regex_tags": list(s.regex_tags),
                     "attention_weight": s.attention_weight}
                    for s in nv.segments
                ],
            }
            for nv in task.notes
        ],
    }


def _task_from_payload(obj: dict, created_at: float) -> AnnotationTask:
    notes = tuple(
        NoteView(
            note_id=n["note_id"],
            segments=tuple(
                Segment(text=s["text"], regex_tags=tuple(s["regex_tags"]),
                        attention_weight=s["attention_weight"])
                for s in n["segments"]
            ),
        )
        for n in obj["notes"]
    )
    return AnnotationTask(
        task_id=obj["task_id"], patient_id=obj["patient_id"],
        probability=obj["probability"], notes=notes,
        patient_age=obj["patient_age"], patient_sex=obj["patient_sex"],
        med_count=obj["med_count"], icd_count=obj["icd_count"],
        created_at=created_at, updated_at=created_at,
    )


# ---------------------------------------------------------------------------
# Annotation service
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationReport:
    created_tasks: tuple[str, ...]
    queue_pending: int
    queue_assigned: int
    queue_labeled: int
    queue_skipped: int
    retrained: bool
    labels_since_retrain: int
    test_auc: Optional[float] = None


class AnnotationService:
    """Single-writer annotation queue over a corpus, a scoring backend, and
    a durable label journal. Task checkout is atomic; labels are journaled
    before any state change becomes visible."""

    def __init__(self, corpus: Corpus, clean: dict[str, list[CleanNote]],
                 lexicon: ConceptLexicon, backend: ModelBackend,
                 cfg: LoopConfig, journal_path: str | Path,
                 test_ids: Optional[list[str]] = None):
        self.corpus = corpus
        self.clean = clean
        self.lexicon = lexicon
        self.backend = backend
        self.cfg = cfg
        self.test_ids = list(test_ids) if test_ids else []
        self._lock = threading.Lock()
        self.tasks: dict[str, AnnotationTask] = {}
        self._order: list[str] = []
        self.label_overlay: dict[str, bool] = {}
        self._labels_since_retrain = 0
        self._task_counter = 0
        self._labels_submitted = 0
        self._replay(LabelJournal.replay(journal_path))
        self.journal = LabelJournal(journal_path)

    # -- journal replay ----------------------------------------------------

    def _replay(self, events: list[dict]) -> None:
        for ev in events:
            kind = ev["event"]
            if kind == "task_created":
                task = _task_from_payload(ev["task"], ev["ts"])
                self.tasks[task.task_id] = task
                self._order.append(task.task_id)
                self._task_counter = max(self._task_counter,
                                         int(task.task_id[1:]) + 1)
            elif kind == "assigned":
                t = self.tasks[ev["task_id"]]
                t.status = "assigned"
                t.annotator = ev["annotator"]
                t.updated_at = ev["ts"]
            elif kind == "label":
                t = self.tasks[ev["task_id"]]
                t.status = "labeled"
                t.assigned_label = ev["label"]
                t.annotator = ev["annotator"]
                t.updated_at = ev["ts"]
                self._labels_submitted += 1
                self._labels_since_retrain += 1
                if ev["label"] != "uncertain":
                    self.label_overlay[t.patient_id] = ev["label"] == "present"
            elif kind == "skipped":
                t = self.tasks[ev["task_id"]]
                t.status = "skipped"
                t.updated_at = ev["ts"]
            elif kind == "retrained":
                self._labels_since_retrain = 0

    # -- queue operations --------------------------------------------------

    def queue_counts(self) -> dict[str, int]:
        counts = {"pending": 0, "assigned": 0, "labeled": 0, "skipped": 0}
        for t in self.tasks.values():
            counts[t.status] += 1
        return counts

    def get_task(self, task_id: str) -> AnnotationTask:
        if task_id not in self.tasks:
            raise TaskNotFound(task_id)
        return self.tasks[task_id]

    def next_task(self, annotator: str) -> Optional[AnnotationTask]:
        """Atomically check out the most uncertain pending task."""
        with self._lock:
            for tid in self._order:
                task = self.tasks[tid]
                if task.status == "pending":
                    task.status = "assigned"
                    task.annotator = annotator
                    task.updated_at = time.time()
                    self.journal.append({"event": "assigned", "task_id": tid,
                                         "annotator": annotator,
                                         "ts": task.updated_at})
                    return task
            return None

    def submit_label(self, task_id: str, label: str, annotator: str
                     ) -> AnnotationTask:
        """Journal the label and update state; identical resubmission is
        idempotent, a different label for a labeled task is a conflict."""
        if label not in LABEL_VALUES:
            raise ValueError(f"label must be one of {LABEL_VALUES}")
        with self._lock:
            if task_id not in self.tasks:
                raise TaskNotFound(task_id)
            task = self.tasks[task_id]
            if task.status == "labeled":
                if task.assigned_label == label:
                    return task
                raise LabelConflict(
                    f"task {task_id} already labeled {task.assigned_label!r}")
            if task.status == "skipped":
                raise TaskStateError(f"task {task_id} was skipped")
            if task.status == "pending":
                raise TaskStateError(f"task {task_id} is not checked out")
            ts = time.time()
            self.journal.append({
                "event": "label", "task_id": task_id,
                "patient_id": task.patient_id, "label": label,
                "annotator": annotator, "ts": ts,
            })
            task.status = "labeled"
            task.assigned_label = label
            task.annotator = annotator
            task.updated_at = ts
            self._labels_submitted += 1
            self._labels_since_retrain += 1
            if label != "uncertain":
                self.label_overlay[task.patient_id] = label == "present"
            return task

    def skip_task(self, task_id: str, annotator: str) -> AnnotationTask:
        with self._lock:
            if task_id not in self.tasks:
                raise TaskNotFound(task_id)
            task = self.tasks[task_id]
            if task.status in ("labeled", "skipped"):
                return task
            ts = time.time()
            self.journal.append({"event": "skipped", "task_id": task_id,
                                 "annotator": annotator, "ts": ts})
            task.status = "skipped"
            task.updated_at = ts
            return task

    @property
    def labels_submitted(self) -> int:
        return self._labels_submitted

    def gold_labels(self) -> dict[str, bool]:
        """Corpus gold labels with journaled decisions layered on top."""
        out = {p.patient_id: p.gold_label for p in self.corpus
               if p.gold_label is not None}
        out.update(self.label_overlay)
        return out

    # -- iteration ---------------------------------------------------------

    def _open_task_patients(self) -> set[str]:
        return {t.patient_id for t in self.tasks.values()
                if t.status in ("pending", "assigned")}

    def run_iteration(self) -> IterationReport:
        """Score unlabeled eligible patients, queue the most uncertain ones,
        retrain once enough labels accumulated, report queue and test state."""
        with self._lock:
            scores = {
                p.patient_id: self.backend.score(p.patient_id)
                for p in self.corpus
                if is_eligible(p, self.cfg, self.label_overlay)
            }
            candidates = select_candidates(self.corpus, scores, self.cfg,
                                           self.label_overlay)
            open_patients = self._open_task_patients()
            created = []
            for pid in candidates:
                if pid in open_patients:
                    continue
                task_id = f"T{self._task_counter:05d}"
                self._task_counter += 1
                patient = self.corpus.get(pid)
                task = build_highlights(
                    patient, self.clean.get(pid, []), self.lexicon,
                    self.backend.highlights(pid), scores[pid], task_id)
                self.tasks[task_id] = task
                self._order.append(task_id)
                created.append(task_id)
                self.journal.append({"event": "task_created", "ts": task.created_at,
                                     "task": _task_to_payload(task)})

            retrained = False
            if self._labels_since_retrain >= self.cfg.retrain_after:
                self.backend.retrain(self.gold_labels())
                self._labels_since_retrain = 0
                retrained = True
                self.journal.append({"event": "retrained", "ts": time.time()})

            test_auc = None
            if self.test_ids:
                gold = {p.patient_id: p.gold_label for p in self.corpus}
                pairs = [(self.backend.score(pid), gold[pid])
                         for pid in self.test_ids if gold.get(pid) is not None]
                if pairs and len({l for _, l in pairs}) == 2:
                    test_auc = roc_auc(ScoredSet(
                        patient_ids=tuple(self.test_ids[: len(pairs)]),
                        scores=tuple(p for p, _ in pairs),
                        labels=tuple(int(l) for _, l in pairs)))

            counts = self.queue_counts()
            return IterationReport(
                created_tasks=tuple(created),
                queue_pending=counts["pending"],
                queue_assigned=counts["assigned"],
                queue_labeled=counts["labeled"],
                queue_skipped=counts["skipped"],
                retrained=retrained,
                labels_since_retrain=self._labels_since_retrain,
                test_auc=test_auc,
            )
