import datetime as dt
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cogscreen.active_loop import (AnnotationService, LabelConflict,
                                   LabelJournal, LoopConfig, StubBackend,
                                   TaskNotFound, TaskStateError,
                                   build_note_view, is_eligible,
                                   select_candidates)
from cogscreen.concepts import MatchSpan
from cogscreen.corpus import (Corpus, DiagnosisRecord, Note, PatientRecord,
                              strip_labels)
from cogscreen.preprocess import CleanNote, preprocess_note

D = dt.date(2018, 3, 1)


def _patient(pid="p1", age=80, label=None, codes=()):
    return PatientRecord(
        patient_id=pid, age=age, sex="F",
        notes=(Note(note_id=f"{pid}-n", date=D, text="memory loss noted"),),
        diagnoses=tuple(DiagnosisRecord(code=c, system=s, date=D)
                        for c, s in codes),
        gold_label=label)


class TestEligibility:
    def test_age_cutoff(self):
        cfg = LoopConfig()
        assert not is_eligible(_patient(age=60), cfg)
        assert is_eligible(_patient(age=65), cfg)

    def test_structured_flags_exclude(self):
        cfg = LoopConfig()
        flagged = _patient(codes=[("G30.9", "ICD10")])
        assert not is_eligible(flagged, cfg)
        assert is_eligible(_patient(codes=[("I10", "ICD10")]), cfg)

    def test_labeled_patients_excluded(self):
        cfg = LoopConfig()
        assert not is_eligible(_patient(label=True), cfg)
        assert not is_eligible(_patient(), cfg, label_overlay={"p1": False})


class TestSelectCandidates:
    def _corpus(self):
        return Corpus(patients=(
            _patient("a", age=70), _patient("b", age=70),
            _patient("c", age=70), _patient("young", age=60),
        ))

    def test_band_filter_and_ordering(self):
        cfg = LoopConfig(uncertainty_delta=0.15)
        scores = {"a": 0.52, "b": 0.9, "c": 0.48, "young": 0.5}
        out = select_candidates(self._corpus(), scores, cfg)
        assert out == ["a", "c"]  # |0.02| ties, a before c by id; 0.9 excluded

    def test_age_exclusion_regardless_of_score(self):
        cfg = LoopConfig()
        out = select_candidates(self._corpus(), {"young": 0.5}, cfg)
        assert out == []

    def test_batch_size_one(self):
        cfg = LoopConfig(uncertainty_delta=0.2, batch_size=1)
        scores = {"a": 0.52, "b": 0.56, "c": 0.61}
        out = select_candidates(self._corpus(), scores, cfg)
        assert out == ["a"]

    def test_deterministic(self):
        cfg = LoopConfig()
        scores = {"a": 0.52, "b": 0.45, "c": 0.61}
        r1 = select_candidates(self._corpus(), scores, cfg)
        r2 = select_candidates(self._corpus(), scores, cfg)
        assert r1 == r2


class TestBuildNoteView:
    def _clean(self, raw):
        return preprocess_note(Note(note_id="n1", date=D, text=raw))

    def test_regex_only_segments(self):
        raw = "memory loss and memory complaints"
        clean = self._clean(raw)
        spans = [MatchSpan(note_id="n1", category="memory", start=0, end=6),
                 MatchSpan(note_id="n1", category="memory", start=16, end=22)]
        view = build_note_view(raw, clean, spans, [])
        assert view.text == raw
        tagged = [s for s in view.segments if s.regex_tags]
        assert len(tagged) == 2
        assert all(s.attention_weight is None for s in view.segments)

    def test_overlapping_layers_split_cover_union(self):
        raw = "severe memory loss today"
        clean = self._clean(raw)
        # regex covers "memory", attention covers "memory" and "loss"
        spans = [MatchSpan(note_id="n1", category="memory", start=7, end=13)]
        attn = [(1, 0.8), (2, 0.5)]
        view = build_note_view(raw, clean, spans, attn)
        assert view.text == raw
        seg_mem = [s for s in view.segments if "memory" in s.text.strip()]
        assert any(s.regex_tags and s.attention_weight is not None
                   for s in seg_mem)

    def test_char_coverage_oracle_random_cases(self):
        rng = np.random.default_rng(0)
        raw = "alpha beta gamma delta epsilon zeta eta theta"
        clean = self._clean(raw)
        tokens = clean.tokens
        for _ in range(40):
            k = int(rng.integers(0, 4))
            spans = []
            for _ in range(k):
                ti = int(rng.integers(len(tokens)))
                t = tokens[ti]
                spans.append(MatchSpan("n1", "memory", t.clean_start, t.clean_end))
            m = int(rng.integers(0, 4))
            attn = [(int(rng.integers(len(tokens))), float(rng.random()))
                    for _ in range(m)]
            view = build_note_view(raw, clean, spans, attn)
            assert view.text == raw
            # per-char oracle: each char's tags equal the union of covering spans
            raw_spans = []
            for s in spans:
                cov = [t for t in tokens
                       if t.clean_start < s.end and t.clean_end > s.start]
                raw_spans.append((cov[0].raw_start, cov[-1].raw_end, "memory"))
            pos = 0
            for seg in view.segments:
                for ch in range(pos, pos + len(seg.text)):
                    expect = {c for a, b, c in raw_spans if a <= ch < b}
                    assert set(seg.regex_tags) == expect or len(seg.text) == 0
                pos += len(seg.text)

    def test_no_highlights_plain_text(self):
        raw = "routine visit"
        clean = self._clean(raw)
        view = build_note_view(raw, clean, [], [])
        assert view.text == raw
        assert all(not s.regex_tags and s.attention_weight is None
                   for s in view.segments)

    def test_missing_offset_map_errors(self):
        clean = CleanNote(note_id="n1", text="memory loss", tokens=())
        with pytest.raises(ValueError, match="offset map"):
            build_note_view("memory loss", clean, [], [])


@pytest.fixture()
def service(tmp_path, small_corpus, small_clean, lexicon):
    unlabeled = strip_labels(small_corpus, keep_fraction=0.3, seed=2)
    cfg = LoopConfig(min_age=65, uncertainty_delta=0.2, batch_size=5,
                     retrain_after=3)
    return AnnotationService(unlabeled, small_clean, lexicon,
                             StubBackend(small_clean), cfg,
                             tmp_path / "labels.journal")


class TestServiceFlow:
    def test_iteration_creates_tasks(self, service):
        report = service.run_iteration()
        assert len(report.created_tasks) == 5
        assert report.queue_pending == 5
        assert not report.retrained

    def test_checkout_label_flow(self, service):
        service.run_iteration()
        task = service.next_task("ann")
        assert task.status == "assigned"
        before = service.labels_submitted
        updated = service.submit_label(task.task_id, "present", "ann")
        assert updated.status == "labeled"
        assert service.labels_submitted == before + 1
        assert service.label_overlay[task.patient_id] is True

    def test_submit_requires_checkout(self, service):
        service.run_iteration()
        pending = [t for t in service.tasks.values() if t.status == "pending"]
        with pytest.raises(TaskStateError):
            service.submit_label(pending[0].task_id, "present", "ann")

    def test_idempotent_resubmission(self, service):
        service.run_iteration()
        task = service.next_task("ann")
        service.submit_label(task.task_id, "absent", "ann")
        n = service.labels_submitted
        size = service.journal.path.stat().st_size
        again = service.submit_label(task.task_id, "absent", "ann")
        assert again.status == "labeled"
        assert service.labels_submitted == n
        assert service.journal.path.stat().st_size == size

    def test_conflicting_resubmission(self, service):
        service.run_iteration()
        task = service.next_task("ann")
        service.submit_label(task.task_id, "absent", "ann")
        size = service.journal.path.stat().st_size
        with pytest.raises(LabelConflict):
            service.submit_label(task.task_id, "present", "ann")
        assert service.journal.path.stat().st_size == size

    def test_unknown_task(self, service):
        with pytest.raises(TaskNotFound):
            service.get_task("T99999")
        with pytest.raises(TaskNotFound):
            service.submit_label("T99999", "present", "ann")

    def test_uncertain_label_not_in_gold(self, service):
        service.run_iteration()
        task = service.next_task("ann")
        service.submit_label(task.task_id, "uncertain", "ann")
        assert task.patient_id not in service.label_overlay

    def test_retrain_triggered_exactly_once(self, service):
        report = service.run_iteration()
        for _ in range(3):
            task = service.next_task("ann")
            service.submit_label(task.task_id, "present", "ann")
        report2 = service.run_iteration()
        assert report2.retrained
        assert report2.labels_since_retrain == 0
        report3 = service.run_iteration()
        assert not report3.retrained

    def test_open_tasks_not_duplicated(self, service):
        r1 = service.run_iteration()
        r2 = service.run_iteration()
        assert r2.created_tasks == ()

    def test_iteration_deterministic(self, tmp_path, small_corpus, small_clean,
                                     lexicon):
        ids = []
        for run in range(2):
            unlabeled = strip_labels(small_corpus, keep_fraction=0.3, seed=2)
            cfg = LoopConfig(min_age=65, uncertainty_delta=0.2, batch_size=5,
                             retrain_after=3)
            svc = AnnotationService(unlabeled, small_clean, lexicon,
                                    StubBackend(small_clean), cfg,
                                    tmp_path / f"j{run}.journal")
            report = svc.run_iteration()
            ids.append([svc.tasks[t].patient_id for t in report.created_tasks])
        assert ids[0] == ids[1]


class TestJournal:
    def test_replay_reconstructs_state(self, tmp_path, small_corpus,
                                       small_clean, lexicon):
        unlabeled = strip_labels(small_corpus, keep_fraction=0.3, seed=2)
        cfg = LoopConfig(min_age=65, uncertainty_delta=0.2, batch_size=5,
                         retrain_after=100)
        jpath = tmp_path / "labels.journal"
        svc = AnnotationService(unlabeled, small_clean, lexicon,
                                StubBackend(small_clean), cfg, jpath)
        svc.run_iteration()
        t1 = svc.next_task("ann")
        svc.submit_label(t1.task_id, "present", "ann")
        t2 = svc.next_task("ann")
        svc.skip_task(t2.task_id, "ann")
        t3 = svc.next_task("ann")  # left assigned

        svc2 = AnnotationService(unlabeled, small_clean, lexicon,
                                 StubBackend(small_clean), cfg, jpath)
        assert svc2.queue_counts() == svc.queue_counts()
        assert svc2.labels_submitted == svc.labels_submitted
        assert svc2.label_overlay == svc.label_overlay
        for tid, task in svc.tasks.items():
            other = svc2.tasks[tid]
            assert (task.status, task.assigned_label, task.patient_id) == \
                (other.status, other.assigned_label, other.patient_id)
            assert [n.text for n in task.notes] == [n.text for n in other.notes]

    def test_journal_append_only(self, service):
        sizes = [service.journal.path.stat().st_size]
        service.run_iteration()
        sizes.append(service.journal.path.stat().st_size)
        task = service.next_task("ann")
        sizes.append(service.journal.path.stat().st_size)
        service.submit_label(task.task_id, "absent", "ann")
        sizes.append(service.journal.path.stat().st_size)
        assert sizes == sorted(sizes)
        assert sizes[-1] > sizes[0]

    def test_replay_empty_file(self, tmp_path):
        assert LabelJournal.replay(tmp_path / "missing.journal") == []


class TestConcurrentCheckout:
    def test_no_double_assignment_under_parallel_requests(self, service):
        service.run_iteration()
        n_pending = service.queue_counts()["pending"]
        results = []
        with ThreadPoolExecutor(max_workers=32) as pool:
            futures = [pool.submit(service.next_task, f"ann{i}")
                       for i in range(100)]
            for f in futures:
                results.append(f.result())
        got = [t.task_id for t in results if t is not None]
        assert len(got) == n_pending
        assert len(set(got)) == len(got)
