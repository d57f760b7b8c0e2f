"""HTTP+JSON review API over the annotation service.

Endpoints: GET /api/tasks/next (atomic checkout), GET /api/tasks/{id},
POST /api/tasks/{id}/label, POST /api/tasks/{id}/skip, GET /api/metrics,
POST /api/iterate. Static frontend assets can be mounted at the root.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, Query
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .active_loop import (AnnotationService, AnnotationTask, LabelConflict,
                          TaskNotFound, TaskStateError)


class SegmentOut(BaseModel):
    text: str
    regex_tags: list[str] = Field(default_factory=list)
    attention_weight: Optional[float] = None


class NoteOut(BaseModel):
    note_id: str
    segments: list[SegmentOut]


class PatientSummary(BaseModel):
    age: int
    sex: str
    med_count: int
    icd_count: int


class TaskOut(BaseModel):
    task_id: str
    patient_id: str
    probability: float
    status: str
    assigned_label: Optional[str] = None
    patient: PatientSummary
    notes: list[NoteOut]


class NextTaskOut(BaseModel):
    task: Optional[TaskOut] = None
    remaining: int


class LabelIn(BaseModel):
    label: Literal["present", "absent", "uncertain"]
    annotator: str = "anonymous"


class LabelOut(BaseModel):
    task_id: str
    status: str
    assigned_label: Optional[str]
    labels_submitted: int


class QueueOut(BaseModel):
    pending: int
    assigned: int
    labeled: int
    skipped: int


class MetricsOut(BaseModel):
    labels_submitted: int
    queue: QueueOut
    gold_known: int
    gold_positive: int


class IterateOut(BaseModel):
    created_tasks: list[str]
    queue: QueueOut
    retrained: bool
    labels_since_retrain: int
    test_auc: Optional[float] = None


def _task_out(task: AnnotationTask) -> TaskOut:
    return TaskOut(
        task_id=task.task_id,
        patient_id=task.patient_id,
        probability=task.probability,
        status=task.status,
        assigned_label=task.assigned_label,
        patient=PatientSummary(age=task.patient_age, sex=task.patient_sex,
                               med_count=task.med_count, icd_count=task.icd_count),
        notes=[
            NoteOut(note_id=nv.note_id, segments=[
                SegmentOut(text=s.text, regex_tags=list(s.regex_tags),
                           attention_weight=s.attention_weight)
                for s in nv.segments
            ])
            for nv in task.notes
        ],
    )


def create_app(service: AnnotationService, static_dir: str | Path | None = None
               ) -> FastAPI:
    app = FastAPI(title="cogscreen review service", version="0.1.0")
    app.state.service = service

    @app.get("/api/tasks/next", response_model=NextTaskOut)
    def next_task(annotator: str = Query(default="anonymous")) -> NextTaskOut:
        task = service.next_task(annotator)
        remaining = service.queue_counts()["pending"]
        return NextTaskOut(task=_task_out(task) if task else None,
                           remaining=remaining)

    @app.get("/api/tasks/{task_id}", response_model=TaskOut)
    def get_task(task_id: str) -> TaskOut:
        try:
            return _task_out(service.get_task(task_id))
        except TaskNotFound:
            raise HTTPException(status_code=404, detail=f"unknown task {task_id}")

    @app.post("/api/tasks/{task_id}/label", response_model=LabelOut)
    def submit_label(task_id: str, body: LabelIn) -> LabelOut:
        try:
            task = service.submit_label(task_id, body.label, body.annotator)
        except TaskNotFound:
            raise HTTPException(status_code=404, detail=f"unknown task {task_id}")
        except LabelConflict as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except TaskStateError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return LabelOut(task_id=task.task_id, status=task.status,
                        assigned_label=task.assigned_label,
                        labels_submitted=service.labels_submitted)

    @app.post("/api/tasks/{task_id}/skip", response_model=LabelOut)
    def skip_task(task_id: str, annotator: str = Query(default="anonymous")
                  ) -> LabelOut:
        try:
            task = service.skip_task(task_id, annotator)
        except TaskNotFound:
            raise HTTPException(status_code=404, detail=f"unknown task {task_id}")
        return LabelOut(task_id=task.task_id, status=task.status,
                        assigned_label=task.assigned_label,
                        labels_submitted=service.labels_submitted)

    @app.get("/api/metrics", response_model=MetricsOut)
    def metrics() -> MetricsOut:
        gold = service.gold_labels()
        return MetricsOut(
            labels_submitted=service.labels_submitted,
            queue=QueueOut(**service.queue_counts()),
            gold_known=len(gold),
            gold_positive=sum(1 for v in gold.values() if v),
        )

    @app.post("/api/iterate", response_model=IterateOut)
    def iterate() -> IterateOut:
        report = service.run_iteration()
        return IterateOut(
            created_tasks=list(report.created_tasks),
            queue=QueueOut(pending=report.queue_pending,
                           assigned=report.queue_assigned,
                           labeled=report.queue_labeled,
                           skipped=report.queue_skipped),
            retrained=report.retrained,
            labels_since_retrain=report.labels_since_retrain,
            test_auc=report.test_auc,
        )

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="frontend")
    return app
