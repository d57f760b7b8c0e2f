/** Shapes served by the review API (see the service's pydantic models). */

export interface Segment {
  text: string;
  regex_tags: string[];
  attention_weight: number | null;
}

export interface NoteView {
  note_id: string;
  segments: Segment[];
}

export interface PatientSummary {
  age: number;
  sex: string;
  med_count: number;
  icd_count: number;
}

export interface Task {
  task_id: string;
  patient_id: string;
  probability: number;
  status: string;
  assigned_label: string | null;
  patient: PatientSummary;
  notes: NoteView[];
}

export interface NextTaskResponse {
  task: Task | null;
  remaining: number;
}

export interface LabelResponse {
  task_id: string;
  status: string;
  assigned_label: string | null;
  labels_submitted: number;
}

export interface QueueCounts {
  pending: number;
  assigned: number;
  labeled: number;
  skipped: number;
}

export interface Metrics {
  labels_submitted: number;
  queue: QueueCounts;
  gold_known: number;
  gold_positive: number;
}

export type LabelValue = "present" | "absent" | "uncertain";
