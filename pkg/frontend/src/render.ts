import type { NoteView, Segment, Task } from "./types.js";

/**
 * Pure HTML-string rendering for task views, kept DOM-free so the invariants
 * (markup stripping returns the served text, layer toggles never change text
 * content) are testable outside a browser.
 */

export interface LayerToggles {
  showRegex: boolean;
  showAttention: boolean;
}

/** Category colors follow the default lexicon order; unknown names hash. */
export const CATEGORY_ORDER = [
  "memory",
  "dementia-diagnosis",
  "alzheimer",
  "mci-cognitive-impairment",
  "confusion-disorientation",
  "dementia-medications",
  "cognitive-testing",
  "behavioral-symptoms",
  "wandering",
  "adl-assistance",
  "caregiver",
  "nursing-placement",
  "word-finding",
  "safety-judgment",
  "specialist-referral",
];

export const CATEGORY_PALETTE = [
  "#e6194b", "#3cb44b", "#b08900", "#4363d8", "#f58231",
  "#911eb4", "#46c2c8", "#c04fc7", "#7a9e24", "#d88fb4",
  "#008080", "#8d6fd1", "#9a6324", "#5c7a00", "#800000",
];

export function categoryColor(name: string): string {
  const idx = CATEGORY_ORDER.indexOf(name);
  if (idx >= 0) {
    return CATEGORY_PALETTE[idx % CATEGORY_PALETTE.length];
  }
  let h = 0;
  for (let i = 0; i < name.length; i++) {
    h = (h * 31 + name.charCodeAt(i)) >>> 0;
  }
  return CATEGORY_PALETTE[h % CATEGORY_PALETTE.length];
}

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

/** Inverse of escapeHtml after tag removal; recovers the served text. */
export function stripMarkup(html: string): string {
  return html
    .replace(/<[^>]*>/g, "")
    .replace(/&lt;/g, "<")
    .replace(/&gt;/g, ">")
    .replace(/&quot;/g, '"')
    .replace(/&#39;/g, "'")
    .replace(/&amp;/g, "&");
}

/** Monotone single-hue ramp; zero weight means no shading at all. */
export function attentionStyle(weight: number): string {
  if (weight <= 0) {
    return "";
  }
  const alpha = Math.min(0.15 + 0.65 * weight, 0.85);
  return `background-color: rgba(255, 140, 0, ${alpha.toFixed(3)});`;
}

export function renderSegment(seg: Segment, toggles: LayerToggles): string {
  const text = escapeHtml(seg.text);
  const regexActive = toggles.showRegex && seg.regex_tags.length > 0;
  const attnActive =
    toggles.showAttention && seg.attention_weight !== null && seg.attention_weight > 0;
  if (!regexActive && !attnActive) {
    return text;
  }
  const classes = ["hl"];
  let style = "";
  let title = "";
  if (regexActive) {
    classes.push("hl-regex");
    const color = categoryColor(seg.regex_tags[0]);
    style += `border-bottom: 2px solid ${color};`;
    title = seg.regex_tags.join(", ");
  }
  if (attnActive) {
    classes.push("hl-attn");
    style += attentionStyle(seg.attention_weight as number);
    title = title
      ? `${title} | attention ${(seg.attention_weight as number).toFixed(2)}`
      : `attention ${(seg.attention_weight as number).toFixed(2)}`;
  }
  const titleAttr = title ? ` title="${escapeHtml(title)}"` : "";
  return `<mark class="${classes.join(" ")}" style="${style}"${titleAttr}>${text}</mark>`;
}

export function renderNote(note: NoteView, toggles: LayerToggles): string {
  const body = note.segments.map((s) => renderSegment(s, toggles)).join("");
  return (
    `<section class="note" data-note-id="${escapeHtml(note.note_id)}">` +
    `<h3>${escapeHtml(note.note_id)}</h3>` +
    `<pre class="note-text">${body}</pre>` +
    `</section>`
  );
}

export function taskCategories(task: Task): string[] {
  const seen = new Set<string>();
  for (const note of task.notes) {
    for (const seg of note.segments) {
      for (const tag of seg.regex_tags) {
        seen.add(tag);
      }
    }
  }
  return CATEGORY_ORDER.filter((c) => seen.has(c)).concat(
    [...seen].filter((c) => !CATEGORY_ORDER.includes(c)).sort(),
  );
}

export function renderLegend(task: Task): string {
  const entries = taskCategories(task).map(
    (name) =>
      `<li><span class="swatch" style="background:${categoryColor(name)}"></span>` +
      `${escapeHtml(name)}</li>`,
  );
  return `<ul class="legend">${entries.join("")}</ul>`;
}

export function renderPatientSummary(task: Task): string {
  const p = task.patient;
  return (
    `<dl class="patient">` +
    `<dt>patient</dt><dd>${escapeHtml(task.patient_id)}</dd>` +
    `<dt>age</dt><dd>${p.age}</dd>` +
    `<dt>sex</dt><dd>${escapeHtml(p.sex)}</dd>` +
    `<dt>flagged meds</dt><dd>${p.med_count}</dd>` +
    `<dt>flagged codes</dt><dd>${p.icd_count}</dd>` +
    `<dt>model probability</dt><dd>${task.probability.toFixed(3)}</dd>` +
    `</dl>`
  );
}

export function renderTask(task: Task, toggles: LayerToggles): string {
  const notes = task.notes.map((n) => renderNote(n, toggles)).join("");
  return renderPatientSummary(task) + renderLegend(task) + notes;
}

/** Concatenated segment text per note, as served by the API. */
export function servedNoteText(note: NoteView): string {
  return note.segments.map((s) => s.text).join("");
}
