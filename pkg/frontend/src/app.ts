import { ApiClient, ConflictError } from "./api.js";
import { renderTask } from "./render.js";
import type { LabelValue, Task } from "./types.js";

const api = new ApiClient("");

interface UiState {
  task: Task | null;
  remaining: number;
  showRegex: boolean;
  showAttention: boolean;
  busy: boolean;
}

const state: UiState = {
  task: null,
  remaining: 0,
  showRegex: true,
  showAttention: true,
  busy: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function annotatorName(): string {
  return (el<HTMLInputElement>("annotator").value || "anonymous").trim();
}

function banner(message: string, kind: "info" | "error" = "info"): void {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.className = message ? `banner ${kind}` : "banner hidden";
}

function redraw(): void {
  const host = el<HTMLDivElement>("task");
  el<HTMLSpanElement>("remaining").textContent = String(state.remaining);
  if (!state.task) {
    host.innerHTML = `<p class="empty">Queue empty. Run an iteration to fetch more candidates.</p>`;
    return;
  }
  host.innerHTML = renderTask(state.task, {
    showRegex: state.showRegex,
    showAttention: state.showAttention,
  });
}

async function fetchNext(): Promise<void> {
  if (state.busy) {
    return;
  }
  state.busy = true;
  try {
    const res = await api.nextTask(annotatorName());
    state.task = res.task;
    state.remaining = res.remaining;
    banner("");
    redraw();
  } catch (err) {
    banner(`Could not fetch the next task: ${String(err)}. Retry when ready.`, "error");
  } finally {
    state.busy = false;
  }
}

async function submit(label: LabelValue): Promise<void> {
  if (!state.task || state.busy) {
    return;
  }
  state.busy = true;
  const taskId = state.task.task_id;
  try {
    await api.submitLabel(taskId, label, annotatorName());
    state.busy = false;
    await fetchNext();
  } catch (err) {
    state.busy = false;
    if (err instanceof ConflictError) {
      banner("Task was already labeled elsewhere; skipping ahead.", "error");
      await fetchNext();
    } else {
      // network problem: keep the current task so the annotator can retry
      banner(`Submit failed: ${String(err)}. The task is unchanged; retry.`, "error");
    }
  }
}

async function skip(): Promise<void> {
  if (!state.task || state.busy) {
    return;
  }
  state.busy = true;
  try {
    await api.skipTask(state.task.task_id, annotatorName());
    state.busy = false;
    await fetchNext();
  } catch (err) {
    state.busy = false;
    banner(`Skip failed: ${String(err)}`, "error");
  }
}

async function refreshMetrics(): Promise<void> {
  try {
    const m = await api.metrics();
    el<HTMLSpanElement>("labeled-count").textContent = String(m.labels_submitted);
    el<HTMLSpanElement>("pending-count").textContent = String(m.queue.pending);
  } catch {
    // metrics are advisory; ignore transient failures
  }
}

function bind(): void {
  const nameInput = el<HTMLInputElement>("annotator");
  nameInput.value = localStorage.getItem("cogscreen.annotator") ?? "";
  nameInput.addEventListener("change", () => {
    localStorage.setItem("cogscreen.annotator", nameInput.value);
  });

  el<HTMLButtonElement>("btn-next").addEventListener("click", () => void fetchNext());
  el<HTMLButtonElement>("btn-present").addEventListener("click", () => void submit("present"));
  el<HTMLButtonElement>("btn-absent").addEventListener("click", () => void submit("absent"));
  el<HTMLButtonElement>("btn-uncertain").addEventListener("click", () => void submit("uncertain"));
  el<HTMLButtonElement>("btn-skip").addEventListener("click", () => void skip());
  el<HTMLButtonElement>("btn-iterate").addEventListener("click", async () => {
    await api.iterate();
    await refreshMetrics();
    if (!state.task) {
      await fetchNext();
    }
  });

  const regexToggle = el<HTMLInputElement>("toggle-regex");
  const attnToggle = el<HTMLInputElement>("toggle-attn");
  regexToggle.addEventListener("change", () => {
    state.showRegex = regexToggle.checked;
    redraw(); // markup-only change; text content is untouched
  });
  attnToggle.addEventListener("change", () => {
    state.showAttention = attnToggle.checked;
    redraw();
  });

  document.addEventListener("keydown", (ev) => {
    if (ev.target instanceof HTMLInputElement) {
      return;
    }
    const key = ev.key.toLowerCase();
    if (key === "p") void submit("present");
    else if (key === "a") void submit("absent");
    else if (key === "u") void submit("uncertain");
    else if (key === "s") void skip();
    else if (key === "n") void fetchNext();
  });

  window.setInterval(() => void refreshMetrics(), 5000);
  void refreshMetrics();
  void fetchNext();
}

document.addEventListener("DOMContentLoaded", bind);
