import type { LabelResponse, LabelValue, Metrics, NextTaskResponse, Task } from "./types.js";

/** Raised when the server reports the task was already labeled elsewhere. */
export class ConflictError extends Error {}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.baseUrl + path, init);
    if (res.status === 409) {
      throw new ConflictError(await res.text());
    }
    if (!res.ok) {
      throw new Error(`${init?.method ?? "GET"} ${path} -> ${res.status}`);
    }
    return (await res.json()) as T;
  }

  nextTask(annotator: string): Promise<NextTaskResponse> {
    const q = new URLSearchParams({ annotator });
    return this.request<NextTaskResponse>(`/api/tasks/next?${q}`);
  }

  getTask(taskId: string): Promise<Task> {
    return this.request<Task>(`/api/tasks/${encodeURIComponent(taskId)}`);
  }

  submitLabel(taskId: string, label: LabelValue, annotator: string): Promise<LabelResponse> {
    return this.request<LabelResponse>(
      `/api/tasks/${encodeURIComponent(taskId)}/label`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ label, annotator }),
      },
    );
  }

  skipTask(taskId: string, annotator: string): Promise<LabelResponse> {
    const q = new URLSearchParams({ annotator });
    return this.request<LabelResponse>(
      `/api/tasks/${encodeURIComponent(taskId)}/skip?${q}`,
      { method: "POST" },
    );
  }

  metrics(): Promise<Metrics> {
    return this.request<Metrics>("/api/metrics");
  }

  iterate(): Promise<unknown> {
    return this.request<unknown>("/api/iterate", { method: "POST" });
  }
}
