/**
 * Contract test against the real review service running with the stub model:
 * a task renders with both highlight layers, stripped markup equals the
 * served note text, labels persist (visible in the metrics counter), the
 * queue advances, and double-submit is idempotent.
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { renderTask, servedNoteText, stripMarkup } from "../src/render.js";
import type { Task } from "../src/types.js";

const PY = process.env.COGSCREEN_PYTHON ?? "python3";

let workdir: string;
let server: ChildProcess | null = null;
let api: ApiClient;

async function freePort(): Promise<number> {
  return await new Promise((resolve, reject) => {
    const srv = createServer();
    srv.once("error", reject);
    srv.listen(0, "127.0.0.1", () => {
      const address = srv.address();
      if (address && typeof address === "object") {
        const port = address.port;
        srv.close(() => resolve(port));
      } else {
        reject(new Error("no port"));
      }
    });
  });
}

async function waitReady(base: string, timeoutMs = 60_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const res = await fetch(`${base}/api/metrics`);
      if (res.ok) {
        return;
      }
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 300));
  }
  throw new Error("service did not become ready");
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "cogscreen-ui-"));
  const corpus = join(workdir, "corpus.jsonl");
  const clean = join(workdir, "clean.jsonl");
  execFileSync(PY, ["-m", "cogscreen.cli", "generate", "--out", corpus,
    "--n", "50", "--labeled-fraction", "0.3", "--seed", "6"], { stdio: "pipe" });
  execFileSync(PY, ["-m", "cogscreen.cli", "preprocess", "--in", corpus,
    "--out", clean], { stdio: "pipe" });

  const port = await freePort();
  server = spawn(PY, ["-m", "cogscreen.cli", "serve",
    "--corpus", corpus, "--clean", clean,
    "--journal", join(workdir, "labels.journal"),
    "--backend", "stub", "--host", "127.0.0.1", "--port", String(port)],
    { stdio: "pipe" });
  const base = `http://127.0.0.1:${port}`;
  api = new ApiClient(base);
  await waitReady(base);
}, 120_000);

afterAll(() => {
  if (server) {
    server.kill("SIGTERM");
  }
  rmSync(workdir, { recursive: true, force: true });
});

describe("review UI against the live service (stub model)", () => {
  let task: Task;

  it("iteration queues tasks and checkout returns one", async () => {
    const report = (await api.iterate()) as { created_tasks: string[] };
    expect(report.created_tasks.length).toBeGreaterThan(0);
    const next = await api.nextTask("ui-test");
    expect(next.task).not.toBeNull();
    task = next.task as Task;
    expect(task.status).toBe("assigned");
  });

  it("renders with both highlight layers present", () => {
    const segs = task.notes.flatMap((n) => n.segments);
    expect(segs.some((s) => s.regex_tags.length > 0)).toBe(true);
    expect(segs.some((s) => s.attention_weight !== null)).toBe(true);
    const html = renderTask(task, { showRegex: true, showAttention: true });
    expect(html).toContain("hl-regex");
    expect(html).toContain("hl-attn");
  });

  it("stripped markup equals the served note text", async () => {
    const fetched = await api.getTask(task.task_id);
    for (const note of fetched.notes) {
      const served = servedNoteText(note);
      const html = renderTask(
        { ...fetched, notes: [note] },
        { showRegex: true, showAttention: true },
      );
      expect(stripMarkup(html)).toContain(served);
    }
  });

  it("a submitted label persists in the metrics counter", async () => {
    const before = await api.metrics();
    const res = await api.submitLabel(task.task_id, "present", "ui-test");
    expect(res.status).toBe("labeled");
    const after = await api.metrics();
    expect(after.labels_submitted).toBe(before.labels_submitted + 1);
  });

  it("double-submit is idempotent", async () => {
    const first = await api.submitLabel(task.task_id, "present", "ui-test");
    const second = await api.submitLabel(task.task_id, "present", "ui-test");
    expect(second.labels_submitted).toBe(first.labels_submitted);
  });

  it("the queue advances to the next task", async () => {
    const next = await api.nextTask("ui-test");
    expect(next.task).not.toBeNull();
    expect((next.task as Task).task_id).not.toBe(task.task_id);
    console.log("ACCEPTANCE 10 PASS: UI contract against stub-model service");
  });
});
