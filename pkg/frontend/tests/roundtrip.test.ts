// End-to-end: a real annotation service on a 10-item fixture batch, driven
// through the UI (buttons and keyboard), then the persisted label log is
// cross-checked against the service's judge profile with an independent
// kappa/F1 recomputation here in the test.

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { createServer } from "node:net";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { AnnotateApp, createApp } from "../src/app.js";
import { checksum } from "../src/checksum.js";

const PYTHON = process.env.PYTHON ?? "python3";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const address = srv.address();
      if (address === null || typeof address === "string") {
        reject(new Error("no port"));
        return;
      }
      srv.close(() => resolve(address.port));
    });
  });
}

async function waitForHealth(base: string, proc: ChildProcess): Promise<void> {
  for (let i = 0; i < 150; i++) {
    if (proc.exitCode !== null) throw new Error("service exited early");
    try {
      const resp = await fetch(`${base}/api/health`);
      if (resp.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error("service never became healthy");
}

async function waitFor(cond: () => boolean, ms = 5000): Promise<void> {
  const start = Date.now();
  while (!cond()) {
    if (Date.now() - start > ms) throw new Error("waitFor timed out");
    await new Promise((r) => setTimeout(r, 10));
  }
}

// --- independent agreement metrics (mirrors nothing from the service) ------

function kappaAndF1(human: boolean[], judge: boolean[]) {
  let tn = 0, fp = 0, fn = 0, tp = 0;
  for (let i = 0; i < human.length; i++) {
    if (human[i] && judge[i]) tp++;
    else if (human[i] && !judge[i]) fn++;
    else if (!human[i] && judge[i]) fp++;
    else tn++;
  }
  const n = tn + fp + fn + tp;
  const pO = (tn + tp) / n;
  const pE = ((tn + fp) * (tn + fn) + (fn + tp) * (fp + tp)) / (n * n);
  const kappa = pE === 1 ? 1 : (pO - pE) / (1 - pE);
  const f1Pos = 2 * tp === 0 && fp + fn === 0 ? 0 : (2 * tp) / (2 * tp + fp + fn);
  const f1Neg = 2 * tn === 0 && fn + fp === 0 ? 0 : (2 * tn) / (2 * tn + fn + fp);
  return { kappa, f1Pos, f1Neg, macro: (f1Pos + f1Neg) / 2 };
}

describe("annotation round-trip against the real service", () => {
  let workDir: string;
  let proc: ChildProcess;
  let base: string;
  let app: AnnotateApp;
  let root: HTMLElement;

  beforeAll(async () => {
    workDir = mkdtempSync(join(tmpdir(), "conv2bench-rt-"));
    execFileSync(PYTHON, ["tests/helpers/make_batch.py", workDir], { cwd: __dirname + "/.." });

    const port = await freePort();
    base = `http://127.0.0.1:${port}`;
    proc = spawn(PYTHON, [
      "-m", "conv2bench.cli", "annotate", "serve",
      "--batch-dir", join(workDir, "batch"),
      "--judge-verdicts",
      join(workDir, "judge_subj-a.jsonl"),
      join(workDir, "judge_subj-b.jsonl"),
      "--ui-dir", join(__dirname, ".."),
      "--port", String(port),
    ], { stdio: "ignore" });
    await waitForHealth(base, proc);

    root = document.createElement("div");
    document.body.appendChild(root);
    app = createApp(root, {
      baseUrl: base,
      batchId: "rt-batch",
      annotatorId: "expert-1",
      retryIntervalMs: 50,
    });
    await app.start();
  });

  afterAll(() => {
    app?.stop();
    root?.remove();
    proc?.kill("SIGKILL");
    rmSync(workDir, { recursive: true, force: true });
  });

  it("serves the UI page itself", async () => {
    const resp = await fetch(`${base}/`);
    expect(resp.ok).toBe(true);
    const html = await resp.text();
    expect(html).toContain("Requirement annotation");
  });

  it("displays the served text unmodified", async () => {
    const api = await fetch(`${base}/api/batch/rt-batch/item/1`).then((r) => r.json());
    expect(app.current?.item_key).toBe(api.item.item_key);
    expect(app.displayedChecksum()).toBe(checksum(api.item.response_text));
  });

  it("labels all 10 items through buttons and keyboard", async () => {
    for (let position = 1; position <= 10; position++) {
      await waitFor(() => app.current?.position === position || app.done);
      expect(app.current?.position).toBe(position);
      const wantYes = position % 2 === 1; // human: odd positions yes
      if (position % 3 === 0) {
        // exercise the keyboard path as well as the buttons
        document.dispatchEvent(
          new KeyboardEvent("keydown", { key: wantYes ? "y" : "n" }),
        );
      } else if (wantYes) {
        app.clickYes();
      } else {
        app.clickNo();
      }
      await waitFor(() => app.done || app.current?.position !== position);
    }
    await waitFor(() => app.done);
    expect(app.doneText()).toContain("Batch complete");
  });

  it("progress endpoint agrees with what the UI did", async () => {
    const progress = await fetch(`${base}/api/batch/rt-batch/progress`).then((r) => r.json());
    expect(progress).toEqual({ total: 10, labeled: 10, remaining: 0, conflicts: 0 });
    expect(app.progressText()).toBe("labeled 10 of 10");
  });

  it("judge profile matches an offline recomputation from the label log", async () => {
    const batch = JSON.parse(readFileSync(join(workDir, "batch", "batch.json"), "utf-8"));
    const log = readFileSync(join(workDir, "batch", "labels.log"), "utf-8")
      .split("\n")
      .filter((line) => line.trim())
      .map((line) => JSON.parse(line));

    // last write per (item, annotator) wins; one annotator here
    const labelByKey = new Map<string, boolean>();
    for (const rec of log) labelByKey.set(rec.item_key, rec.label);
    expect(labelByKey.size).toBe(10);

    // judge verdicts, keyed the same way the batch orders items
    const judgeByKey = new Map<string, boolean>();
    for (const subject of ["subj-a", "subj-b"]) {
      const lines = readFileSync(join(workDir, `judge_${subject}.jsonl`), "utf-8")
        .split("\n")
        .filter((line) => line.trim())
        .map((line) => JSON.parse(line));
      for (const rec of lines) {
        judgeByKey.set(`${rec.conv_id}::${rec.item_id}::${subject}`, rec.verdict);
      }
    }

    const human: boolean[] = [];
    const judge: boolean[] = [];
    for (const item of batch.items) {
      const key = `${item.conv_id}::${item.item_id}::${item.subject_model_id}`;
      human.push(labelByKey.get(key)!);
      judge.push(judgeByKey.get(key)!);
    }
    const expected = kappaAndF1(human, judge);

    const profile = await fetch(
      `${base}/api/batch/rt-batch/profile?judge=judge-m`,
    ).then((r) => r.json());
    expect(profile.overall.kappa).toBeCloseTo(expected.kappa, 10);
    expect(profile.overall.f1_positive).toBeCloseTo(expected.f1Pos, 10);
    expect(profile.overall.f1_negative).toBeCloseTo(expected.f1Neg, 10);
    expect(profile.overall.f1_macro).toBeCloseTo(expected.macro, 10);
    expect(profile.n_used).toBe(10);
  });
});
