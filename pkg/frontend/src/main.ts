// Boot: the page is served by the annotation service itself, so the API
// lives at the same origin. The annotator id is remembered locally.

import { createApp } from "./app.js";

const ANNOTATOR_KEY = "conv2bench.annotator_id";

function annotatorId(): string {
  let id = localStorage.getItem(ANNOTATOR_KEY) ?? "";
  while (!id.trim()) {
    id = window.prompt("Annotator id:") ?? "";
  }
  localStorage.setItem(ANNOTATOR_KEY, id.trim());
  return id.trim();
}

async function batchId(): Promise<string> {
  const resp = await fetch("/api/health");
  if (!resp.ok) throw new Error("annotation service unreachable");
  const body = await resp.json();
  return body.batch_id as string;
}

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  const app = createApp(root, {
    baseUrl: "",
    batchId: await batchId(),
    annotatorId: annotatorId(),
  });
  await app.start();
}

void boot();
