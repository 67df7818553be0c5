// Annotation flow: show one (response, requirement) pair, capture a binary
// verdict, advance. Keyboard shortcuts Y/N mirror the buttons. Submissions
// that fail because the service is unreachable are queued and retried;
// submissions the service rejects show an inline error and do not advance.

import { AnnotationApi, ApiError, FetchLike, ItemView } from "./api.js";
import { checksum } from "./checksum.js";

export interface AppOptions {
  baseUrl: string;
  batchId: string;
  annotatorId: string;
  fetchFn?: FetchLike;
  retryIntervalMs?: number;
}

interface QueuedLabel {
  itemKey: string;
  label: boolean;
}

export class AnnotateApp {
  private api: AnnotationApi;
  private annotatorId: string;
  private root: HTMLElement;
  private retryIntervalMs: number;

  current: ItemView | null = null;
  done = false;
  submitting = false;
  queue: QueuedLabel[] = [];
  servedChecksum = "";

  private els!: {
    position: HTMLElement;
    progress: HTMLElement;
    question: HTMLElement;
    response: HTMLElement;
    yes: HTMLButtonElement;
    no: HTMLButtonElement;
    error: HTMLElement;
    queueNote: HTMLElement;
    jumpInput: HTMLInputElement;
    jumpGo: HTMLButtonElement;
    doneNote: HTMLElement;
  };
  private retryTimer: ReturnType<typeof setInterval> | null = null;

  constructor(root: HTMLElement, opts: AppOptions) {
    this.root = root;
    this.annotatorId = opts.annotatorId;
    this.api = new AnnotationApi(opts.baseUrl, opts.batchId, opts.fetchFn);
    this.retryIntervalMs = opts.retryIntervalMs ?? 2000;
    this.buildSkeleton();
  }

  private buildSkeleton(): void {
    this.root.innerHTML = "";
    const header = el("header", "header");
    const position = el("span", "position");
    const progress = el("span", "progress");
    header.append(
      textSpan(`annotator: ${this.annotatorId}`),
      position,
      progress,
    );

    const question = el("h2", "question");
    const response = document.createElement("code");
    const pre = el("pre", "response");
    pre.appendChild(response);

    const yes = button("Yes (Y)", "yes");
    const no = button("No (N)", "no");
    yes.addEventListener("click", () => void this.submit(true));
    no.addEventListener("click", () => void this.submit(false));
    const controls = el("div", "controls");
    controls.append(yes, no);

    const error = el("div", "error");
    const queueNote = el("div", "queue-note");
    const doneNote = el("div", "done-note");

    const jumpInput = document.createElement("input");
    jumpInput.type = "number";
    jumpInput.min = "1";
    jumpInput.className = "jump-input";
    const jumpGo = button("Go", "jump-go");
    jumpGo.addEventListener("click", () => void this.jump());
    const jump = el("div", "jump");
    jump.append(textSpan("jump to #"), jumpInput, jumpGo);

    this.root.append(header, question, pre, controls, error, queueNote, doneNote, jump);
    this.els = {
      position, progress, question, response, yes, no,
      error, queueNote, jumpInput, jumpGo, doneNote,
    };

    document.addEventListener("keydown", (ev) => this.handleKey(ev));
  }

  async start(): Promise<void> {
    await this.advance();
    this.retryTimer = setInterval(() => void this.flushQueue(), this.retryIntervalMs);
  }

  stop(): void {
    if (this.retryTimer !== null) {
      clearInterval(this.retryTimer);
      this.retryTimer = null;
    }
  }

  handleKey(ev: KeyboardEvent): void {
    if (ev.target instanceof HTMLInputElement) return;
    const key = ev.key.toLowerCase();
    if (key === "y") void this.submit(true);
    else if (key === "n") void this.submit(false);
  }

  async submit(label: boolean): Promise<void> {
    if (this.submitting || this.done || this.current === null) return;
    this.submitting = true;
    this.setButtonsEnabled(false);
    this.els.error.textContent = "";
    const itemKey = this.current.item_key;
    try {
      await this.api.submitLabel(itemKey, label, this.annotatorId);
    } catch (err) {
      this.submitting = false;
      this.setButtonsEnabled(true);
      if (err instanceof ApiError) {
        // the service said no: surface it, stay on the item
        this.els.error.textContent = `submission rejected: ${err.message}`;
      } else {
        // unreachable: queue for retry, stay on the item
        this.queue.push({ itemKey, label });
        this.renderQueueNote();
      }
      return;
    }
    this.submitting = false;
    this.setButtonsEnabled(true);
    await this.advance();
    await this.refreshProgress();
  }

  async flushQueue(): Promise<void> {
    if (this.queue.length === 0) return;
    const pending = [...this.queue];
    for (const entry of pending) {
      try {
        await this.api.submitLabel(entry.itemKey, entry.label, this.annotatorId);
      } catch (err) {
        if (err instanceof ApiError) {
          // permanently rejected; drop it and tell the user
          this.queue = this.queue.filter((q) => q !== entry);
          this.els.error.textContent = `queued submission rejected: ${err.message}`;
          this.renderQueueNote();
        }
        return; // still offline: keep the rest queued
      }
      this.queue = this.queue.filter((q) => q !== entry);
    }
    this.renderQueueNote();
    if (this.queue.length === 0) {
      await this.advance();
      await this.refreshProgress();
    }
  }

  async advance(): Promise<void> {
    let resp;
    try {
      resp = await this.api.next(this.annotatorId);
    } catch {
      this.els.error.textContent = "cannot reach the annotation service; retrying";
      return;
    }
    this.els.error.textContent = "";
    if (resp.done) {
      this.renderDone(resp.total ?? 0);
      return;
    }
    this.renderItem(resp.item!);
    await this.refreshProgress();
  }

  async jump(): Promise<void> {
    const position = Number(this.els.jumpInput.value);
    if (!Number.isInteger(position) || position < 1) return;
    try {
      const resp = await this.api.itemAt(position);
      if (resp.item) this.renderItem(resp.item);
    } catch (err) {
      this.els.error.textContent =
        err instanceof ApiError ? `no item #${position}` : "cannot reach the annotation service";
    }
  }

  private renderItem(item: ItemView): void {
    this.current = item;
    this.done = false;
    this.els.doneNote.textContent = "";
    this.els.question.textContent = item.question;
    // textContent keeps the served text verbatim: nothing is parsed,
    // reordered, or truncated on the way to the screen
    this.els.response.textContent = item.response_text;
    this.servedChecksum = checksum(item.response_text);
    this.els.position.textContent = `${item.position} / ${item.total}`;
    this.setButtonsEnabled(true);
  }

  private renderDone(total: number): void {
    this.current = null;
    this.done = true;
    this.els.question.textContent = "";
    this.els.response.textContent = "";
    this.els.position.textContent = "";
    this.els.doneNote.textContent = `Batch complete - all ${total} items labeled. Thank you!`;
    this.setButtonsEnabled(false);
  }

  private renderQueueNote(): void {
    this.els.queueNote.textContent =
      this.queue.length > 0
        ? `offline: ${this.queue.length} label(s) queued for retry`
        : "";
  }

  private async refreshProgress(): Promise<void> {
    try {
      const progress = await this.api.progress();
      this.els.progress.textContent = `labeled ${progress.labeled} of ${progress.total}`;
    } catch {
      // progress display is best-effort; the next action retries anyway
    }
  }

  private setButtonsEnabled(enabled: boolean): void {
    this.els.yes.disabled = !enabled;
    this.els.no.disabled = !enabled;
  }

  displayedChecksum(): string {
    return checksum(this.els.response.textContent ?? "");
  }

  progressText(): string {
    return this.els.progress.textContent ?? "";
  }

  positionText(): string {
    return this.els.position.textContent ?? "";
  }

  errorText(): string {
    return this.els.error.textContent ?? "";
  }

  queueNoteText(): string {
    return this.els.queueNote.textContent ?? "";
  }

  doneText(): string {
    return this.els.doneNote.textContent ?? "";
  }

  clickYes(): void {
    this.els.yes.click();
  }

  clickNo(): void {
    this.els.no.click();
  }

  setJumpValue(position: number): void {
    this.els.jumpInput.value = String(position);
  }

  clickJump(): void {
    this.els.jumpGo.click();
  }
}

function el(tag: string, className: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  return node;
}

function textSpan(text: string): HTMLElement {
  const node = document.createElement("span");
  node.textContent = text;
  return node;
}

function button(label: string, className: string): HTMLButtonElement {
  const node = document.createElement("button");
  node.textContent = label;
  node.className = className;
  return node;
}

export function createApp(root: HTMLElement, opts: AppOptions): AnnotateApp {
  return new AnnotateApp(root, opts);
}
