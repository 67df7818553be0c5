// Typed client for the annotation service endpoints. The UI talks to
// nothing else on the network.

export interface ItemView {
  item_key: string;
  response_text: string;
  question: string;
  source: string;
  position: number;
  total: number;
}

export interface NextResponse {
  done: boolean;
  total?: number;
  item?: ItemView;
}

export interface Progress {
  total: number;
  labeled: number;
  remaining: number;
  conflicts: number;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  status: number;
  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

export class AnnotationApi {
  baseUrl: string;
  batchId: string;
  fetchFn: FetchLike;

  constructor(baseUrl: string, batchId: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.batchId = batchId;
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return (await resp.json()) as T;
  }

  next(annotatorId: string): Promise<NextResponse> {
    const q = encodeURIComponent(annotatorId);
    return this.getJson(`/api/batch/${this.batchId}/next?annotator=${q}`);
  }

  itemAt(position: number): Promise<NextResponse> {
    return this.getJson(`/api/batch/${this.batchId}/item/${position}`);
  }

  progress(): Promise<Progress> {
    return this.getJson(`/api/batch/${this.batchId}/progress`);
  }

  async submitLabel(itemKey: string, label: boolean, annotatorId: string): Promise<void> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/batch/${this.batchId}/label`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ item_key: itemKey, label, annotator_id: annotatorId }),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
  }
}
