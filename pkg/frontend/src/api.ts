// Thin typed client over the label-service HTTP API. fetch is injectable so
// tests can drive the client without a network.

import {
  ApiFormatError,
  IdentityEntry,
  LabelSubmission,
  Metrics,
  TrackletView,
  parseIdentities,
  parseMetrics,
  parseTrackletView,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class HttpError extends Error {
  constructor(public readonly status: number, message: string) {
    super(message);
    this.name = "HttpError";
  }
}

/** 422: the server understood the request but rejected its content. */
export class RejectedError extends HttpError {
  constructor(message: string) {
    super(422, message);
    this.name = "RejectedError";
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown | null> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (response.status === 204) return null;
    let body: unknown = null;
    const text = await response.text();
    if (text.length > 0) {
      try {
        body = JSON.parse(text);
      } catch {
        throw new ApiFormatError(`response is not JSON (${path})`);
      }
    }
    if (response.status === 422) {
      const message = (body as { error?: string } | null)?.error ?? "rejected";
      throw new RejectedError(message);
    }
    if (!response.ok) {
      const message = (body as { error?: string } | null)?.error
        ?? `HTTP ${response.status}`;
      throw new HttpError(response.status, message);
    }
    return body;
  }

  /** Next unlabelled tracklet, or null when everything is labelled (204). */
  async nextTracklet(n?: number): Promise<TrackletView | null> {
    const query = n !== undefined ? `?n=${n}` : "";
    const body = await this.request(`/api/tracklets/next${query}`);
    if (body === null) return null;
    return parseTrackletView(body);
  }

  async identities(): Promise<IdentityEntry[]> {
    return parseIdentities(await this.request("/api/identities"));
  }

  async metrics(): Promise<Metrics> {
    return parseMetrics(await this.request("/api/metrics"));
  }

  async submitLabel(label: LabelSubmission): Promise<void> {
    await this.request("/api/labels", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        tracklet_id: label.trackletId,
        identity_id: label.identityId,
        new_identity: label.newIdentity,
        rank: label.rank,
        annotator: label.annotator,
      }),
    });
  }
}
