// Thin typed client over the label-service HTTP API. fetch is injectable so
// tests can drive the client without a network.
import { ApiFormatError, parseIdentities, parseMetrics, parseTrackletView, } from "./types.js";
export class HttpError extends Error {
    status;
    constructor(status, message) {
        super(message);
        this.status = status;
        this.name = "HttpError";
    }
}
/** 422: the server understood the request but rejected its content. */
export class RejectedError extends HttpError {
    constructor(message) {
        super(422, message);
        this.name = "RejectedError";
    }
}
export class ApiClient {
    baseUrl;
    fetchFn;
    constructor(baseUrl = "", fetchFn = (input, init) => fetch(input, init)) {
        this.baseUrl = baseUrl;
        this.fetchFn = fetchFn;
    }
    async request(path, init) {
        const response = await this.fetchFn(this.baseUrl + path, init);
        if (response.status === 204)
            return null;
        let body = null;
        const text = await response.text();
        if (text.length > 0) {
            try {
                body = JSON.parse(text);
            }
            catch {
                throw new ApiFormatError(`response is not JSON (${path})`);
            }
        }
        if (response.status === 422) {
            const message = body?.error ?? "rejected";
            throw new RejectedError(message);
        }
        if (!response.ok) {
            const message = body?.error
                ?? `HTTP ${response.status}`;
            throw new HttpError(response.status, message);
        }
        return body;
    }
    /** Next unlabelled tracklet, or null when everything is labelled (204). */
    async nextTracklet(n) {
        const query = n !== undefined ? `?n=${n}` : "";
        const body = await this.request(`/api/tracklets/next${query}`);
        if (body === null)
            return null;
        return parseTrackletView(body);
    }
    async identities() {
        return parseIdentities(await this.request("/api/identities"));
    }
    async metrics() {
        return parseMetrics(await this.request("/api/metrics"));
    }
    async submitLabel(label) {
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
