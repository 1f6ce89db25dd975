// Payload shapes of the label-service API plus strict runtime validators.
// Every byte from the network passes through a parse*() function before the
// UI touches it, so malformed payloads surface as ApiFormatError (rendered
// as an error banner) instead of crashing mid-render.
export class ApiFormatError extends Error {
    constructor(message) {
        super(`malformed server payload: ${message}`);
        this.name = "ApiFormatError";
    }
}
function need(condition, message) {
    if (!condition)
        throw new ApiFormatError(message);
}
function isRecord(value) {
    return typeof value === "object" && value !== null && !Array.isArray(value);
}
function stringArray(value, field) {
    need(Array.isArray(value), `${field} must be an array`);
    for (const item of value) {
        need(typeof item === "string", `${field} entries must be strings`);
    }
    return value;
}
function identityId(value, field) {
    need(typeof value === "string" || typeof value === "number", `${field} must be a string or number`);
    return value;
}
export function parseCandidate(raw) {
    need(isRecord(raw), "candidate must be an object");
    const confidence = raw["confidence"];
    need(typeof confidence === "number" && Number.isFinite(confidence), "candidate.confidence must be a finite number");
    return {
        identityId: identityId(raw["identity_id"], "candidate.identity_id"),
        confidence,
        exemplarUrls: stringArray(raw["exemplar_urls"] ?? [], "candidate.exemplar_urls"),
    };
}
export function parseTrackletView(raw) {
    need(isRecord(raw), "tracklet payload must be an object");
    need(typeof raw["tracklet_id"] === "number", "tracklet_id must be a number");
    need(typeof raw["video_id"] === "string", "video_id must be a string");
    need(Array.isArray(raw["candidates"]), "candidates must be an array");
    const candidates = raw["candidates"].map(parseCandidate);
    // the service sends candidates ranked already; keep the invariant locally
    const sorted = [...candidates].sort((a, b) => b.confidence - a.confidence);
    return {
        trackletId: raw["tracklet_id"],
        videoId: raw["video_id"],
        cropUrls: stringArray(raw["crop_urls"], "crop_urls"),
        candidates: sorted,
        n: typeof raw["n"] === "number" ? raw["n"] : sorted.length,
        totalIdentities: typeof raw["total_identities"] === "number"
            ? raw["total_identities"] : sorted.length,
        remaining: typeof raw["remaining"] === "number"
            ? raw["remaining"] : 0,
    };
}
export function parseIdentities(raw) {
    need(Array.isArray(raw), "identities payload must be an array");
    return raw.map((entry) => {
        need(isRecord(entry), "identity entry must be an object");
        return {
            identityId: identityId(entry["identity_id"], "identity_id"),
            exemplarUrls: stringArray(entry["exemplar_urls"] ?? [], "exemplar_urls"),
        };
    });
}
export function parseMetrics(raw) {
    need(isRecord(raw), "metrics payload must be an object");
    need(typeof raw["labels"] === "number", "metrics.labels must be a number");
    const hitRate = raw["hit_rate"];
    need(isRecord(hitRate), "metrics.hit_rate must be an object");
    for (const value of Object.values(hitRate)) {
        need(typeof value === "number", "hit_rate values must be numbers");
    }
    const histogram = raw["rank_histogram"] ?? {};
    need(isRecord(histogram), "metrics.rank_histogram must be an object");
    return {
        labels: raw["labels"],
        hitRate: hitRate,
        rankHistogram: histogram,
    };
}
