// Session state machine for the annotation flow. All transitions live here,
// free of DOM concerns, so the behaviour is unit-testable: the app layer
// only renders `state` and forwards user events.
import { HttpError, RejectedError } from "./api.js";
import { ApiFormatError, } from "./types.js";
export const DEFAULT_N = 4;
export class SessionController {
    api;
    annotator;
    state = { kind: "loading" };
    stats = { labelled: 0, rankHistogram: {}, server: null };
    listeners = [];
    constructor(api, annotator = "ui") {
        this.api = api;
        this.annotator = annotator;
    }
    onChange(listener) {
        this.listeners.push(listener);
    }
    emit() {
        for (const listener of this.listeners)
            listener();
    }
    hitRateWithin(n) {
        if (this.stats.labelled === 0)
            return 0;
        let hits = 0;
        for (const [rank, count] of Object.entries(this.stats.rankHistogram)) {
            const value = Number(rank);
            if (Number.isFinite(value) && value >= 1 && value <= n)
                hits += count;
        }
        return hits / this.stats.labelled;
    }
    /** Fetch and show the next unlabelled tracklet (404/network -> banner). */
    async loadNext(n = DEFAULT_N) {
        this.state = { kind: "loading" };
        this.emit();
        try {
            const view = await this.api.nextTracklet(n);
            if (view === null) {
                this.state = { kind: "done" };
            }
            else {
                this.state = { kind: "tracklet", view, n, selection: null,
                    inFlight: false, inlineError: null };
            }
        }
        catch (err) {
            this.state = { kind: "failure", message: describe(err) };
        }
        this.emit();
    }
    /** Double the shortlist and re-query; the tracklet stays the same. */
    async expand() {
        if (this.state.kind !== "tracklet" || this.state.inFlight)
            return;
        const wanted = Math.min(this.state.n * 2, this.state.view.totalIdentities);
        await this.loadNext(wanted);
    }
    select(selection) {
        if (this.state.kind !== "tracklet" || this.state.inFlight)
            return;
        if (selection.kind === "rank") {
            const count = this.state.view.candidates.length;
            if (selection.rank < 1 || selection.rank > count)
                return;
        }
        this.state.selection = selection;
        this.state.inlineError = null;
        this.emit();
    }
    /**
     * Post the current selection. Guarded against double submission while a
     * request is in flight; a 422 keeps the selection and shows the server's
     * message inline so the annotator can correct and resubmit.
     */
    async submit() {
        if (this.state.kind !== "tracklet")
            return;
        if (this.state.inFlight || this.state.selection === null)
            return;
        const { view, selection } = this.state;
        this.state.inFlight = true;
        this.state.inlineError = null;
        this.emit();
        const label = selection.kind === "rank"
            ? {
                trackletId: view.trackletId,
                identityId: view.candidates[selection.rank - 1].identityId,
                newIdentity: false,
                rank: selection.rank,
                annotator: this.annotator,
            }
            : {
                trackletId: view.trackletId,
                identityId: null,
                newIdentity: true,
                rank: "not-in-list",
                annotator: this.annotator,
            };
        try {
            await this.api.submitLabel(label);
        }
        catch (err) {
            if (this.state.kind === "tracklet") {
                this.state.inFlight = false;
                this.state.inlineError = describe(err);
                // selection intentionally preserved (rollback of the optimistic post)
            }
            this.emit();
            return;
        }
        this.stats.labelled += 1;
        const key = String(label.rank);
        this.stats.rankHistogram[key] = (this.stats.rankHistogram[key] ?? 0) + 1;
        await this.refreshServerStats();
        await this.loadNext(DEFAULT_N);
    }
    async refreshServerStats() {
        try {
            this.stats.server = await this.api.metrics();
        }
        catch {
            this.stats.server = null;
        }
        this.emit();
    }
}
function describe(err) {
    if (err instanceof RejectedError)
        return `rejected: ${err.message}`;
    if (err instanceof ApiFormatError)
        return err.message;
    if (err instanceof HttpError)
        return `server error ${err.status}: ${err.message}`;
    if (err instanceof Error)
        return `network failure: ${err.message}`;
    return "unknown failure";
}
