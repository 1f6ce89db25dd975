// Session state machine: loading, done, failure banner, selection, expand
// doubling, 422 rollback, and the double-submit guard.
import assert from "node:assert/strict";
import { test } from "node:test";
import { RejectedError } from "../src/api.js";
import { SessionController, DEFAULT_N } from "../src/state.js";
function makeView(overrides = {}) {
    const candidates = Array.from({ length: 8 }, (_, i) => ({
        identityId: 100 + i,
        confidence: (8 - i) / 10,
        exemplarUrls: [],
    }));
    return {
        trackletId: 7,
        videoId: "video0000",
        cropUrls: ["/files/c0.png"],
        candidates: candidates.slice(0, 4),
        n: 4,
        totalIdentities: 10,
        remaining: 3,
        ...overrides,
    };
}
class FakeApi {
    submitted = [];
    nextResponses = [];
    nextCalls = [];
    submitError = null;
    submitDelay = null;
    metricsValue = { labels: 0, hitRate: {}, rankHistogram: {} };
    async nextTracklet(n) {
        this.nextCalls.push(n ?? DEFAULT_N);
        const next = this.nextResponses.shift();
        if (next === undefined)
            return null;
        if (next instanceof Error)
            throw next;
        return next;
    }
    async submitLabel(label) {
        if (this.submitDelay)
            await this.submitDelay;
        if (this.submitError)
            throw this.submitError;
        this.submitted.push(label);
    }
    async metrics() {
        return this.metricsValue;
    }
}
test("loadNext renders the tracklet with N=4", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView()];
    const session = new SessionController(api);
    await session.loadNext();
    assert.equal(session.state.kind, "tracklet");
    assert.deepEqual(api.nextCalls, [4]);
});
test("204 renders the done state", async () => {
    const api = new FakeApi();
    api.nextResponses = [null];
    const session = new SessionController(api);
    await session.loadNext();
    assert.equal(session.state.kind, "done");
});
test("network failure shows a retry banner and keeps stats", async () => {
    const api = new FakeApi();
    api.nextResponses = [new TypeError("fetch failed"), makeView()];
    const session = new SessionController(api);
    session.stats.labelled = 5;
    await session.loadNext();
    assert.equal(session.state.kind, "failure");
    assert.equal(session.stats.labelled, 5);
    await session.loadNext(); // the retry button does exactly this
    assert.equal(session.state.kind, "tracklet");
});
test("expand doubles N and re-queries the server", async () => {
    const api = new FakeApi();
    const wide = makeView({ candidates: makeView().candidates.concat([]), n: 8 });
    api.nextResponses = [makeView(), wide];
    const session = new SessionController(api);
    await session.loadNext();
    await session.expand();
    assert.deepEqual(api.nextCalls, [4, 8]);
    assert.equal(session.state.kind, "tracklet");
});
test("expand clamps at the identity count", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView({ n: 8, totalIdentities: 10 }),
        makeView({ n: 10, totalIdentities: 10 })];
    const session = new SessionController(api);
    await session.loadNext(8);
    await session.expand();
    assert.deepEqual(api.nextCalls, [8, 10]);
});
test("picking rank 1 posts rank 1 with the top identity", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView(), null];
    const session = new SessionController(api);
    await session.loadNext();
    session.select({ kind: "rank", rank: 1 });
    await session.submit();
    assert.equal(api.submitted.length, 1);
    assert.equal(api.submitted[0].rank, 1);
    assert.equal(api.submitted[0].identityId, 100);
    assert.equal(api.submitted[0].newIdentity, false);
    assert.equal(session.stats.labelled, 1);
    assert.equal(session.state.kind, "done");
});
test("expand once then pick card 6 records rank 6", async () => {
    const api = new FakeApi();
    const eightWide = makeView({
        candidates: Array.from({ length: 8 }, (_, i) => ({
            identityId: 100 + i,
            confidence: (8 - i) / 10,
            exemplarUrls: [],
        })),
        n: 8,
    });
    api.nextResponses = [makeView(), eightWide, null];
    const session = new SessionController(api);
    await session.loadNext();
    await session.expand();
    session.select({ kind: "rank", rank: 6 });
    await session.submit();
    assert.equal(api.submitted[0].rank, 6);
    assert.equal(api.submitted[0].identityId, 105);
});
test("new identity posts the explicit action, not an invented id", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView(), null];
    const session = new SessionController(api);
    await session.loadNext();
    session.select({ kind: "new-identity" });
    await session.submit();
    assert.equal(api.submitted[0].newIdentity, true);
    assert.equal(api.submitted[0].identityId, null);
    assert.equal(api.submitted[0].rank, "not-in-list");
});
test("selection outside the candidate list is ignored", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView()];
    const session = new SessionController(api);
    await session.loadNext();
    session.select({ kind: "rank", rank: 9 }); // only 4 cards shown
    assert.equal(session.state.kind === "tracklet"
        && session.state.selection, null);
});
test("422 shows an inline error and preserves the selection", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView()];
    api.submitError = new RejectedError("unknown identity");
    const session = new SessionController(api);
    await session.loadNext();
    session.select({ kind: "rank", rank: 2 });
    await session.submit();
    assert.equal(session.state.kind, "tracklet");
    if (session.state.kind === "tracklet") {
        assert.match(session.state.inlineError ?? "", /unknown identity/);
        assert.deepEqual(session.state.selection, { kind: "rank", rank: 2 });
        assert.equal(session.state.inFlight, false);
    }
    assert.equal(session.stats.labelled, 0);
    // fixing the problem allows a resubmit of the same selection
    api.submitError = null;
    api.nextResponses = [null];
    await session.submit();
    assert.equal(api.submitted.length, 1);
});
test("rapid double-submit posts exactly one label", async () => {
    const api = new FakeApi();
    api.nextResponses = [makeView(), null];
    let release = () => undefined;
    api.submitDelay = new Promise((resolve) => { release = resolve; });
    const session = new SessionController(api);
    await session.loadNext();
    session.select({ kind: "rank", rank: 1 });
    const first = session.submit();
    const second = session.submit(); // fires while the first is in flight
    const third = session.submit();
    release();
    await Promise.all([first, second, third]);
    assert.equal(api.submitted.length, 1);
    assert.equal(session.stats.labelled, 1);
});
test("local hit-rate tracks the rank histogram", async () => {
    const api = new FakeApi();
    const session = new SessionController(api);
    session.stats.labelled = 4;
    session.stats.rankHistogram = { "1": 2, "6": 1, "not-in-list": 1 };
    assert.equal(session.hitRateWithin(4), 0.5);
    assert.equal(session.hitRateWithin(8), 0.75);
});
