// DOM glue: renders the session state and forwards clicks/keys to the
// controller. No logic lives here beyond markup assembly.

import { ApiClient } from "./api.js";
import { DEFAULT_N, SessionController } from "./state.js";

const api = new ApiClient("");
const session = new SessionController(api, "browser");

const root = document.getElementById("app") as HTMLElement;

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function statsBar(): HTMLElement {
  const bar = el("div", "stats");
  const { labelled, server } = session.stats;
  bar.appendChild(el("span", "stat", `labelled: ${labelled}`));
  bar.appendChild(el("span", "stat",
    `hit@${DEFAULT_N}: ${(session.hitRateWithin(DEFAULT_N) * 100).toFixed(0)}%`));
  if (server) {
    bar.appendChild(el("span", "stat muted",
      `server: ${server.labels} labels, hit@4 ${(100 * (server.hitRate["4"] ?? 0)).toFixed(0)}%`));
  }
  const histogram = Object.entries(session.stats.rankHistogram)
    .sort(([a], [b]) => a.localeCompare(b, undefined, { numeric: true }))
    .map(([rank, count]) => `${rank}:${count}`)
    .join(" ");
  if (histogram) bar.appendChild(el("span", "stat muted", `ranks ${histogram}`));
  return bar;
}

function render(): void {
  root.replaceChildren(statsBar());
  const state = session.state;
  if (state.kind === "loading") {
    root.appendChild(el("p", "status", "loading next tracklet..."));
    return;
  }
  if (state.kind === "done") {
    const done = el("div", "done");
    done.appendChild(el("h2", undefined, "All tracklets labelled"));
    done.appendChild(el("p", undefined,
      `${session.stats.labelled} labels recorded this session.`));
    root.appendChild(done);
    return;
  }
  if (state.kind === "failure") {
    const banner = el("div", "banner error");
    banner.appendChild(el("span", undefined, state.message));
    const retry = el("button", "retry", "Retry") as HTMLButtonElement;
    retry.addEventListener("click", () => void session.loadNext());
    banner.appendChild(retry);
    root.appendChild(banner);
    return;
  }

  const { view, selection, inFlight, inlineError } = state;
  const header = el("div", "tracklet-header");
  header.appendChild(el("h2", undefined,
    `Tracklet ${view.trackletId} (${view.videoId})`));
  header.appendChild(el("span", "muted",
    `${view.remaining} tracklets remaining`));
  root.appendChild(header);

  const strip = el("div", "crops");
  for (const url of view.cropUrls) {
    const img = el("img", "crop") as HTMLImageElement;
    img.src = url;
    img.alt = "tracklet crop";
    strip.appendChild(img);
  }
  root.appendChild(strip);

  if (inlineError) {
    root.appendChild(el("div", "banner inline-error", inlineError));
  }

  const grid = el("div", "candidates");
  view.candidates.forEach((candidate, index) => {
    const rank = index + 1;
    const selected = selection?.kind === "rank" && selection.rank === rank;
    const card = el("div", `card${selected ? " selected" : ""}`);
    card.appendChild(el("div", "rank", String(rank)));
    card.appendChild(el("div", "identity", `id ${candidate.identityId}`));
    card.appendChild(el("div", "confidence",
      `overlap ${(candidate.confidence * 100).toFixed(0)}%`));
    const exemplars = el("div", "exemplars");
    for (const url of candidate.exemplarUrls.slice(0, 3)) {
      const img = el("img", "exemplar") as HTMLImageElement;
      img.src = url;
      img.alt = `identity ${candidate.identityId}`;
      exemplars.appendChild(img);
    }
    card.appendChild(exemplars);
    card.addEventListener("click",
      () => session.select({ kind: "rank", rank }));
    grid.appendChild(card);
  });
  root.appendChild(grid);

  const controls = el("div", "controls");
  const submit = el("button", "primary",
    inFlight ? "Submitting..." : "Submit (Enter)") as HTMLButtonElement;
  submit.disabled = inFlight || selection === null;
  submit.addEventListener("click", () => void session.submit());
  controls.appendChild(submit);

  const expand = el("button", undefined,
    `Expand to ${Math.min(state.n * 2, view.totalIdentities)} (E)`) as HTMLButtonElement;
  expand.disabled = inFlight || state.n >= view.totalIdentities;
  expand.addEventListener("click", () => void session.expand());
  controls.appendChild(expand);

  const fresh = el("button",
    selection?.kind === "new-identity" ? "selected" : undefined,
    "New identity (N)") as HTMLButtonElement;
  fresh.disabled = inFlight;
  fresh.addEventListener("click",
    () => session.select({ kind: "new-identity" }));
  controls.appendChild(fresh);
  root.appendChild(controls);
}

document.addEventListener("keydown", (event) => {
  if (session.state.kind !== "tracklet") return;
  if (event.key >= "1" && event.key <= "9") {
    session.select({ kind: "rank", rank: Number(event.key) });
  } else if (event.key === "Enter") {
    void session.submit();
  } else if (event.key.toLowerCase() === "e") {
    void session.expand();
  } else if (event.key.toLowerCase() === "n") {
    session.select({ kind: "new-identity" });
  }
});

session.onChange(render);
void session.refreshServerStats().then(() => session.loadNext());
