// Browser entry point. Everything stateful lives here: the fold accumulator,
// the SSE reconnect loop, and the intervention form wiring. Rendering is
// delegated to the pure renderer so this file stays thin.

import { emptyTimeline, foldEvent, type Timeline } from "./fold.js";
import { renderTimeline } from "./render.js";
import {
  fetchSummary,
  listSessions,
  postIntervention,
  streamEvents,
} from "./client.js";
import { escapeHtml } from "./render.js";

function params(): URLSearchParams {
  return new URLSearchParams(window.location.search);
}

function apiBase(): string {
  return params().get("api") ?? "";
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function showSessionList(mount: HTMLElement, base: string): Promise<void> {
  const sessions = await listSessions(base);
  if (sessions.length === 0) {
    mount.innerHTML = '<p class="empty">no sessions yet</p>';
    return;
  }
  const rows = sessions
    .map((session) => {
      const href = `?session=${encodeURIComponent(session.session_id)}`;
      const title = session.title ?? session.session_id;
      return (
        `<li><a href="${href}">${escapeHtml(title)}</a> ` +
        `<span class="status">${escapeHtml(session.status)}</span></li>`
      );
    })
    .join("");
  mount.innerHTML = `<ul class="session-list">${rows}</ul>`;
}

async function watchSession(
  mount: HTMLElement,
  base: string,
  sessionId: string,
): Promise<void> {
  let view: Timeline = emptyTimeline();
  const paint = () => {
    mount.innerHTML = renderTimeline(view);
  };

  mount.addEventListener("submit", (raw) => {
    const submitEvent = raw as SubmitEvent;
    submitEvent.preventDefault();
    const form = submitEvent.target as HTMLFormElement;
    if (!form.classList.contains("intervention")) {
      return;
    }
    const gate = form.dataset.gate ?? "";
    const input = form.elements.namedItem("directive") as HTMLInputElement | null;
    const button = submitEvent.submitter as HTMLButtonElement | null;
    const resolution = button?.value === "abort" ? "abort" : gate;
    const directive = resolution === "abort" ? "" : (input?.value ?? "");
    postIntervention(base, sessionId, resolution, directive).catch((error) => {
      console.error("intervention rejected", error);
    });
  });

  paint();
  while (view.terminal === null) {
    try {
      await streamEvents(base, sessionId, view.lastSeq, (event) => {
        view = foldEvent(view, event);
        paint();
      });
    } catch (error) {
      console.error("stream dropped, reconnecting", error);
    }
    if (view.terminal === null) {
      await sleep(1000);
    }
  }
  // The terminal event already painted; fetch once more for the title line.
  const summary = await fetchSummary(base, sessionId);
  const heading = document.querySelector("h1");
  if (heading !== null && summary.title) {
    heading.textContent = summary.title;
  }
}

export async function main(): Promise<void> {
  const mount = document.getElementById("app");
  if (mount === null) {
    throw new Error("missing #app mount point");
  }
  const base = apiBase();
  const sessionId = params().get("session");
  try {
    if (sessionId === null) {
      await showSessionList(mount, base);
    } else {
      await watchSession(mount, base, sessionId);
    }
  } catch (error) {
    mount.innerHTML = `<p class="error">${escapeHtml(String(error))}</p>`;
  }
}

main();
