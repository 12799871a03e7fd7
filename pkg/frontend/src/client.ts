// Thin HTTP client for the research loop service plus the SSE frame parser.
// The parser is factored out so tests can feed it raw chunk boundaries
// without a network in the loop.

import type {
  EventEnvelope,
  InterventionAck,
  SessionSummary,
} from "./types.js";

export interface ParsedChunk {
  events: EventEnvelope[];
  /** Unconsumed tail of the buffer, a partial frame awaiting more bytes. */
  rest: string;
}

export function parseSseChunk(buffer: string): ParsedChunk {
  const events: EventEnvelope[] = [];
  let cursor = 0;
  for (;;) {
    const end = buffer.indexOf("\n\n", cursor);
    if (end < 0) {
      break;
    }
    const frame = buffer.slice(cursor, end);
    cursor = end + 2;
    const dataLines = frame
      .split("\n")
      .filter((line) => line.startsWith("data:"))
      .map((line) => line.slice(5).trimStart());
    if (dataLines.length === 0) {
      continue;
    }
    events.push(JSON.parse(dataLines.join("\n")) as EventEnvelope);
  }
  return { events, rest: buffer.slice(cursor) };
}

async function expectOk(response: Response): Promise<Response> {
  if (!response.ok) {
    const body = await response.text();
    throw new Error(`${response.status} ${response.statusText}: ${body}`);
  }
  return response;
}

export async function listSessions(base: string): Promise<SessionSummary[]> {
  const response = await expectOk(await fetch(`${base}/sessions`));
  const body = (await response.json()) as { sessions: SessionSummary[] };
  return body.sessions;
}

export async function fetchSummary(
  base: string,
  sessionId: string,
): Promise<SessionSummary> {
  const response = await expectOk(
    await fetch(`${base}/sessions/${encodeURIComponent(sessionId)}`),
  );
  return (await response.json()) as SessionSummary;
}

export async function postIntervention(
  base: string,
  sessionId: string,
  gate: string,
  directive: string,
): Promise<InterventionAck> {
  const response = await expectOk(
    await fetch(
      `${base}/sessions/${encodeURIComponent(sessionId)}/interventions`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ gate, directive }),
      },
    ),
  );
  return (await response.json()) as InterventionAck;
}

/**
 * Stream events from a session, starting after `fromSeq`. Calls `onEvent`
 * for every decoded envelope and resolves when the server closes the
 * stream (it does so once the session reaches a terminal status).
 */
export async function streamEvents(
  base: string,
  sessionId: string,
  fromSeq: number,
  onEvent: (event: EventEnvelope) => void,
  signal?: AbortSignal,
): Promise<void> {
  const url =
    `${base}/sessions/${encodeURIComponent(sessionId)}/events?from=` +
    String(fromSeq + 1);
  const response = await expectOk(await fetch(url, { signal }));
  if (response.body === null) {
    return;
  }
  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  for (;;) {
    const { done, value } = await reader.read();
    if (done) {
      break;
    }
    buffer += decoder.decode(value, { stream: true });
    const parsed = parseSseChunk(buffer);
    buffer = parsed.rest;
    for (const event of parsed.events) {
      onEvent(event);
    }
  }
}
