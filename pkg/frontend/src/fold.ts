// Pure fold from the event stream to the view model. Every exported function
// returns fresh objects and never mutates its arguments, so replaying the same
// events always produces the same timeline regardless of chunking: folding
// event-by-event, folding the whole log at once, and refolding after a
// reconnect all land on identical state.

import type {
  AdvisorReportPayload,
  CodeStatePayload,
  CritiquePayload,
  EventEnvelope,
  ExecutionPayload,
  GateWaitingPayload,
  RewardPayload,
  StrategyProposedPayload,
  TerminalPayload,
} from "./types.js";

export interface IterationCard {
  iteration: number;
  /** Operator directives this iteration was required to honor. */
  bindingDirectives: string[];
  arm: { rep: string; constraint: string; opt: string } | null;
  narrative: string;
  planRounds: number;
  critiques: CritiquePayload[];
  codeStates: CodeStatePayload[];
  executions: ExecutionPayload[];
  advisor: AdvisorReportPayload | null;
  reward: RewardPayload | null;
}

export interface Timeline {
  sessionId: string | null;
  lastSeq: number;
  status: string;
  pendingGate: GateWaitingPayload | null;
  iterations: IterationCard[];
  rewards: number[];
  terminal: TerminalPayload | null;
}

export function emptyTimeline(): Timeline {
  return {
    sessionId: null,
    lastSeq: 0,
    status: "running",
    pendingGate: null,
    iterations: [],
    rewards: [],
    terminal: null,
  };
}

function emptyCard(iteration: number): IterationCard {
  return {
    iteration,
    bindingDirectives: [],
    arm: null,
    narrative: "",
    planRounds: 0,
    critiques: [],
    codeStates: [],
    executions: [],
    advisor: null,
    reward: null,
  };
}

function withCard(
  timeline: Timeline,
  iteration: number,
  update: (card: IterationCard) => IterationCard,
): Timeline {
  const iterations = timeline.iterations.slice();
  const idx = iterations.findIndex((card) => card.iteration === iteration);
  const card = update(idx >= 0 ? iterations[idx] : emptyCard(iteration));
  if (idx >= 0) {
    iterations[idx] = card;
  } else {
    iterations.push(card);
  }
  return { ...timeline, iterations };
}

export function foldEvent(timeline: Timeline, event: EventEnvelope): Timeline {
  let next: Timeline = {
    ...timeline,
    sessionId: event.session_id,
    lastSeq: event.seq,
  };
  // Any progress event means the engine moved past whatever gate was open.
  if (event.kind !== "gate_waiting" && next.pendingGate !== null) {
    next = { ...next, pendingGate: null };
    if (next.status === "waiting_intervention") {
      next = { ...next, status: "running" };
    }
  }

  switch (event.kind) {
    case "strategy_proposed": {
      const payload = event.payload as unknown as StrategyProposedPayload;
      const action = payload.report.action;
      return withCard(next, payload.iteration, (card) => ({
        ...card,
        bindingDirectives: payload.binding_directives.slice(),
        arm: { rep: action.rep, constraint: action.constraint, opt: action.opt },
        narrative: payload.report.narrative,
        planRounds: Math.max(card.planRounds, payload.round),
      }));
    }
    case "critique": {
      const payload = event.payload as unknown as CritiquePayload;
      return withCard(next, payload.iteration, (card) => ({
        ...card,
        critiques: [...card.critiques, payload],
        planRounds: Math.max(card.planRounds, payload.round),
      }));
    }
    case "code_state": {
      const payload = event.payload as unknown as CodeStatePayload;
      return withCard(next, payload.iteration, (card) => ({
        ...card,
        codeStates: [...card.codeStates, payload],
      }));
    }
    case "execution": {
      const payload = event.payload as unknown as ExecutionPayload;
      return withCard(next, payload.iteration, (card) => ({
        ...card,
        executions: [...card.executions, payload],
      }));
    }
    case "advisor_report": {
      const payload = event.payload as unknown as AdvisorReportPayload;
      return withCard(next, payload.iteration, (card) => ({
        ...card,
        advisor: payload,
      }));
    }
    case "reward": {
      const payload = event.payload as unknown as RewardPayload;
      next = withCard(next, payload.iteration, (card) => ({
        ...card,
        reward: payload,
      }));
      return { ...next, rewards: [...next.rewards, payload.total] };
    }
    case "gate_waiting": {
      const payload = event.payload as unknown as GateWaitingPayload;
      return { ...next, status: "waiting_intervention", pendingGate: payload };
    }
    case "terminal": {
      const payload = event.payload as unknown as TerminalPayload;
      return {
        ...next,
        status: payload.status,
        pendingGate: null,
        terminal: payload,
      };
    }
  }
}

export function foldEvents(
  events: readonly EventEnvelope[],
  base?: Timeline,
): Timeline {
  return events.reduce(foldEvent, base ?? emptyTimeline());
}
