// Wire types for the research loop HTTP API. Field names mirror the JSON
// payloads exactly, so everything here is snake_case.

export type EventKind =
  | "strategy_proposed"
  | "critique"
  | "code_state"
  | "execution"
  | "advisor_report"
  | "reward"
  | "gate_waiting"
  | "terminal";

export interface EventEnvelope {
  session_id: string;
  seq: number;
  kind: EventKind;
  payload: Record<string, unknown>;
  timestamp: number;
}

export interface ActionChoice {
  rep: string;
  constraint: string;
  opt: string;
  free_text_plan: string;
  iteration: number;
}

export interface StrategyReport {
  action: ActionChoice;
  narrative: string;
  required_modules: string[];
  training_plan: string;
  acceptance_targets: Record<string, number>;
}

export interface StrategyProposedPayload {
  iteration: number;
  round: number;
  binding_directives: string[];
  report: StrategyReport;
}

export interface CritiquePayload {
  iteration: number;
  round: number;
  verdict: string;
  requirements: string[];
  cited_principle: string;
}

export interface CodeStatePayload {
  iteration: number;
  version: string;
  sha256: string;
  cell_count: number;
  debug_round: number;
}

export interface ExecutionPayload {
  iteration: number;
  version: string;
  exit_code: number;
  timed_out: boolean;
  metrics: Record<string, number>;
}

export interface AdvisorReportPayload {
  iteration: number;
  degraded: boolean;
  text: string;
}

export interface RewardPayload {
  iteration: number;
  breakdown: Record<string, number>;
  total: number;
  decision: string;
  prescribed_cure: string;
}

export interface GateWaitingPayload {
  gate: string;
  iteration: number;
  [extra: string]: unknown;
}

export interface TerminalPayload {
  status: string;
  iterations: number;
  rewards: number[];
  best_reward?: number;
  error?: string;
}

export interface SessionSummary {
  session_id: string;
  status: string;
  mode: string;
  iterations: number;
  rewards: number[];
  pending_gate: string | null;
  title?: string;
  project?: string;
  error?: string;
}

export interface InterventionAck {
  gate: string;
  accepted: boolean;
  queued: boolean;
}
