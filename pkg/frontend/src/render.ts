// String renderer for the timeline view. No DOM access here: given the same
// folded state it always returns the same markup, which keeps it testable in
// node and trivially snapshot-stable. app.ts owns mounting and event wiring.

import type { Timeline, IterationCard } from "./fold.js";
import type { GateWaitingPayload, TerminalPayload } from "./types.js";
import { rewardSparkline } from "./sparkline.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

const esc = escapeHtml;

function fmt(value: number): string {
  return String(value);
}

function fmtMetrics(metrics: Record<string, number>): string {
  return Object.entries(metrics)
    .map(([key, value]) => `${esc(key)}=${fmt(value)}`)
    .join(", ");
}

function renderSparkline(rewards: readonly number[]): string {
  const spark = rewardSparkline(rewards);
  if (spark.first === null || spark.last === null) {
    return '<p class="reward-spark empty">no rewards yet</p>';
  }
  return [
    '<figure class="reward-spark">',
    `<svg class="sparkline" viewBox="0 0 ${spark.width} ${spark.height}" ` +
      `width="${spark.width}" height="${spark.height}" role="img" ` +
      'aria-label="reward per iteration" ' +
      `data-first="${fmt(spark.first)}" data-last="${fmt(spark.last)}">`,
    `<polyline fill="none" stroke="currentColor" stroke-width="1.5" points="${spark.points}"></polyline>`,
    "</svg>",
    "<figcaption>" +
      `<span class="spark-first">${fmt(spark.first)}</span>` +
      '<span class="spark-sep"> to </span>' +
      `<span class="spark-last">${fmt(spark.last)}</span>` +
      "</figcaption>",
    "</figure>",
  ].join("");
}

function renderGate(gate: GateWaitingPayload): string {
  const parts = [
    `<aside class="gate-banner" data-gate="${esc(gate.gate)}">`,
    `<p><strong>waiting for intervention</strong> at gate ${esc(gate.gate)}` +
      ` (iteration ${fmt(gate.iteration)})</p>`,
  ];
  if (typeof gate.clarification === "string") {
    parts.push(`<p class="clarification">${esc(gate.clarification)}</p>`);
  }
  parts.push(
    `<form class="intervention" data-gate="${esc(gate.gate)}">`,
    '<input name="directive" type="text" ' +
      'placeholder="optional directive for the next iteration" />',
    '<button name="resolution" value="continue">continue</button>',
    '<button name="resolution" value="abort">abort</button>',
    "</form>",
    "</aside>",
  );
  return parts.join("");
}

function renderCard(card: IterationCard): string {
  const parts = [
    `<article class="iteration-card" data-iteration="${fmt(card.iteration)}">`,
    `<h3>Iteration ${fmt(card.iteration)}</h3>`,
  ];
  if (card.arm !== null) {
    const arm = `${card.arm.rep} / ${card.arm.constraint} / ${card.arm.opt}`;
    parts.push(`<p class="arm">${esc(arm)}</p>`);
  }
  if (card.bindingDirectives.length > 0) {
    const chips = card.bindingDirectives
      .map((text) => `<li class="directive">${esc(text)}</li>`)
      .join("");
    parts.push(`<ul class="directives">${chips}</ul>`);
  }
  if (card.narrative) {
    parts.push(`<p class="narrative">${esc(card.narrative)}</p>`);
  }
  if (card.critiques.length > 0) {
    const rows = card.critiques
      .map(
        (critique) =>
          `<li class="critique verdict-${esc(critique.verdict)}">` +
          `round ${fmt(critique.round)}: ${esc(critique.verdict)}` +
          (critique.cited_principle
            ? ` <span class="principle">${esc(critique.cited_principle)}</span>`
            : "") +
          "</li>",
      )
      .join("");
    parts.push(`<ul class="critiques">${rows}</ul>`);
  }
  for (const state of card.codeStates) {
    const label =
      state.debug_round > 0 ? ` debug round ${fmt(state.debug_round)}` : "";
    parts.push(
      `<p class="code-state">${esc(state.version)}: ${fmt(state.cell_count)} cells,` +
        ` sha ${esc(state.sha256.slice(0, 10))}${label}</p>`,
    );
  }
  for (const run of card.executions) {
    const status = run.timed_out ? "timeout" : `exit ${fmt(run.exit_code)}`;
    const ok = !run.timed_out && run.exit_code === 0;
    const metrics = fmtMetrics(run.metrics);
    parts.push(
      `<p class="execution ${ok ? "ok" : "failed"}">${esc(run.version)} ${status}` +
        (metrics ? `, ${metrics}` : "") +
        "</p>",
    );
  }
  if (card.advisor !== null) {
    const mark = card.advisor.degraded ? ' <em class="degraded">(degraded)</em>' : "";
    parts.push(
      `<blockquote class="advisor">${esc(card.advisor.text)}${mark}</blockquote>`,
    );
  }
  if (card.reward !== null) {
    const reward = card.reward;
    const breakdown = Object.entries(reward.breakdown)
      .map(([key, value]) => `<span class="part">${esc(key)} ${fmt(value)}</span>`)
      .join(" ");
    parts.push(
      '<p class="reward">' +
        `<strong class="total">${fmt(reward.total)}</strong>` +
        ` <span class="decision">${esc(reward.decision)}</span>` +
        (reward.prescribed_cure
          ? ` <span class="cure">${esc(reward.prescribed_cure)}</span>`
          : "") +
        "</p>",
      `<p class="reward-breakdown">${breakdown}</p>`,
    );
  }
  parts.push("</article>");
  return parts.join("");
}

function renderTerminal(terminal: TerminalPayload): string {
  const bits = [
    `session ${esc(terminal.status)} after ${fmt(terminal.iterations)} ` +
      (terminal.iterations === 1 ? "iteration" : "iterations"),
  ];
  if (typeof terminal.best_reward === "number") {
    bits.push(`best reward ${fmt(terminal.best_reward)}`);
  }
  if (terminal.error) {
    bits.push(esc(terminal.error));
  }
  return (
    `<footer class="terminal status-${esc(terminal.status)}">` +
    bits.join(", ") +
    "</footer>"
  );
}

export function renderTimeline(view: Timeline): string {
  const parts = [
    `<section class="timeline" data-status="${esc(view.status)}">`,
    '<header class="timeline-header">',
    `<span class="status status-${esc(view.status)}">${esc(view.status)}</span>`,
    renderSparkline(view.rewards),
    "</header>",
  ];
  if (view.pendingGate !== null) {
    parts.push(renderGate(view.pendingGate));
  }
  parts.push('<ol class="iterations">');
  for (const card of view.iterations) {
    parts.push(`<li>${renderCard(card)}</li>`);
  }
  parts.push("</ol>");
  if (view.terminal !== null) {
    parts.push(renderTerminal(view.terminal));
  }
  parts.push("</section>");
  return parts.join("\n");
}
