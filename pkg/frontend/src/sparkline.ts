// Reward-over-iterations sparkline geometry. Pure arithmetic so the renderer
// stays string-in, string-out and the tests can pin exact coordinates.

export interface Sparkline {
  width: number;
  height: number;
  /** SVG polyline points, empty when there is nothing to plot. */
  points: string;
  first: number | null;
  last: number | null;
}

const PAD = 2;

function coord(value: number): string {
  return String(Math.round(value * 100) / 100);
}

export function rewardSparkline(
  rewards: readonly number[],
  width = 120,
  height = 36,
  ceiling = 100,
): Sparkline {
  if (rewards.length === 0) {
    return { width, height, points: "", first: null, last: null };
  }
  const innerW = width - 2 * PAD;
  const innerH = height - 2 * PAD;
  const points = rewards.map((reward, i) => {
    const x =
      rewards.length > 1 ? PAD + (i * innerW) / (rewards.length - 1) : width / 2;
    const clamped = Math.min(Math.max(reward, 0), ceiling);
    const y = PAD + innerH * (1 - clamped / ceiling);
    return `${coord(x)},${coord(y)}`;
  });
  return {
    width,
    height,
    points: points.join(" "),
    first: rewards[0],
    last: rewards[rewards.length - 1],
  };
}
