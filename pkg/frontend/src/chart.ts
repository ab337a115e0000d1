export interface Series {
  label: string;
  values: number[];
}

export interface ChartSpec {
  metric: "accuracy" | "confidence";
  mode: "line" | "bar";
  series: Series[];
}

export type Shape =
  | { kind: "rect"; x: number; y: number; w: number; h: number; fill: string }
  | { kind: "line"; x1: number; y1: number; x2: number; y2: number; color: string }
  | { kind: "polyline"; points: [number, number][]; color: string }
  | {
      kind: "text";
      x: number;
      y: number;
      text: string;
      color: string;
      anchor: "start" | "middle" | "end";
    };

export interface Chart {
  width: number;
  height: number;
  shapes: Shape[];
}

export const WIDTH = 640;
export const HEIGHT = 400;
const MARGIN = { left: 56, right: 16, top: 28, bottom: 40 };
export const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const AXIS = "#222222";
const GRID = "#dddddd";

function yDomain(metric: "accuracy" | "confidence"): [number, number] {
  return metric === "accuracy" ? [0, 100] : [0, 1];
}

const clamp = (v: number, lo: number, hi: number) => Math.min(hi, Math.max(lo, v));

/** Lay out a full figure as resolution-independent shapes. */
export function buildChart(spec: ChartSpec): Chart {
  if (spec.series.length === 0) {
    throw new Error("no series to plot");
  }
  const [lo, hi] = yDomain(spec.metric);
  const plotW = WIDTH - MARGIN.left - MARGIN.right;
  const plotH = HEIGHT - MARGIN.top - MARGIN.bottom;
  const x0 = MARGIN.left;
  const y0 = MARGIN.top;
  const toY = (v: number) => y0 + plotH - ((clamp(v, lo, hi) - lo) / (hi - lo)) * plotH;

  const shapes: Shape[] = [];
  shapes.push({ kind: "rect", x: 0, y: 0, w: WIDTH, h: HEIGHT, fill: "#ffffff" });

  // horizontal grid + y tick labels
  const ticks = 5;
  for (let i = 0; i <= ticks; i++) {
    const v = lo + ((hi - lo) * i) / ticks;
    const y = toY(v);
    shapes.push({ kind: "line", x1: x0, y1: y, x2: x0 + plotW, y2: y, color: GRID });
    shapes.push({
      kind: "text",
      x: x0 - 6,
      y: y + 3,
      text: spec.metric === "accuracy" ? v.toFixed(0) : v.toFixed(1),
      color: AXIS,
      anchor: "end",
    });
  }

  if (spec.mode === "line") {
    const maxLen = Math.max(...spec.series.map((s) => s.values.length));
    const toX = (idx: number) =>
      maxLen === 1 ? x0 + plotW / 2 : x0 + (idx / (maxLen - 1)) * plotW;
    const xTickEvery = Math.max(1, Math.ceil(maxLen / 10));
    for (let r = 0; r < maxLen; r += xTickEvery) {
      shapes.push({
        kind: "text",
        x: toX(r),
        y: y0 + plotH + 16,
        text: String(r + 1),
        color: AXIS,
        anchor: "middle",
      });
    }
    spec.series.forEach((s, i) => {
      const color = PALETTE[i % PALETTE.length]!;
      shapes.push({
        kind: "polyline",
        points: s.values.map((v, idx) => [toX(idx), toY(v)] as [number, number]),
        color,
      });
    });
    shapes.push({
      kind: "text",
      x: x0 + plotW / 2,
      y: HEIGHT - 8,
      text: "round",
      color: AXIS,
      anchor: "middle",
    });
  } else {
    // one bar per series: its final value
    const n = spec.series.length;
    const slot = plotW / n;
    const barW = slot * 0.6;
    spec.series.forEach((s, i) => {
      const v = s.values[s.values.length - 1]!;
      const x = x0 + i * slot + (slot - barW) / 2;
      const y = toY(v);
      shapes.push({
        kind: "rect",
        x,
        y,
        w: barW,
        h: y0 + plotH - y,
        fill: PALETTE[i % PALETTE.length]!,
      });
      shapes.push({
        kind: "text",
        x: x + barW / 2,
        y: y0 + plotH + 16,
        text: s.label,
        color: AXIS,
        anchor: "middle",
      });
      shapes.push({
        kind: "text",
        x: x + barW / 2,
        y: y - 4,
        text: spec.metric === "accuracy" ? v.toFixed(1) : v.toFixed(3),
        color: AXIS,
        anchor: "middle",
      });
    });
  }

  // axes on top of grid
  shapes.push({ kind: "line", x1: x0, y1: y0, x2: x0, y2: y0 + plotH, color: AXIS });
  shapes.push({
    kind: "line",
    x1: x0,
    y1: y0 + plotH,
    x2: x0 + plotW,
    y2: y0 + plotH,
    color: AXIS,
  });
  shapes.push({
    kind: "text",
    x: x0,
    y: y0 - 10,
    text: spec.metric,
    color: AXIS,
    anchor: "start",
  });

  if (spec.mode === "line") {
    spec.series.forEach((s, i) => {
      const y = y0 + 8 + i * 14;
      const x = x0 + plotW - 130;
      shapes.push({
        kind: "line",
        x1: x,
        y1: y,
        x2: x + 22,
        y2: y,
        color: PALETTE[i % PALETTE.length]!,
      });
      shapes.push({ kind: "text", x: x + 28, y: y + 3, text: s.label, color: AXIS, anchor: "start" });
    });
  }

  return { width: WIDTH, height: HEIGHT, shapes };
}
