import type { Chart, Shape } from "./chart.js";

const f = (v: number) => {
  const s = v.toFixed(2);
  return s === "-0.00" ? "0.00" : s;
};

const esc = (s: string) =>
  s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");

function shapeSvg(s: Shape): string {
  switch (s.kind) {
    case "rect":
      return `<rect x="${f(s.x)}" y="${f(s.y)}" width="${f(s.w)}" height="${f(s.h)}" fill="${s.fill}"/>`;
    case "line":
      return `<line x1="${f(s.x1)}" y1="${f(s.y1)}" x2="${f(s.x2)}" y2="${f(s.y2)}" stroke="${s.color}" stroke-width="1"/>`;
    case "polyline": {
      const pts = s.points.map(([x, y]) => `${f(x)},${f(y)}`).join(" ");
      return `<polyline points="${pts}" fill="none" stroke="${s.color}" stroke-width="1.5"/>`;
    }
    case "text":
      return (
        `<text x="${f(s.x)}" y="${f(s.y)}" fill="${s.color}" font-family="monospace" ` +
        `font-size="11" text-anchor="${s.anchor}">${esc(s.text)}</text>`
      );
  }
}

/** Deterministic text rendering: same chart, byte-identical SVG. */
export function renderSvg(chart: Chart): string {
  const body = chart.shapes.map(shapeSvg).join("\n  ");
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${chart.width}" ` +
    `height="${chart.height}" viewBox="0 0 ${chart.width} ${chart.height}">\n  ${body}\n</svg>\n`
  );
}
