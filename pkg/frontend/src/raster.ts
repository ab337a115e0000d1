import type { Chart, Shape } from "./chart.js";
import { GLYPH_H, GLYPH_W, glyphFor, textWidth } from "./font.js";

/** Tiny software canvas: enough to rasterize the chart shapes for PNG output. */
export class Canvas {
  readonly width: number;
  readonly height: number;
  readonly pixels: Uint8Array; // RGBA

  constructor(width: number, height: number) {
    this.width = width;
    this.height = height;
    this.pixels = new Uint8Array(width * height * 4);
  }

  set(x: number, y: number, rgb: [number, number, number]): void {
    const xi = Math.round(x);
    const yi = Math.round(y);
    if (xi < 0 || yi < 0 || xi >= this.width || yi >= this.height) return;
    const o = (yi * this.width + xi) * 4;
    this.pixels[o] = rgb[0];
    this.pixels[o + 1] = rgb[1];
    this.pixels[o + 2] = rgb[2];
    this.pixels[o + 3] = 255;
  }

  fillRect(x: number, y: number, w: number, h: number, rgb: [number, number, number]): void {
    for (let yy = Math.round(y); yy < Math.round(y + h); yy++) {
      for (let xx = Math.round(x); xx < Math.round(x + w); xx++) {
        this.set(xx, yy, rgb);
      }
    }
  }

  line(x1: number, y1: number, x2: number, y2: number, rgb: [number, number, number]): void {
    // Bresenham on rounded endpoints
    let x = Math.round(x1);
    let y = Math.round(y1);
    const ex = Math.round(x2);
    const ey = Math.round(y2);
    const dx = Math.abs(ex - x);
    const dy = -Math.abs(ey - y);
    const sx = x < ex ? 1 : -1;
    const sy = y < ey ? 1 : -1;
    let err = dx + dy;
    for (;;) {
      this.set(x, y, rgb);
      if (x === ex && y === ey) break;
      const e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y += sy;
      }
    }
  }

  text(
    x: number,
    y: number,
    text: string,
    rgb: [number, number, number],
    anchor: "start" | "middle" | "end",
  ): void {
    const w = textWidth(text);
    let left = Math.round(anchor === "start" ? x : anchor === "middle" ? x - w / 2 : x - w);
    const top = Math.round(y) - GLYPH_H + 1; // y is the text baseline
    for (const ch of text) {
      const glyph = glyphFor(ch);
      for (let r = 0; r < GLYPH_H; r++) {
        const row = glyph[r]!;
        for (let c = 0; c < 5; c++) {
          if (row[c] === "#") this.set(left + c, top + r, rgb);
        }
      }
      left += GLYPH_W;
    }
  }
}

function hexRgb(hex: string): [number, number, number] {
  return [
    parseInt(hex.slice(1, 3), 16),
    parseInt(hex.slice(3, 5), 16),
    parseInt(hex.slice(5, 7), 16),
  ];
}

export function rasterize(chart: Chart): Canvas {
  const canvas = new Canvas(chart.width, chart.height);
  canvas.fillRect(0, 0, chart.width, chart.height, [255, 255, 255]);
  for (const shape of chart.shapes) {
    drawShape(canvas, shape);
  }
  return canvas;
}

function drawShape(canvas: Canvas, s: Shape): void {
  switch (s.kind) {
    case "rect":
      canvas.fillRect(s.x, s.y, s.w, s.h, hexRgb(s.fill));
      break;
    case "line":
      canvas.line(s.x1, s.y1, s.x2, s.y2, hexRgb(s.color));
      break;
    case "polyline": {
      const rgb = hexRgb(s.color);
      for (let i = 1; i < s.points.length; i++) {
        const [x1, y1] = s.points[i - 1]!;
        const [x2, y2] = s.points[i]!;
        canvas.line(x1, y1, x2, y2, rgb);
      }
      break;
    }
    case "text":
      canvas.text(s.x, s.y, s.text, hexRgb(s.color), s.anchor);
      break;
  }
}
