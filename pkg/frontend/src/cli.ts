import { writeFileSync } from "node:fs";
import { basename } from "node:path";
import process from "node:process";

import { buildChart, type Series } from "./chart.js";
import { CsvError, loadRoundLog, metricSeries } from "./csv.js";
import { encodePng } from "./png.js";
import { rasterize } from "./raster.js";
import { renderSvg } from "./svg.js";

export interface PlotArgs {
  csv: string[];
  labels: string[];
  metric: "accuracy" | "confidence";
  mode: "line" | "bar";
  out: string;
}

export function parseArgs(argv: string[]): PlotArgs {
  if (argv[0] !== "plot") {
    throw new CsvError(`unknown command '${argv[0] ?? ""}' (expected: plot)`);
  }
  const args: PlotArgs = { csv: [], labels: [], metric: "accuracy", mode: "line", out: "" };
  let key: string | null = null;
  for (const token of argv.slice(1)) {
    if (token.startsWith("--")) {
      key = token.slice(2);
      if (!["csv", "labels", "metric", "out", "mode"].includes(key)) {
        throw new CsvError(`unknown flag --${key}`);
      }
      continue;
    }
    switch (key) {
      case "csv":
        args.csv.push(token);
        break;
      case "labels":
        args.labels.push(token);
        break;
      case "metric":
        if (token !== "accuracy" && token !== "confidence") {
          throw new CsvError(`unknown metric column '${token}' (accuracy | confidence)`);
        }
        args.metric = token;
        break;
      case "mode":
        if (token !== "line" && token !== "bar") {
          throw new CsvError(`unknown mode '${token}' (line | bar)`);
        }
        args.mode = token;
        break;
      case "out":
        args.out = token;
        break;
      default:
        throw new CsvError(`unexpected argument '${token}'`);
    }
  }
  if (args.csv.length === 0) throw new CsvError("--csv requires at least one file");
  if (args.out === "") throw new CsvError("--out is required");
  if (args.labels.length > 0 && args.labels.length !== args.csv.length) {
    throw new CsvError(
      `got ${args.labels.length} labels for ${args.csv.length} CSV files`,
    );
  }
  return args;
}

export function plot(args: PlotArgs): { png: string; svg: string } {
  const series: Series[] = args.csv.map((path, i) => ({
    label: args.labels[i] ?? basename(path).replace(/\.csv$/, ""),
    values: metricSeries(loadRoundLog(path), args.metric, path),
  }));
  const chart = buildChart({ metric: args.metric, mode: args.mode, series });
  const svgPath = args.out.replace(/\.png$/, "") + ".svg";
  const pngPath = args.out.endsWith(".png") ? args.out : args.out + ".png";
  // render both before writing so a failure leaves no partial output
  const svgText = renderSvg(chart);
  const pngBytes = encodePng(rasterize(chart));
  writeFileSync(svgPath, svgText);
  writeFileSync(pngPath, pngBytes);
  return { png: pngPath, svg: svgPath };
}

export function main(argv: string[]): number {
  try {
    const out = plot(parseArgs(argv));
    console.log(`wrote ${out.png} and ${out.svg}`);
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

if (process.argv[1] && import.meta.url.endsWith(basename(process.argv[1]))) {
  process.exit(main(process.argv.slice(2)));
}
