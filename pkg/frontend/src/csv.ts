import { readFileSync } from "node:fs";

export const ROUND_LOG_HEADER = "round,accuracy,confidence,n_selected,suspects,wall_ms";

export interface RoundRow {
  round: number;
  accuracy: number;
  confidence: number | null;
  nSelected: number;
  suspects: number[];
  wallMs: number;
}

export class CsvError extends Error {}

export function parseRoundLog(text: string, source: string): RoundRow[] {
  const lines = text
    .split(/\r?\n/)
    .map((l) => l.trim())
    .filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new CsvError(`${source}: empty CSV`);
  }
  if (lines[0] !== ROUND_LOG_HEADER) {
    throw new CsvError(`${source}: unexpected header '${lines[0]}'`);
  }
  if (lines.length === 1) {
    throw new CsvError(`${source}: no data rows`);
  }
  const rows: RoundRow[] = [];
  for (const line of lines.slice(1)) {
    const parts = line.split(",");
    if (parts.length !== 6) {
      throw new CsvError(`${source}: malformed row '${line}'`);
    }
    const [round, accuracy, confidence, nSelected, suspects, wallMs] = parts as [
      string, string, string, string, string, string,
    ];
    rows.push({
      round: intField(round, "round", source),
      accuracy: numField(accuracy, "accuracy", source),
      confidence: confidence === "" ? null : numField(confidence, "confidence", source),
      nSelected: intField(nSelected, "n_selected", source),
      suspects: suspects === "" ? [] : suspects.split("|").map((s) => intField(s, "suspects", source)),
      wallMs: numField(wallMs, "wall_ms", source),
    });
  }
  return rows;
}

export function loadRoundLog(path: string): RoundRow[] {
  let text: string;
  try {
    text = readFileSync(path, "utf8");
  } catch {
    throw new CsvError(`cannot read ${path}`);
  }
  return parseRoundLog(text, path);
}

/** Extract one metric column; a fully-empty confidence column is an error. */
export function metricSeries(rows: RoundRow[], metric: string, source: string): number[] {
  if (metric === "accuracy") {
    return rows.map((r) => r.accuracy);
  }
  if (metric === "confidence") {
    const values = rows.map((r) => r.confidence);
    if (values.every((v) => v === null)) {
      throw new CsvError(`${source}: column 'confidence' is empty (untargeted run?)`);
    }
    return values.map((v) => (v === null ? 0 : v));
  }
  throw new CsvError(`unknown metric column '${metric}' (accuracy | confidence)`);
}

function numField(raw: string, field: string, source: string): number {
  const v = Number(raw);
  if (!Number.isFinite(v)) {
    throw new CsvError(`${source}: bad ${field} value '${raw}'`);
  }
  return v;
}

function intField(raw: string, field: string, source: string): number {
  const v = numField(raw, field, source);
  if (!Number.isInteger(v)) {
    throw new CsvError(`${source}: ${field} must be an integer, got '${raw}'`);
  }
  return v;
}
