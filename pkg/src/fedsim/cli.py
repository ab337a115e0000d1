"""Command-line entry points and result artifacts.

Subcommands:
  run              execute an experiment config for one or more seeds
  layer-analysis   one attacked round, per-layer cluster distances as CSV
  metric-ablation  rerun the experiment with each similarity metric plugged
                   into the defense

Round logs are CSV (round,accuracy,confidence,n_selected,suspects,wall_ms)
with a JSON twin holding the full per-client score vectors; wall_ms is the
only field that varies between identical reruns.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, orchestrator
from .clustering import per_layer_cluster_distance
from .orchestrator import ConfigError, ExperimentConfig, RoundLog
from .similarity import SIMILARITY_METRICS

CSV_HEADER = "round,accuracy,confidence,n_selected,suspects,wall_ms"


def config_hash(raw: dict) -> str:
    return hashlib.sha256(
        json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return raw


def _fmt_confidence(value) -> str:
    return "" if value is None else f"{value:.6f}"


def write_round_csv(path, logs: list[RoundLog]) -> None:
    lines = [CSV_HEADER]
    for log in logs:
        suspects = "|".join(str(s) for s in log.suspect_ids)
        lines.append(
            f"{log.round},{log.accuracy:.6f},{_fmt_confidence(log.confidence)},"
            f"{len(log.selected_ids)},{suspects},{log.wall_ms:.3f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_rounds_json(path, logs: list[RoundLog]) -> None:
    rows = []
    for log in logs:
        rows.append(
            {
                "round": log.round,
                "accuracy": log.accuracy,
                "confidence": log.confidence,
                "selected": log.selected_ids,
                "suspects": log.suspect_ids,
                "scores": (
                    {str(k): v for k, v in sorted(log.scores.items())}
                    if log.scores is not None
                    else None
                ),
            }
        )
    Path(path).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


def read_round_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path} does not carry the round-log header")
    rows = []
    for line in lines[1:]:
        r, acc, conf, n_sel, suspects, wall = line.split(",")
        rows.append(
            {
                "round": int(r),
                "accuracy": float(acc),
                "confidence": None if conf == "" else float(conf),
                "n_selected": int(n_sel),
                "suspects": [int(s) for s in suspects.split("|") if s != ""],
                "wall_ms": float(wall),
            }
        )
    return rows


def cmd_run(config_path, out_dir, seeds=None) -> int:
    raw = load_config(config_path)
    base = orchestrator.parse_config(raw)
    if seeds is None:
        seeds = [base.seed]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    per_seed = []
    outputs = []
    for seed in seeds:
        cfg = dataclasses.replace(base, seed=int(seed))
        logs, summary = orchestrator.run_experiment(cfg)
        csv_name = f"round_log_seed{seed}.csv"
        json_name = f"rounds_seed{seed}.json"
        write_round_csv(out / csv_name, logs)
        write_rounds_json(out / json_name, logs)
        outputs += [csv_name, json_name]
        per_seed.append(
            {
                "seed": int(seed),
                "final_accuracy": summary["final_accuracy"],
                "final_confidence": summary["final_confidence"],
                "mean_confidence_last10": summary["mean_confidence_last10"],
            }
        )

    finals = [s["final_accuracy"] for s in per_seed]
    confs = [s["final_confidence"] for s in per_seed if s["final_confidence"] is not None]
    summary_doc = {
        "config_sha256": config_hash(raw),
        "seeds": [int(s) for s in seeds],
        "per_seed": per_seed,
        "mean_final_accuracy": float(np.mean(finals)),
        "mean_final_confidence": float(np.mean(confs)) if confs else None,
    }
    (out / "summary.json").write_text(json.dumps(summary_doc, indent=1, sort_keys=True) + "\n")
    manifest = {
        "config_sha256": config_hash(raw),
        "seeds": [int(s) for s in seeds],
        "outputs": sorted(set(outputs)) + ["summary.json"],
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_layer_analysis(config_path, out_dir) -> int:
    raw = load_config(config_path)
    cfg = orchestrator.parse_config(raw)
    if cfg.attack.type == "none":
        raise ConfigError("layer-analysis needs a config with an attack set")
    state = orchestrator.build_experiment(cfg)
    _, _, updates = orchestrator.run_round(state, cfg, 1)
    rows = per_layer_cluster_distance([u.params for u in updates])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["layer,root_distance"]
    lines += [f"{name},{dist:.9f}" for name, dist in rows]
    (out / "layer_analysis.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_metric_ablation(config_path, out_dir) -> int:
    raw = load_config(config_path)
    base = orchestrator.parse_config(raw)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["metric,final_accuracy,final_confidence"]
    for metric in SIMILARITY_METRICS:
        defense = dataclasses.replace(base.defense, type="fedcc", metric=metric)
        cfg = dataclasses.replace(base, defense=defense)
        _, summary = orchestrator.run_experiment(cfg)
        lines.append(
            f"{metric},{summary['final_accuracy']:.6f},"
            f"{_fmt_confidence(summary['final_confidence'])}"
        )
    (out / "metric_ablation.csv").write_text("\n".join(lines) + "\n")
    return 0


def _parse_seeds(text):
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got '{text}'")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedsim", description="Federated-learning attack/defense simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seeds", default=None, help='comma-separated, e.g. "0,1,2"')

    p_layer = sub.add_parser("layer-analysis", help="per-layer cluster distances")
    p_layer.add_argument("--config", required=True)
    p_layer.add_argument("--out", required=True)

    p_abl = sub.add_parser("metric-ablation", help="compare similarity metrics")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, _parse_seeds(args.seeds))
        if args.command == "layer-analysis":
            return cmd_layer_analysis(args.config, args.out)
        if args.command == "metric-ablation":
            return cmd_metric_ablation(args.config, args.out)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
