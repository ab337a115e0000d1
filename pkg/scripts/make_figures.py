#!/usr/bin/env python3
"""Render the paper-style figures from cached acceptance artifacts.

Finds the trend-run outputs under artifacts/acceptance and calls the
TypeScript plot CLI on them: per-round backdoor-confidence curves
(targeted runs) and final-accuracy bars (untargeted runs).

Usage: python scripts/make_figures.py [out_dir]
"""

import subprocess
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
CACHE = REPO / "artifacts" / "acceptance"
PLOT_CLI = REPO / "frontend" / "dist" / "src" / "cli.js"


def find_run(prefix: str) -> Path:
    hits = sorted(CACHE.glob(f"{prefix}-*"))
    if not hits:
        raise SystemExit(f"no cached run matching {prefix}-* under {CACHE}")
    return hits[-1]


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else REPO / "artifacts" / "figures"
    out.mkdir(parents=True, exist_ok=True)
    if not PLOT_CLI.exists():
        raise SystemExit("frontend not built: run `cd frontend && npm install && npm run build`")

    jobs = [
        (
            "confidence_targeted",
            "confidence",
            "line",
            [("t_fedavg", "fedavg"), ("t_fedcc", "fedcc")],
        ),
        (
            "accuracy_untargeted",
            "accuracy",
            "line",
            [
                ("na_fedavg", "no-attack"),
                ("fm_fedavg", "fedavg"),
                ("fm_coomed", "coomed"),
                ("fm_fedcc", "fedcc"),
            ],
        ),
        (
            "final_accuracy_bars",
            "accuracy",
            "bar",
            [
                ("na_fedavg", "no-attack"),
                ("fm_fedavg", "fedavg"),
                ("fm_coomed", "coomed"),
                ("fm_fedcc", "fedcc"),
            ],
        ),
    ]
    for name, metric, mode, series in jobs:
        csvs, labels = [], []
        for prefix, label in series:
            csvs.append(str(find_run(prefix) / "round_log_seed0.csv"))
            labels.append(label)
        cmd = (
            ["node", str(PLOT_CLI), "plot", "--csv", *csvs, "--labels", *labels,
             "--metric", metric, "--mode", mode, "--out", str(out / f"{name}.png")]
        )
        subprocess.run(cmd, check=True)
    print(f"figures written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
