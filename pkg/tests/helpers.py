"""Shared test utilities: gradient checking and cached experiment runs.

Heavy trend experiments (the acceptance criteria) run once through the real
CLI and land in artifacts/acceptance keyed by config hash + source digest,
so reruns of the suite reuse them; any change to the package source or to a
config invalidates the cache.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from fedsim import cli, engine
from fedsim.engine import ModelParams

REPO_ROOT = Path(__file__).resolve().parent.parent
CACHE_ROOT = Path(os.environ.get("FEDSIM_ACCEPT_CACHE", REPO_ROOT / "artifacts" / "acceptance"))


# ---------------------------------------------------------------------------
# gradient checking (finite-difference oracle)


def to_float64(params: ModelParams) -> ModelParams:
    out = params.copy()
    for l in out.layers:
        l.weight = l.weight.astype(np.float64)
        if l.bias is not None:
            l.bias = l.bias.astype(np.float64)
    return out


def numeric_grad(arch, params, batch, labels, dropout_seed, h=1e-3):
    base = params.flat()

    def loss_at(vec):
        p = ModelParams.from_flat(params, vec)
        loss, _ = engine.loss_and_grads(arch, p, batch, labels, dropout_seed)
        return loss

    grad = np.zeros_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    return grad


def max_gradient_rel_error(arch, seed=0, n=4, h=1e-3):
    rng = np.random.default_rng(seed)
    params = to_float64(engine.init_model(arch, seed))
    batch = rng.standard_normal((n,) + arch.input_shape)
    labels = rng.integers(0, arch.n_classes, n)
    _, grads = engine.loss_and_grads(arch, params, batch, labels, dropout_seed=7)
    analytic = np.concatenate([g.ravel() for g in grads])
    numeric = numeric_grad(arch, params, batch, labels, dropout_seed=7, h=h)
    return float(
        (np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)).max()
    )


# ---------------------------------------------------------------------------
# cached experiment runs


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted((REPO_ROOT / "src" / "fedsim").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cache_key(config: dict, seeds: list[int]) -> str:
    blob = json.dumps({"config": config, "seeds": seeds}, sort_keys=True)
    return hashlib.sha256((blob + source_digest()).encode()).hexdigest()[:12]


def run_cached(name: str, config: dict, seeds: list[int]) -> Path:
    """Run `fedsim run` for the config+seeds unless cached output exists."""
    out = CACHE_ROOT / f"{name}-{cache_key(config, seeds)}"
    if (out / "manifest.json").exists():
        return out
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config, indent=1, sort_keys=True))
    rc = cli.cmd_run(config_path, out, seeds=seeds)
    assert rc == 0
    return out


def run_cached_parallel(jobs: list[tuple[str, dict, list[int]]], workers: int = 2):
    """Run several configs concurrently (one subprocess per config+seed).

    Subprocesses pin BLAS to one thread each; results land in the same cache
    layout as run_cached.
    """
    todo = []
    outs = {}
    for name, config, seeds in jobs:
        out = CACHE_ROOT / f"{name}-{cache_key(config, seeds)}"
        outs[name] = out
        if not (out / "manifest.json").exists():
            todo.append((name, config, seeds, out))

    def launch(job):
        name, config, seeds, out = job
        out.mkdir(parents=True, exist_ok=True)
        config_path = out / "config.json"
        config_path.write_text(json.dumps(config, indent=1, sort_keys=True))
        env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
        proc = subprocess.run(
            [
                sys.executable, "-m", "fedsim.cli", "run",
                "--config", str(config_path), "--out", str(out),
                "--seeds", ",".join(str(s) for s in seeds),
            ],
            env=env,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"{name} failed:\n{proc.stderr}")
        return name

    if todo:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(launch, todo))
    return outs


def read_summary(out_dir: Path) -> dict:
    return json.loads((out_dir / "summary.json").read_text())


def read_rounds(out_dir: Path, seed: int) -> list[dict]:
    return json.loads((out_dir / f"rounds_seed{seed}.json").read_text())


def final_accuracies(out_dir: Path) -> list[float]:
    return [s["final_accuracy"] for s in read_summary(out_dir)["per_seed"]]


def mean_confidence_curve(out_dir: Path, seeds: list[int]) -> np.ndarray:
    curves = []
    for seed in seeds:
        curves.append([r["confidence"] for r in read_rounds(out_dir, seed)])
    return np.mean(np.array(curves, float), axis=0)
