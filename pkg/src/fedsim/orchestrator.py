"""Federated round loop: selection, local training, attack injection,
aggregation, evaluation, logging."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import ceil
from typing import Optional

import numpy as np

from . import aggregators, attacks, data, engine
from .aggregators import AggregationResult, ClientUpdate
from .attacks import BackdoorTask
from .engine import Architecture, ModelParams

ATTACK_NAMES = ("none", "fang_krum", "fang_med", "targeted_backdoor")

# SeedSequence stream tags so every RNG in an experiment is an independent,
# reproducible function of (master seed, purpose, round, client)
_INIT, _SELECT, _CLIENT, _ATTACK, _SUBSET, _TASK = range(6)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class AttackSpec:
    type: str = "none"
    m: int = 0
    b: float = 2.0
    alpha_m: Optional[float] = None  # None -> n/m
    threshold: float = 1e-5
    source_class: int = 0
    target_label: int = 2
    # attackers control their own training hyperparameters; None inherits
    # the benign batch size
    batch_size: Optional[int] = None


@dataclass
class DefenseSpec:
    type: str = "fedavg"
    f: Optional[int] = None  # None -> true attacker count in the round
    beta: Optional[int] = None
    multi_m: Optional[int] = None
    k_neighbors: Optional[int] = None
    metric: str = "kernel_cka"


@dataclass
class ExperimentConfig:
    dataset: dict
    arch: dict
    rounds: int
    total_clients: int
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    partition: str = "dirichlet"
    alpha: float = 0.2
    fraction: float = 1.0
    benign_epochs: int = 3
    malicious_epochs: int = 6
    lr: float = 0.001
    batch_size: int = 64
    seed: int = 0

    @property
    def clients_per_round(self) -> int:
        return ceil(self.fraction * self.total_clients)


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a plain JSON-style dict."""
    _check_keys(
        raw,
        {
            "dataset", "arch", "rounds", "total_clients", "attack", "defense",
            "partition", "alpha", "fraction", "benign_epochs", "malicious_epochs",
            "lr", "batch_size", "seed",
        },
        "config",
    )
    for key in ("dataset", "arch", "rounds", "total_clients"):
        if key not in raw:
            raise ConfigError(f"missing required field '{key}'")

    attack_raw = dict(raw.get("attack", {}))
    _check_keys(
        attack_raw,
        {"type", "m", "b", "alpha_m", "threshold", "source_class", "target_label",
         "batch_size"},
        "attack",
    )
    attack = AttackSpec(**attack_raw)
    if attack.type not in ATTACK_NAMES:
        raise ConfigError(f"unknown attack type '{attack.type}'")

    defense_raw = dict(raw.get("defense", {}))
    _check_keys(
        defense_raw, {"type", "f", "beta", "multi_m", "k_neighbors", "metric"}, "defense"
    )
    defense = DefenseSpec(**defense_raw)
    if defense.type not in aggregators.AGGREGATOR_NAMES:
        raise ConfigError(f"unknown aggregator '{defense.type}'")
    from .similarity import SIMILARITY_METRICS

    if defense.metric not in SIMILARITY_METRICS:
        raise ConfigError(f"unknown similarity metric '{defense.metric}'")

    cfg = ExperimentConfig(
        dataset=dict(raw["dataset"]),
        arch=dict(raw["arch"]) if isinstance(raw["arch"], dict) else {"name": raw["arch"]},
        rounds=int(raw["rounds"]),
        total_clients=int(raw["total_clients"]),
        attack=attack,
        defense=defense,
        partition=raw.get("partition", "dirichlet"),
        alpha=float(raw.get("alpha", 0.2)),
        fraction=float(raw.get("fraction", 1.0)),
        benign_epochs=int(raw.get("benign_epochs", 3)),
        malicious_epochs=int(raw.get("malicious_epochs", 6)),
        lr=float(raw.get("lr", 0.001)),
        batch_size=int(raw.get("batch_size", 64)),
        seed=int(raw.get("seed", 0)),
    )
    if cfg.rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {cfg.rounds}")
    if not 0.0 < cfg.fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {cfg.fraction}")
    if cfg.partition not in ("iid", "dirichlet"):
        raise ConfigError(f"unknown partition '{cfg.partition}'")
    if cfg.alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {cfg.alpha}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if attack.type != "none":
        if attack.m < 1:
            raise ConfigError(f"attack '{attack.type}' needs m >= 1")
        if attack.m >= cfg.clients_per_round / 2:
            raise ConfigError(
                f"attackers m={attack.m} must stay below half the "
                f"{cfg.clients_per_round} clients per round"
            )
    return cfg


def build_arch(spec: dict) -> Architecture:
    _check_keys(spec, {"name", "hidden", "input_dim", "n_classes"}, "arch")
    name = spec.get("name")
    if name in engine.ARCHITECTURES:
        return engine.ARCHITECTURES[name]()
    if name == "mlp":
        return engine.mlp(
            int(spec["input_dim"]), list(spec.get("hidden", [16])), int(spec["n_classes"])
        )
    raise ConfigError(f"unknown architecture '{name}'")


def _subsample(ds: data.Dataset, n: Optional[int], rng: np.random.Generator) -> data.Dataset:
    if n is None or n >= len(ds):
        return ds
    return ds.subset(np.sort(rng.choice(len(ds), n, replace=False)))


def build_datasets(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset]:
    spec = dict(cfg.dataset)
    kind = spec.pop("type", None)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SUBSET]))
    if kind == "idx":
        _check_keys(
            spec,
            {"train_images", "train_labels", "test_images", "test_labels",
             "n_train", "n_test"},
            "dataset",
        )
        train = data.load_idx(spec["train_images"], spec["train_labels"])
        test = data.load_idx(spec["test_images"], spec["test_labels"])
        train = _subsample(train, spec.get("n_train"), rng)
        test = _subsample(test, spec.get("n_test"), rng)
        return train, test
    if kind == "glyphs":
        _check_keys(spec, {"n_train", "n_test", "noise"}, "dataset")
        noise = float(spec.get("noise", 0.25))
        train = data.synthetic_glyphs(int(spec["n_train"]), seed=cfg.seed * 2, noise=noise)
        test = data.synthetic_glyphs(int(spec["n_test"]), seed=cfg.seed * 2 + 1, noise=noise)
        return train, test
    if kind == "synthetic_gaussian":
        _check_keys(
            spec, {"n_classes", "dim", "n_per_class_train", "n_per_class_test", "spread"},
            "dataset",
        )
        train = data.synthetic_gaussian(
            int(spec["n_classes"]), int(spec["dim"]), int(spec["n_per_class_train"]),
            float(spec["spread"]), seed=cfg.seed * 2,
        )
        test = data.synthetic_gaussian(
            int(spec["n_classes"]), int(spec["dim"]), int(spec["n_per_class_test"]),
            float(spec["spread"]), seed=cfg.seed * 2 + 1,
        )
        return train, test
    raise ConfigError(f"unknown dataset type '{kind}'")


@dataclass
class RoundLog:
    round: int
    accuracy: float
    confidence: Optional[float]
    selected_ids: list[int]
    suspect_ids: list[int]
    scores: Optional[dict[int, float]]
    wall_ms: float


@dataclass
class ExperimentState:
    arch: Architecture
    train: data.Dataset
    test: data.Dataset
    partition: list[np.ndarray]
    global_params: ModelParams
    task: Optional[BackdoorTask]


def build_experiment(cfg: ExperimentConfig) -> ExperimentState:
    arch = build_arch(cfg.arch)
    train, test = build_datasets(cfg)
    if cfg.partition == "iid":
        part = data.iid_partition(train.labels, cfg.total_clients, seed=cfg.seed)
    else:
        part = data.dirichlet_partition(
            train.labels, cfg.total_clients, alpha=cfg.alpha, seed=cfg.seed
        )
    init_seed = int(
        np.random.default_rng(np.random.SeedSequence([cfg.seed, _INIT])).integers(2**31)
    )
    global_params = engine.init_model(arch, init_seed)
    task = None
    if cfg.attack.type == "targeted_backdoor":
        task_seed = int(
            np.random.default_rng(np.random.SeedSequence([cfg.seed, _TASK])).integers(2**31)
        )
        image, label = data.make_backdoor_sample(
            train, cfg.attack.source_class, cfg.attack.target_label, seed=task_seed
        )
        alpha = cfg.attack.alpha_m
        if alpha is None:
            alpha = cfg.clients_per_round / cfg.attack.m
        task = BackdoorTask(
            image, label, alpha=alpha, malicious_epochs=cfg.malicious_epochs
        )
    return ExperimentState(arch, train, test, part, global_params, task)


def _client_rng(cfg: ExperimentConfig, round_idx: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _CLIENT, round_idx, client_id])
    )


def _train_benign(state: ExperimentState, cfg: ExperimentConfig, round_idx: int,
                  client_id: int) -> ClientUpdate:
    idx = state.partition[client_id]
    params, _ = engine.fit(
        state.arch,
        state.global_params,
        state.train.images[idx],
        state.train.labels[idx],
        epochs=cfg.benign_epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        rng=_client_rng(cfg, round_idx, client_id),
    )
    return ClientUpdate(client_id, params, len(idx), is_malicious_truth=False)


def _craft_malicious(state: ExperimentState, cfg: ExperimentConfig, round_idx: int,
                     malicious_ids: list[int],
                     benign_updates: list[ClientUpdate]) -> list[ClientUpdate]:
    m = len(malicious_ids)
    n = m + len(benign_updates)
    benign_params = [u.params for u in benign_updates]
    kind = cfg.attack.type
    if kind == "fang_krum":

        def probe(crafted: list[ModelParams]) -> bool:
            ups = [
                ClientUpdate(cid, p, len(state.partition[cid]), True)
                for cid, p in zip(malicious_ids, crafted)
            ] + benign_updates
            winner = aggregators.krum(ups, f=m).selected_ids[0]
            return winner in malicious_ids

        crafted = attacks.craft_untargeted_krum(
            benign_params, state.global_params, m, n,
            aggregator_probe=probe, threshold=cfg.attack.threshold,
        )
    elif kind == "fang_med":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _ATTACK, round_idx]))
        crafted = attacks.craft_untargeted_med(
            benign_params, state.global_params, m, rng=rng, b=cfg.attack.b
        )
    elif kind == "targeted_backdoor":
        attacker_batch = cfg.attack.batch_size or cfg.batch_size
        crafted = []
        for cid in malicious_ids:
            idx = state.partition[cid]
            crafted.append(
                attacks.backdoor_local_train(
                    state.arch,
                    state.global_params,
                    state.train.images[idx],
                    state.train.labels[idx],
                    state.task,
                    lr=cfg.lr,
                    batch_size=attacker_batch,
                    rng=_client_rng(cfg, round_idx, cid),
                )
            )
    else:
        raise ConfigError(f"unknown attack type '{kind}'")
    return [
        ClientUpdate(cid, p, len(state.partition[cid]), is_malicious_truth=True)
        for cid, p in zip(malicious_ids, crafted)
    ]


def _aggregate(state: ExperimentState, cfg: ExperimentConfig,
               updates: list[ClientUpdate], true_m: int) -> AggregationResult:
    d = cfg.defense
    f_eff = d.f if d.f is not None else true_m
    try:
        if d.type == "fedavg":
            return aggregators.fedavg(updates)
        if d.type == "krum":
            return aggregators.krum(updates, f=f_eff, multi_m=1)
        if d.type == "mkrum":
            return aggregators.krum(updates, f=f_eff, multi_m=d.multi_m)
        if d.type == "coomed":
            return aggregators.coomed(updates)
        if d.type == "trimmed_mean":
            beta = d.beta if d.beta is not None else true_m
            return aggregators.trimmed_mean(updates, beta=beta)
        if d.type == "bulyan":
            return aggregators.bulyan(updates, f=f_eff)
        if d.type == "flare":
            return aggregators.flare_lite(updates, state.arch, k_neighbors=d.k_neighbors)
        if d.type == "fedcc":
            return aggregators.fedcc(
                state.global_params, updates, state.arch, metric=d.metric
            )
    except ValueError as exc:
        raise ConfigError(f"aggregator '{d.type}' rejected the round: {exc}") from exc
    raise ConfigError(f"unknown aggregator '{d.type}'")


def run_round(state: ExperimentState, cfg: ExperimentConfig, round_idx: int):
    """One federated round; returns (new state, RoundLog, round updates)."""
    t0 = time.perf_counter()
    sel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SELECT, round_idx]))
    selected = np.sort(
        sel_rng.choice(cfg.total_clients, cfg.clients_per_round, replace=False)
    ).tolist()
    attack_on = cfg.attack.type != "none"
    malicious_ids = [c for c in selected if attack_on and c < cfg.attack.m]
    benign_ids = [c for c in selected if c not in malicious_ids]

    updates = [_train_benign(state, cfg, round_idx, c) for c in benign_ids]
    if malicious_ids:
        try:
            updates += _craft_malicious(state, cfg, round_idx, malicious_ids, updates)
        except ValueError as exc:
            raise ConfigError(
                f"attack '{cfg.attack.type}' infeasible this round: {exc}"
            ) from exc
    updates.sort(key=lambda u: u.client_id)

    result = _aggregate(state, cfg, updates, true_m=len(malicious_ids))
    new_state = ExperimentState(
        state.arch, state.train, state.test, state.partition,
        result.global_params, state.task,
    )
    accuracy = evaluate_accuracy(state.arch, result.global_params, state.test)
    confidence = None
    if state.task is not None:
        confidence = backdoor_confidence(state.arch, result.global_params, state.task)
    suspects = sorted(set(selected) - set(result.selected_ids))
    log = RoundLog(
        round=round_idx,
        accuracy=accuracy,
        confidence=confidence,
        selected_ids=result.selected_ids,
        suspect_ids=suspects,
        scores=result.scores,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )
    return new_state, log, updates


def run_experiment(cfg: ExperimentConfig):
    """All rounds of one experiment; returns (round logs, summary dict)."""
    state = build_experiment(cfg)
    logs: list[RoundLog] = []
    for t in range(1, cfg.rounds + 1):
        state, log, _ = run_round(state, cfg, t)
        logs.append(log)
    summary = {
        "rounds": cfg.rounds,
        "final_accuracy": logs[-1].accuracy,
        "final_confidence": logs[-1].confidence,
    }
    tail = [l.confidence for l in logs[-10:] if l.confidence is not None]
    summary["mean_confidence_last10"] = float(np.mean(tail)) if tail else None
    return logs, summary


def evaluate_accuracy(arch: Architecture, params: ModelParams,
                      test: data.Dataset, chunk: int = 256) -> float:
    """Percentage of argmax-correct predictions on the test set."""
    if len(test) == 0:
        raise ValueError("empty test set")
    correct = 0
    for start in range(0, len(test), chunk):
        batch = test.images[start : start + chunk]
        probs = engine.predict_proba(arch, params, batch)
        correct += int((probs.argmax(1) == test.labels[start : start + chunk]).sum())
    return 100.0 * correct / len(test)


def backdoor_confidence(arch: Architecture, params: ModelParams,
                        task: BackdoorTask) -> float:
    """Softmax probability the model assigns to the attacker's target label."""
    if task is None:
        raise ValueError("no backdoor task configured")
    probs = engine.predict_proba(arch, params, task.image[None])
    return float(probs[0, task.target_label])
