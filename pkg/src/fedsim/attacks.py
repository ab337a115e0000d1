"""Model-poisoning attack strategies.

Two untargeted attacks against Krum and coordinate-wise median, plus a
boosted targeted backdoor. Attackers operate in full-knowledge mode: they
see every benign update of the round and the previous global model, and
nothing else (in particular, never any test data).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine
from .engine import Architecture, ModelParams


@dataclass
class BackdoorTask:
    """One mislabeled sample plus the boost applied to the trained update."""

    image: np.ndarray
    target_label: int
    alpha: float
    malicious_epochs: int

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"boost alpha must be >= 1, got {self.alpha}")


def _flats(updates: list[ModelParams]) -> np.ndarray:
    return np.stack([u.flat().astype(np.float64) for u in updates])


def _estimate_direction(benign_flat: np.ndarray, global_flat: np.ndarray) -> np.ndarray:
    """Sign of the no-attack update direction; zero components count as +1."""
    s = np.sign(benign_flat.mean(axis=0) - global_flat)
    s[s == 0] = 1.0
    return s


def lambda_upper_bound(benign_updates: list[ModelParams], global_params: ModelParams,
                       m: int, n: int) -> float:
    """Largest admissible perturbation scale for the Krum attack.

    lambda_max = min_i sum of distances from benign i to its n-m-2 closest
    benign peers, scaled by 1/((n-2m-1) sqrt(d)), plus the largest benign
    distance to the global model scaled by 1/sqrt(d).
    """
    if m < 1:
        raise ValueError(f"need at least one attacker, got m={m}")
    if len(benign_updates) != n - m:
        raise ValueError(f"expected {n - m} benign updates, got {len(benign_updates)}")
    if n - m - 2 < 1:
        raise ValueError(f"need n-m-2 >= 1 (n={n}, m={m})")
    if n - 2 * m - 1 <= 0:
        raise ValueError(f"need n-2m-1 > 0 (n={n}, m={m})")
    mat = _flats(benign_updates)
    g = global_params.flat().astype(np.float64)
    d = g.size
    dist = np.sqrt(((mat[:, None] - mat[None]) ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    dist.sort(axis=1)
    min_neighbor_sum = dist[:, : n - m - 2].sum(axis=1).min()
    max_to_global = np.sqrt(((mat - g) ** 2).sum(-1)).max()
    return float(
        min_neighbor_sum / ((n - 2 * m - 1) * np.sqrt(d)) + max_to_global / np.sqrt(d)
    )


def craft_untargeted_krum(
    benign_updates: list[ModelParams],
    global_params: ModelParams,
    m: int,
    n: int,
    aggregator_probe: Callable[[list[ModelParams]], bool],
    threshold: float = 1e-5,
) -> list[ModelParams]:
    """Craft m identical updates w = w_G - lambda*s that Krum should select.

    lambda starts at its upper bound and is halved until the probe reports
    that a crafted update wins Krum, or lambda drops below the threshold.
    """
    g = global_params.flat().astype(np.float64)
    s = _estimate_direction(_flats(benign_updates), g)
    lam = lambda_upper_bound(benign_updates, global_params, m, n)

    def crafted_at(lam_value: float) -> list[ModelParams]:
        vec = g - lam_value * s
        one = ModelParams.from_flat(global_params, vec)
        return [one.copy() for _ in range(m)]

    while lam >= threshold:
        crafted = crafted_at(lam)
        if aggregator_probe(crafted):
            return crafted
        lam /= 2.0
    return crafted_at(lam)


def craft_untargeted_med(
    benign_updates: list[ModelParams],
    global_params: ModelParams,
    m: int,
    rng: np.random.Generator,
    b: float = 2.0,
) -> list[ModelParams]:
    """Push every coordinate just past the benign extremes, against the
    estimated update direction.

    With w_max/w_min the per-coordinate benign extremes: when s_j = -1 the m
    values are drawn from [w_max, b*w_max] (w_max > 0) or [w_max, w_max/b]
    (w_max <= 0); when s_j = +1 from [w_min/b, w_min] (w_min > 0) or
    [b*w_min, w_min] (w_min <= 0). Each attacker draws independently.
    """
    if b <= 1.0:
        raise ValueError(f"b must exceed 1, got {b}")
    if m < 1:
        raise ValueError(f"need at least one attacker, got m={m}")
    if not benign_updates:
        raise ValueError("need at least one benign update")
    mat = _flats(benign_updates)
    g = global_params.flat().astype(np.float64)
    s = _estimate_direction(mat, g)
    wmax = mat.max(axis=0)
    wmin = mat.min(axis=0)
    lo = np.where(s < 0, wmax, np.where(wmin > 0, wmin / b, b * wmin))
    hi = np.where(s < 0, np.where(wmax > 0, b * wmax, wmax / b), wmin)
    crafted = []
    for _ in range(m):
        u = rng.random(g.size)
        crafted.append(ModelParams.from_flat(global_params, lo + u * (hi - lo)))
    return crafted


def boost_update(global_params: ModelParams, trained: ModelParams, alpha: float) -> ModelParams:
    """w = w_G + alpha * (w_trained - w_G)."""
    g = global_params.flat().astype(np.float64)
    t = trained.flat().astype(np.float64)
    return ModelParams.from_flat(global_params, g + alpha * (t - g))


def backdoor_local_train(
    arch: Architecture,
    global_params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    task: BackdoorTask,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> ModelParams:
    """Train on local data with the backdoor sample in every batch, then boost."""
    trained, _ = engine.fit(
        arch,
        global_params,
        images,
        labels,
        epochs=task.malicious_epochs,
        batch_size=batch_size,
        lr=lr,
        rng=rng,
        inject=(task.image, task.target_label),
    )
    return boost_update(global_params, trained, task.alpha)
