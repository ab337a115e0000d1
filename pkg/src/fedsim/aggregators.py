"""Server-side aggregation rules.

All rules sort client updates by id first and reduce in that order, so the
output is bit-deterministic for a given set of updates. Arithmetic happens
on flattened float64 vectors and is cast back to the parameter dtype at the
end. The ground-truth malicious flag on ClientUpdate exists for evaluation
only and is never read here.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Optional

import numpy as np

from .clustering import kmeans_2
from .engine import Architecture, ModelParams
from .similarity import extract_plr, mmd, similarity_score


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    n_samples: int
    is_malicious_truth: bool = False


@dataclass
class AggregationResult:
    global_params: ModelParams
    selected_ids: list[int]
    scores: Optional[dict[int, float]] = None


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    return sorted(updates, key=lambda u: u.client_id)


def _stack(updates: list[ClientUpdate]) -> np.ndarray:
    return np.stack([u.params.flat().astype(np.float64) for u in updates])


def _rebuild(template: ModelParams, vec: np.ndarray) -> ModelParams:
    return ModelParams.from_flat(template, vec)


def fedavg(updates: list[ClientUpdate]) -> AggregationResult:
    """Sample-count-weighted coordinate mean of all updates."""
    ups = _sorted_updates(updates)
    mat = _stack(ups)
    weights = np.array([u.n_samples for u in ups], np.float64)
    weights /= weights.sum()
    out = weights @ mat
    return AggregationResult(_rebuild(ups[0].params, out), [u.client_id for u in ups])


def _krum_scores(mat: np.ndarray, n_neighbors: int) -> np.ndarray:
    """Sum of squared distances to each row's n_neighbors nearest other rows."""
    sq = ((mat[:, None] - mat[None]) ** 2).sum(-1)
    np.fill_diagonal(sq, np.inf)
    sq.sort(axis=1)
    return sq[:, :n_neighbors].sum(axis=1)


def krum(updates: list[ClientUpdate], f: int,
         multi_m: Optional[int] = 1) -> AggregationResult:
    """Krum / Multi-Krum: pick the update(s) closest to their n-f-2 neighbors.

    multi_m=1 is classic Krum; multi_m=None averages the default n-f-2
    lowest-scored updates. Score ties break on the lower client id.
    """
    ups = _sorted_updates(updates)
    n = len(ups)
    if n < 2 * f + 3:
        raise ValueError(f"krum needs n >= 2f+3 (n={n}, f={f})")
    if multi_m is None:
        multi_m = n - f - 2
    if not 1 <= multi_m <= n:
        raise ValueError(f"multi_m {multi_m} out of range for n={n}")
    mat = _stack(ups)
    scores = _krum_scores(mat, n - f - 2)
    order = np.argsort(scores, kind="stable")  # stable: id order breaks ties
    chosen = sorted(order[:multi_m].tolist())
    out = mat[chosen].mean(axis=0)
    return AggregationResult(
        _rebuild(ups[0].params, out),
        [ups[i].client_id for i in chosen],
        {u.client_id: float(s) for u, s in zip(ups, scores)},
    )


def coomed(updates: list[ClientUpdate]) -> AggregationResult:
    """Coordinate-wise median (even counts average the two middle values)."""
    ups = _sorted_updates(updates)
    out = np.median(_stack(ups), axis=0)
    return AggregationResult(_rebuild(ups[0].params, out), [u.client_id for u in ups])


def trimmed_mean(updates: list[ClientUpdate], beta: int) -> AggregationResult:
    """Mean after dropping the beta largest and beta smallest per coordinate."""
    ups = _sorted_updates(updates)
    n = len(ups)
    if beta < 0 or n <= 2 * beta:
        raise ValueError(f"trimmed_mean needs n > 2*beta (n={n}, beta={beta})")
    mat = np.sort(_stack(ups), axis=0)
    out = mat[beta : n - beta].mean(axis=0)
    return AggregationResult(_rebuild(ups[0].params, out), [u.client_id for u in ups])


def bulyan(updates: list[ClientUpdate], f: int) -> AggregationResult:
    """Iterated Krum selection of n-2f updates, then trimmed mean with beta=f.

    Krum re-scores the shrinking pool each round; the neighbor count is
    clamped to at least one so the last small pools stay well-defined.
    """
    ups = _sorted_updates(updates)
    n = len(ups)
    if n < 4 * f + 3:
        raise ValueError(f"bulyan needs n >= 4f+3 (n={n}, f={f})")
    pool = list(range(n))
    mat = _stack(ups)
    chosen: list[int] = []
    while len(chosen) < n - 2 * f:
        sub = mat[pool]
        k = max(1, min(len(pool) - f - 2, len(pool) - 1))
        scores = _krum_scores(sub, k) if len(pool) > 1 else np.zeros(1)
        winner = pool[int(np.argmin(scores))]
        chosen.append(winner)
        pool.remove(winner)
    sel = np.sort(mat[sorted(chosen)], axis=0)
    out = sel[f : len(chosen) - f].mean(axis=0)
    return AggregationResult(
        _rebuild(ups[0].params, out), [ups[i].client_id for i in sorted(chosen)]
    )


def flare_lite(updates: list[ClientUpdate], arch: Architecture,
               k_neighbors: Optional[int] = None) -> AggregationResult:
    """Trust-score aggregation from pairwise MMD between PLR matrices.

    Each client votes for its k nearest peers by MMD (ties included so that
    identical updates stay symmetric); trust = softmax(vote counts); output
    is the trust-weighted average. The original's server-side fine-tuning on
    raw data is deliberately not modeled.
    """
    ups = _sorted_updates(updates)
    n = len(ups)
    if n < 3:
        raise ValueError(f"flare needs >= 3 clients, got {n}")
    k = ceil(n / 2) if k_neighbors is None else k_neighbors
    k = min(k, n - 1)
    plrs = [extract_plr(u.params, arch) for u in ups]
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = mmd(plrs[i], plrs[j])
    counts = np.zeros(n)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        d = dist[i, others]
        kth = np.sort(d)[k - 1]
        counts[others[d <= kth]] += 1.0
    z = counts - counts.max()
    trust = np.exp(z)
    trust /= trust.sum()
    out = trust @ _stack(ups)
    return AggregationResult(
        _rebuild(ups[0].params, out),
        [u.client_id for u in ups],
        {u.client_id: float(t) for u, t in zip(ups, trust)},
    )


def fedcc(global_params: ModelParams, updates: list[ClientUpdate], arch: Architecture,
          metric: str = "kernel_cka") -> AggregationResult:
    """Cluster clients by PLR similarity to the global model; average the majority.

    Scores (larger = more similar) are split by two-means; the smaller
    cluster is suspect and excluded; the survivors' full parameter sets are
    averaged unweighted — scaling is deliberately avoided.
    """
    ups = _sorted_updates(updates)
    n = len(ups)
    if n < 2:
        raise ValueError(f"fedcc needs >= 2 clients, got {n}")
    global_plr = extract_plr(global_params, arch)
    scores = np.array(
        [similarity_score(metric, global_plr, extract_plr(u.params, arch)) for u in ups]
    )
    assignment = kmeans_2(scores)
    if assignment.suspect_label is None:
        keep = np.arange(n)
    else:
        keep = np.flatnonzero(assignment.labels != assignment.suspect_label)
        assert keep.size >= n - n // 2, "suspect cluster was not the minority"
    assert keep.size > 0, "fedcc excluded every client"
    out = _stack([ups[i] for i in keep]).mean(axis=0)
    return AggregationResult(
        _rebuild(ups[0].params, out),
        [ups[i].client_id for i in keep],
        {u.client_id: float(s) for u, s in zip(ups, scores)},
    )


AGGREGATOR_NAMES = (
    "fedavg", "krum", "mkrum", "coomed", "trimmed_mean", "bulyan", "flare", "fedcc",
)
