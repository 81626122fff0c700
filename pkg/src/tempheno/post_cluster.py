"""Hybrid sub-phenotypes from soft clustering output.

Each subject is represented by its soft memberships plus the ABM severity
indicator; the representations are grouped with PAM K-Medoids and the cluster
count is picked by mean silhouette.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from tempheno.errors import DataError

logger = logging.getLogger(__name__)


def abm(distances: np.ndarray) -> np.ndarray:
    """``1 - cbrt(min_k d_ik / max(d))`` with the max taken over the whole matrix."""
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.size == 0:
        raise DataError(f"expected a non-empty N x K distance matrix, got shape {d.shape}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise DataError("distances must be finite and non-negative")
    dist = d.max()
    if dist == 0:
        raise DataError("all distances are zero; ABM is undefined")
    return 1.0 - np.cbrt(d.min(axis=1) / dist)


def representation(memberships: np.ndarray, abm_values: np.ndarray) -> np.ndarray:
    """Stack memberships and ABM into the (N, K+1) representation."""
    return np.column_stack([memberships, abm_values])


def silhouette_samples(points: np.ndarray, labels: np.ndarray, D: np.ndarray | None = None) -> np.ndarray:
    """Per-point silhouette on Euclidean distances; singletons score 0."""
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise DataError("silhouette needs at least two clusters")
    if D is None:
        D = cdist(points, points)
    onehot = (labels[:, None] == clusters[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = D @ onehot  # (N, C) total distance to each cluster
    own = np.searchsorted(clusters, labels)
    rows = np.arange(labels.size)
    own_size = sizes[own]
    a = np.divide(sums[rows, own], own_size - 1, out=np.zeros(labels.size), where=own_size > 1)
    mean_to = sums / sizes[None, :]
    mean_to[rows, own] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(labels.size), where=denom > 0)
    s[own_size == 1] = 0.0
    return s


def silhouette(points: np.ndarray, labels: np.ndarray, D: np.ndarray | None = None) -> float:
    """Mean silhouette score."""
    return float(np.mean(silhouette_samples(points, labels, D)))


@dataclass
class HybridAssignment:
    labels: np.ndarray  # cluster index per subject, 0..k-1 in medoid order
    medoids: np.ndarray  # subject index of each medoid
    medoid_points: np.ndarray  # (k, K+1)
    cost: float
    silhouette: float
    n_swaps: int = 0

    @property
    def k(self) -> int:
        return int(self.medoids.size)


def _nearest_two(D: np.ndarray, medoids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Dm = D[:, medoids]
    order = np.argsort(Dm, axis=1, kind="stable")
    rows = np.arange(D.shape[0])
    nearest = order[:, 0]
    d1 = Dm[rows, nearest]
    d2 = Dm[rows, order[:, 1]] if medoids.size > 1 else np.full(D.shape[0], np.inf)
    return nearest, d1, d2


def pam_build(D: np.ndarray, k: int) -> np.ndarray:
    """Greedy BUILD: each new medoid is the point that lowers total cost the most."""
    n = D.shape[0]
    first = int(np.argmin(D.sum(axis=0)))
    medoids = [first]
    nearest = D[:, first].copy()
    for _ in range(1, k):
        gain = np.maximum(nearest[:, None] - D, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        best = int(np.argmax(gain))
        medoids.append(best)
        nearest = np.minimum(nearest, D[:, best])
    return np.asarray(medoids, dtype=np.intp)


def pam_swap(D: np.ndarray, medoids: np.ndarray, max_iter: int = 1000) -> tuple[np.ndarray, int]:
    """Apply the best improving (medoid, non-medoid) swap until none improves."""
    medoids = medoids.copy()
    n = D.shape[0]
    swaps = 0
    for _ in range(max_iter):
        nearest, d1, d2 = _nearest_two(D, medoids)
        cost = d1.sum()
        is_medoid = np.zeros(n, dtype=bool)
        is_medoid[medoids] = True
        best_delta, best = 0.0, None
        for j in range(medoids.size):
            lost = nearest == j
            # base distance of each point if medoid j disappears
            base = np.where(lost, d2, d1)
            new_cost = np.minimum(base[:, None], D).sum(axis=0)
            new_cost[is_medoid] = np.inf
            h = int(np.argmin(new_cost))
            delta = new_cost[h] - cost
            if delta < best_delta:
                best_delta, best = delta, (j, h)
        # guard against float noise cycling between equal-cost swaps
        if best is None or best_delta > -1e-12 * max(cost, 1.0):
            break
        medoids[best[0]] = best[1]
        swaps += 1
    return medoids, swaps


def exhaustive_medoids(D: np.ndarray, k: int) -> np.ndarray:
    """Globally optimal medoids by enumeration; first lexicographic set wins ties."""
    n = D.shape[0]
    combos = np.array(list(itertools.combinations(range(n), k)), dtype=np.intp)
    costs = np.concatenate([D[:, chunk].min(axis=2).sum(axis=0)
                            for chunk in np.array_split(combos, max(1, combos.shape[0] // 2048))])
    return combos[int(np.argmin(costs))]


def kmedoids(points: np.ndarray, k: int, seed: int = 0, n_restarts: int = 0,
             D: np.ndarray | None = None, exact_limit: int = 10_000) -> HybridAssignment:
    """PAM K-Medoids on Euclidean distances.

    BUILD + SWAP is deterministic; ``n_restarts`` extra runs start SWAP from
    seeded random medoids and the lowest-cost result wins. SWAP only reaches a
    local optimum, so when ``C(N, k) <= exact_limit`` every medoid set is also
    scored and the global optimum replaces a strictly worse PAM result.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"k must be in [1, N={n}], got {k}")
    if D is None:
        D = cdist(points, points)
    medoids, swaps = pam_swap(D, pam_build(D, k))
    best_cost = D[:, medoids].min(axis=1).sum()
    rng = np.random.default_rng(seed)
    for _ in range(n_restarts):
        start = np.sort(rng.choice(n, size=k, replace=False))
        cand, s = pam_swap(D, start)
        cost = D[:, cand].min(axis=1).sum()
        if cost < best_cost:
            medoids, swaps, best_cost = cand, s, cost
    if math.comb(n, k) <= exact_limit:
        cand = exhaustive_medoids(D, k)
        cost = D[:, cand].min(axis=1).sum()
        if cost < best_cost:
            medoids, best_cost = cand, cost
    labels = np.argmin(D[:, medoids], axis=1)
    score = silhouette(points, labels, D) if k >= 2 and np.unique(labels).size >= 2 else 0.0
    return HybridAssignment(labels, medoids, points[medoids], float(best_cost), score, swaps)


@dataclass
class SweepResult:
    chosen_k: int
    table: list[tuple[int, float]]
    fits: dict[int, HybridAssignment]


def sweep_k(points: np.ndarray, k_range: Sequence[int] = range(2, 21), min_k: int = 4,
            seed: int = 0) -> SweepResult:
    """K-Medoids + silhouette for each k; choose the best-scoring k >= ``min_k``.

    Exact score ties go to the smaller k.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    ks = list(k_range)
    bad = [k for k in ks if not 2 <= k <= n - 1]
    if bad:
        raise DataError(f"k values {bad} outside [2, N-1={n - 1}]")
    D = cdist(points, points)
    fits = {k: kmedoids(points, k, seed=seed, D=D) for k in ks}
    table = [(k, fits[k].silhouette) for k in ks]
    eligible = [(k, s) for k, s in table if k >= min_k]
    if not eligible:
        logger.warning("no k >= %d in sweep; choosing among all", min_k)
        eligible = table
    chosen = max(eligible, key=lambda row: (row[1], -row[0]))[0]
    return SweepResult(chosen, table, fits)


@dataclass
class SummaryRow:
    cluster: int
    size: int
    mean_mu: np.ndarray
    mean_abm: float
    medoid_mu: np.ndarray
    medoid_abm: float
    mortality_pct: float | None = None


def rank_clusters(labels: np.ndarray, abm_values: np.ndarray) -> np.ndarray:
    """Map raw cluster index -> rank (1 = lowest mean ABM, i.e. most severe)."""
    clusters = np.unique(labels)
    means = np.array([abm_values[labels == c].mean() for c in clusters])
    order = clusters[np.argsort(means, kind="stable")]
    mapping = np.zeros(int(clusters.max()) + 1, dtype=np.int64)
    mapping[order] = np.arange(1, order.size + 1)
    return mapping


def rank_and_summarize(assignment: HybridAssignment, points: np.ndarray,
                       outcomes: np.ndarray | None = None) -> tuple[np.ndarray, list[SummaryRow]]:
    """Renumber clusters 1..k by ascending mean ABM and summarize each.

    ``points`` is the (N, K+1) representation (memberships then ABM). Returns the
    ranked label per subject and one summary row per ranked cluster.
    """
    points = np.asarray(points, dtype=float)
    abm_values = points[:, -1]
    mapping = rank_clusters(assignment.labels, abm_values)
    ranked = mapping[assignment.labels]
    rows = []
    for rank in range(1, int(ranked.max()) + 1):
        sel = ranked == rank
        raw = int(np.flatnonzero(mapping == rank)[0])
        med = assignment.medoid_points[raw]
        mort = None
        if outcomes is not None:
            mort = float(100.0 * np.mean(np.asarray(outcomes)[sel]))
        rows.append(SummaryRow(rank, int(sel.sum()), points[sel, :-1].mean(axis=0),
                               float(abm_values[sel].mean()), med[:-1], float(med[-1]), mort))
    return ranked, rows
