"""Two-step temporal clustering of cases.

Step 1 clusters each daily feature's 42-day series with k-means, choosing k
by mean silhouette.  Step 2 clusters cases on their vector of per-feature
labels with k-modes (Cao density initialization), choosing K at the largest
bend of the cost curve.  ``profile_clusters`` summarizes the case clusters.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .data import HORIZON, N_SERIES, SERIES_FEATURES, CaseRecord
from .numcore import Rng

log = logging.getLogger(__name__)

LOW_SEPARATION = 0.25  # mean silhouette below this: no substantial structure


class DegenerateError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: list[float]  # per Lloyd iteration of the kept restart


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[gen.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = gen.integers(n)
        else:
            idx = gen.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int):
    trace = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = d.argmin(1)
        trace.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(centers.shape[0]):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
            else:
                # re-seed an empty cluster at the worst-served point
                far = d[np.arange(len(x)), labels].argmax()
                centers[j] = x[far]
    d = _sq_dists(x, centers)
    labels = d.argmin(1)
    inertia = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, inertia, trace


def kmeans_series(m, k: int, rng: Rng, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts by inertia."""
    x = np.asarray(m, dtype=np.float64)
    if k < 2:
        raise UsageError(f"k must be at least 2, got {k}")
    if k > x.shape[0]:
        raise UsageError(f"k={k} exceeds the {x.shape[0]} rows")
    if k > len(np.unique(x, axis=0)):
        raise DegenerateError(f"k={k} exceeds the number of distinct rows")
    best = None
    for r in range(n_init):
        gen = rng.split(r).gen
        res = _lloyd(x, _kmeans_pp(x, k, gen), max_iter)
        if best is None or res[2] < best[2]:
            best = res
    labels, centers, inertia, trace = best
    return KMeansResult(labels, centers, inertia, trace)


def silhouette_score(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette (b - a) / max(a, b); members of singleton clusters score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        return 0.0
    dist = np.sqrt(_sq_dists(x, x))
    counts = np.bincount(inv)
    sums = np.stack([dist[:, inv == j].sum(1) for j in range(len(uniq))], axis=1)  # (n, K)
    own = counts[inv]
    a = sums[np.arange(len(x)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(len(x)), inv] = np.inf
    b = mean_other.min(1)
    s = np.where(own > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


@dataclass
class KSelection:
    k: int
    scores: dict[int, float]
    warning: str | None = None


def silhouette_select_k(m, k_range: Sequence[int], rng: Rng, sample_size: int = 2000, n_init: int = 10) -> KSelection:
    """k in ``k_range`` maximizing mean silhouette (on a seeded subsample if large)."""
    x = np.asarray(m, dtype=np.float64)
    ks = list(k_range)
    if not ks or min(ks) < 2 or max(ks) > x.shape[0] - 1:
        raise UsageError(f"k range must lie within [2, {x.shape[0] - 1}], got {ks}")
    scores = {}
    for k in ks:
        try:
            res = kmeans_series(x, k, rng.split(k), n_init=n_init)
        except DegenerateError:
            scores[k] = -1.0
            continue
        idx = np.arange(len(x))
        if len(x) > sample_size:
            idx = rng.split(k, 0x51).gen.choice(len(x), sample_size, replace=False)
        scores[k] = silhouette_score(x[idx], res.labels[idx])
    k_best = max(ks, key=lambda k: (scores[k], -k))
    warning = None
    if scores[k_best] < LOW_SEPARATION:
        warning = f"low separation: best mean silhouette {scores[k_best]:.3f} at k={k_best}"
        log.warning(warning)
    return KSelection(k_best, scores, warning)


# ---------------------------------------------------------------- k-modes


@dataclass
class KModesResult:
    labels: np.ndarray
    centers: np.ndarray
    cost: float
    cost_trace: list[float]


def _hamming(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (x[:, None, :] != centers[None, :, :]).sum(-1)


def _cao_init(x: np.ndarray, K: int) -> np.ndarray:
    n, m = x.shape
    density = np.zeros(n)
    for j in range(m):
        _, inv, counts = np.unique(x[:, j], return_inverse=True, return_counts=True)
        density += counts[inv]
    density /= n * m
    centers = [x[density.argmax()]]
    for _ in range(1, K):
        d = _hamming(x, np.array(centers)).min(1)
        centers.append(x[(d * density).argmax()])
    return np.array(centers)


def _column_modes(x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[1], dtype=x.dtype)
    for j in range(x.shape[1]):
        vals, counts = np.unique(x[:, j], return_counts=True)
        out[j] = vals[counts.argmax()]  # ties go to the smallest value
    return out


def kmodes_cases(labels, K: int, rng: Rng | None = None, init: str = "cao", max_iter: int = 100) -> KModesResult:
    """k-modes on categorical rows with simple-matching dissimilarity.

    ``init='cao'`` is deterministic; ``init='random'`` draws distinct rows from ``rng``.
    """
    x = np.asarray(labels)
    if K < 2:
        raise UsageError(f"K must be at least 2, got {K}")
    distinct = np.unique(x, axis=0)
    if K > len(distinct):
        raise DegenerateError(f"K={K} exceeds the {len(distinct)} distinct label vectors")
    if init == "cao":
        centers = _cao_init(x, K)
    elif init == "random":
        gen = (rng or Rng(0)).gen
        centers = distinct[gen.choice(len(distinct), K, replace=False)].copy()
    else:
        raise UsageError(f"unknown init {init!r}")
    assign = None
    trace = []
    for _ in range(max_iter):
        d = _hamming(x, centers)
        new = d.argmin(1)
        trace.append(float(d[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(K):
            members = x[assign == j]
            if len(members):
                centers[j] = _column_modes(members)
        trace.append(float(_hamming(x, centers)[np.arange(len(x)), assign].sum()))
    cost = float(_hamming(x, centers)[np.arange(len(x)), assign].sum())
    return KModesResult(assign, centers, cost, trace)


@dataclass
class ElbowSelection:
    K: int
    costs: dict[int, float]
    warning: str | None = None


def elbow_from_costs(costs: dict[int, float], flat_tol: float = 1e-3) -> ElbowSelection:
    """K with the largest discrete second difference of the cost curve."""
    ks = sorted(costs)
    if len(ks) < 3:
        raise UsageError("elbow detection needs at least three K values")
    c = np.array([costs[k] for k in ks], dtype=np.float64)
    bend = c[:-2] - 2.0 * c[1:-1] + c[2:]
    span = max(c.max() - c.min(), 1e-12)
    if bend.max() <= flat_tol * span:
        msg = "no elbow: cost curve has no positive curvature; returning the smallest K"
        log.warning(msg)
        return ElbowSelection(ks[0], dict(costs), msg)
    return ElbowSelection(ks[1 + int(bend.argmax())], dict(costs))


def elbow_select_K(labels, K_range: Sequence[int], rng: Rng | None = None) -> ElbowSelection:
    x = np.asarray(labels)
    Ks = sorted(K_range)
    if len(Ks) < 3:
        raise UsageError("K range needs at least three values")
    n_distinct = len(np.unique(x, axis=0))
    costs = {}
    for K in Ks:
        if K > n_distinct:
            costs[K] = 0.0  # every distinct vector is its own mode
        else:
            costs[K] = kmodes_cases(x, K, rng).cost
    return elbow_from_costs(costs)


# ---------------------------------------------------------------- pipeline


@dataclass
class ClusterAssignment:
    case_ids: list[str]
    feature_labels: np.ndarray  # (n, 8)
    case_labels: np.ndarray  # (n,)
    feature_centers: list[np.ndarray]  # per feature (k_j, 42)
    feature_k: list[int]
    case_centers: np.ndarray  # (K, 8)
    K: int
    silhouette: list[dict[int, float]] = field(default_factory=list)
    elbow_costs: dict[int, float] = field(default_factory=dict)


def feature_matrix(cases: Sequence[CaseRecord], j: int, zscore: bool = False) -> np.ndarray:
    x = np.stack([c.padded_series(HORIZON)[j] for c in cases])
    if zscore:
        x = (x - x.mean()) / max(x.std(), 1e-12)
    return x


def cluster_cases(
    cases: Sequence[CaseRecord],
    k_range: Sequence[int] = range(2, 9),
    K_range: Sequence[int] = range(2, 9),
    seed: int = 0,
    zscore: bool = False,
    sample_size: int = 2000,
) -> ClusterAssignment:
    if len(cases) < max(max(k_range), max(K_range)) + 1:
        raise UsageError(f"{len(cases)} cases are too few for k range {list(k_range)} / K range {list(K_range)}")
    root = Rng(seed)
    labels = np.empty((len(cases), N_SERIES), dtype=np.int64)
    centers, ks, sils = [], [], []
    for j in range(N_SERIES):
        x = feature_matrix(cases, j, zscore)
        n_distinct = len(np.unique(x, axis=0))
        feasible = [k for k in k_range if k <= min(n_distinct, len(x) - 1)]
        if len(feasible) == 0:
            raise UsageError(f"feature {SERIES_FEATURES[j]} has too few distinct series to cluster")
        sel = silhouette_select_k(x, feasible, root.split(j), sample_size)
        res = kmeans_series(x, sel.k, root.split(j).split(sel.k))
        labels[:, j] = res.labels
        centers.append(res.centers)
        ks.append(sel.k)
        sils.append(sel.scores)
        log.info("feature %s: k=%d", SERIES_FEATURES[j], sel.k)
    elbow = elbow_select_K(labels, K_range)
    final = kmodes_cases(labels, elbow.K)
    return ClusterAssignment(
        [c.case_id for c in cases], labels, final.labels, centers, ks, final.centers, elbow.K, sils, elbow.costs
    )


def profile_clusters(
    case_labels: Sequence[int], cases: Sequence[CaseRecord], n_clusters: int | None = None
) -> list[dict]:
    """Per-cluster means of summed daily features and selected static attributes."""
    case_labels = np.asarray(case_labels)
    if len(case_labels) != len(cases):
        raise UsageError("assignment does not cover every case")
    K = n_clusters if n_clusters is not None else int(case_labels.max()) + 1
    totals = np.stack([c.series.sum(1) for c in cases])
    rows = []
    for k in range(K):
        idx = np.nonzero(case_labels == k)[0]
        if idx.size == 0:
            log.warning("cluster %d is empty; omitted from the profile", k)
            continue
        members = [cases[i] for i in idx]
        row = {"cluster": k, "n_cases": int(idx.size), "share": idx.size / len(cases)}
        for j, name in enumerate(SERIES_FEATURES):
            row[name] = float(totals[idx, j].mean())
        row["age"] = float(np.mean([c.static.age for c in members]))
        row["pct_female"] = 100.0 * float(np.mean([c.static.is_female for c in members]))
        row["target_amount"] = float(np.mean([c.static.target_amount for c in members]))
        row["content_length"] = float(np.mean([c.static.content_length for c in members]))
        row["title_length"] = float(np.mean([c.static.title_length for c in members]))
        row["fulfillment"] = 100.0 * float(np.mean([c.total_donations / c.static.target_amount for c in members]))
        rows.append(row)
    return rows


def adjusted_rand_index(a, b) -> float:
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    comb = lambda x: x * (x - 1) / 2.0
    index = comb(table).sum()
    rows, cols = comb(table.sum(1)).sum(), comb(table.sum(0)).sum()
    total = comb(float(len(a)))
    expected = rows * cols / total
    max_index = 0.5 * (rows + cols)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
