"""K-means clustering of standardized series with quality and stability scores.

Includes the dummy-month control construction, window-truncation analysis with
prototype zero-crossings, and rise/decay label agreement. All operations are
deterministic under a fixed seed; replicate and restart seeds are derived per
task so execution order is irrelevant.
"""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._rand import derive_seed
from .homes import NON_MOVER, MoverStatus
from .series import DECAY, RISE, standardize
from .ties import MonthlyCallIndex, PairFilterConfig, StrongPair, check_pair_filters


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,)
    inertia: float
    n_iter: int


@dataclass(frozen=True)
class ClusterQuality:
    k: int
    silhouette: float
    davies_bouldin: float
    jaccard: np.ndarray  # per-cluster bootstrap stability
    jaccard_mean: float


@dataclass(frozen=True)
class ControlSet:
    pairs: list[StrongPair]  # non-mover egos with dummy moving months in .m
    requested_size: int
    shortfall: int


@dataclass(frozen=True)
class WindowClustering:
    window: tuple[int, int]
    t_axis: tuple[int, ...]
    prototypes: np.ndarray  # (k, d) centroid curves
    labels: np.ndarray
    crossings: list[float | None]  # dominant zero-crossing per cluster
    n_constant_excluded: int
    row_indices: np.ndarray  # rows of the input that were clustered


@dataclass(frozen=True)
class AgreementResult:
    fraction: float
    cluster_directions: tuple[str, ...]
    flagged: bool
    n: int


def _pairwise_sq(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (
        (X * X).sum(axis=1)[:, None]
        + (C * C).sum(axis=1)[None, :]
        - 2.0 * (X @ C.T)
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _pairwise_sq(X, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest / total))
        centroids[j] = X[pick]
        closest = np.minimum(closest, _pairwise_sq(X, centroids[j : j + 1]).ravel())
    return centroids


def _lloyd(
    X: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, int]:
    k = centroids.shape[0]
    labels = np.zeros(X.shape[0], dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _pairwise_sq(X, centroids)
        labels = d2.argmin(axis=1)
        # Reseed empty clusters from the farthest points, one per cluster.
        counts = np.bincount(labels, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            point_d2 = d2[np.arange(X.shape[0]), labels].copy()
            for c in empties:
                far = int(point_d2.argmax())
                centroids[c] = X[far]
                point_d2[far] = -1.0
            d2 = _pairwise_sq(X, centroids)
            labels = d2.argmin(axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = X[members].mean(axis=0)
        shift = float(((new_centroids - centroids) ** 2).sum(axis=1).max())
        centroids = new_centroids
        if shift <= tol:
            break
    d2 = _pairwise_sq(X, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(X.shape[0]), labels].sum())
    return centroids, labels, inertia, n_iter


def kmeans(
    X: np.ndarray,
    k: int,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
    seed: int = 0,
) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding, best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not np.isfinite(X).all():
        raise ValueError("kmeans requires finite inputs")
    best: ClusterModel | None = None
    for r in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, "kmeans", r))
        init = _kmeans_pp_init(X, k, rng)
        centroids, labels, inertia, n_iter = _lloyd(X, init, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = ClusterModel(k, centroids, labels, inertia, n_iter)
    assert best is not None
    return best


def silhouette_mean(X: np.ndarray, labels: np.ndarray) -> float:
    """Mean of (b - a) / max(a, b); singleton clusters contribute 0.

    Undefined (NaN) when fewer than two clusters are present.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        return float("nan")
    D = np.sqrt(_pairwise_sq(X, X))
    onehot = (labels[:, None] == clusters[None, :]).astype(float)
    sums = D @ onehot  # (n, n_clusters) total distance to each cluster
    counts = onehot.sum(axis=0)
    own = np.searchsorted(clusters, labels)
    n = X.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        c = own[i]
        if counts[c] <= 1:
            continue  # singleton: silhouette 0
        a = sums[i, c] / (counts[c] - 1)
        b = np.inf
        for j in range(clusters.size):
            if j != c:
                b = min(b, sums[i, j] / counts[j])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def davies_bouldin(X: np.ndarray, labels: np.ndarray) -> float:
    """Mean over clusters of the worst (S_i + S_j) / M_ij ratio.

    Pairs with coincident centroids are skipped with a warning.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise ValueError("davies_bouldin needs at least two non-empty clusters")
    centroids = np.stack([X[labels == c].mean(axis=0) for c in clusters])
    scatter = np.array(
        [
            float(np.sqrt(((X[labels == c] - centroids[i]) ** 2).sum(axis=1)).mean())
            for i, c in enumerate(clusters)
        ]
    )
    M = np.sqrt(_pairwise_sq(centroids, centroids))
    k = clusters.size
    total = 0.0
    for i in range(k):
        worst = 0.0
        for j in range(k):
            if i == j:
                continue
            if M[i, j] == 0.0:
                warnings.warn("coincident centroids; pair skipped in Davies-Bouldin")
                continue
            worst = max(worst, (scatter[i] + scatter[j]) / M[i, j])
        total += worst
    return total / k


def _max_jaccard_per_cluster(
    base_labels: np.ndarray,
    boot_labels: np.ndarray,
    sample_idx: np.ndarray,
    k: int,
) -> np.ndarray:
    """Per original cluster: max Jaccard overlap with any bootstrap cluster,
    computed on the original points present in the bootstrap sample."""
    n = base_labels.shape[0]
    support = np.zeros(n, dtype=bool)
    support[sample_idx] = True
    boot_members = []
    for c in range(k):
        members = np.zeros(n, dtype=bool)
        members[sample_idx[boot_labels == c]] = True
        boot_members.append(members)
    out = np.full(k, np.nan)
    for c in range(k):
        orig = (base_labels == c) & support
        size_orig = int(orig.sum())
        if size_orig == 0:
            continue
        best = 0.0
        for members in boot_members:
            inter = int((orig & members).sum())
            union = size_orig + int(members.sum()) - inter
            if union > 0:
                best = max(best, inter / union)
        out[c] = best
    return out


def jaccard_bootstrap(
    X: np.ndarray,
    k: int,
    n_bootstrap: int = 100,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
    base: ClusterModel | None = None,
) -> np.ndarray:
    """Bootstrap cluster-stability scores: mean maximal Jaccard overlap between
    each original cluster and the clusters refit on resampled rows."""
    X = np.asarray(X, dtype=float)
    if n_bootstrap < 10:
        warnings.warn("fewer than 10 bootstrap replicates: unstable estimate")
    if base is None:
        base = kmeans(X, k, restarts, max_iter, tol, seed=derive_seed(seed, "jb-base"))
    n = X.shape[0]
    totals = np.zeros(k)
    counts = np.zeros(k)
    for b in range(n_bootstrap):
        rng = np.random.default_rng(derive_seed(seed, "jb-sample", b))
        idx = rng.integers(0, n, n)
        model = kmeans(
            X[idx], k, restarts, max_iter, tol, seed=derive_seed(seed, "jb-fit", b)
        )
        scores = _max_jaccard_per_cluster(base.labels, model.labels, idx, k)
        ok = ~np.isnan(scores)
        totals[ok] += scores[ok]
        counts[ok] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)


def select_k(
    X: np.ndarray,
    k_range: Sequence[int] = range(2, 9),
    n_bootstrap: int = 100,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[int, list[ClusterQuality]]:
    """Pick k by majority vote of silhouette (max), Davies-Bouldin (min), and
    mean Jaccard stability (max); ties defer to silhouette's choice."""
    ks = list(k_range)
    qualities: list[ClusterQuality] = []
    for k in ks:
        model = kmeans(X, k, restarts, max_iter, tol, seed=derive_seed(seed, "select", k))
        sil = silhouette_mean(X, model.labels)
        db = davies_bouldin(X, model.labels)
        jac = jaccard_bootstrap(
            X, k, n_bootstrap, seed=derive_seed(seed, "select-jb", k),
            restarts=restarts, max_iter=max_iter, tol=tol, base=model,
        )
        qualities.append(ClusterQuality(k, sil, db, jac, float(np.nanmean(jac))))
    sil_pick = ks[int(np.argmax([q.silhouette for q in qualities]))]
    db_pick = ks[int(np.argmin([q.davies_bouldin for q in qualities]))]
    jac_pick = ks[int(np.argmax([q.jaccard_mean for q in qualities]))]
    votes = [sil_pick, db_pick, jac_pick]
    for candidate in votes:
        if votes.count(candidate) >= 2:
            return candidate, qualities
    return sil_pick, qualities


def draw_dummy_month(
    seed: int, ego: str, months: Sequence[int], weights: Sequence[int]
) -> int:
    """Dummy moving month for a control ego, drawn from the mover histogram."""
    rng = random.Random(derive_seed(seed, "dummy-m", ego))
    return rng.choices(list(months), weights=list(weights))[0]


def make_control(
    index: MonthlyCallIndex,
    statuses: Mapping[str, MoverStatus],
    month_histogram: Mapping[int, int],
    size: int,
    seed: int = 0,
    config: PairFilterConfig = PairFilterConfig(),
) -> ControlSet:
    """Draw non-mover ego/alter pairs with dummy moving months.

    Each non-mover ego receives a dummy month sampled from the mover month
    histogram; the pair must then satisfy the same top-k persistence and
    activity filters relative to that dummy month. Candidate egos are visited
    in seeded random order until ``size`` pairs are collected.
    """
    months = sorted(int(m) for m, c in month_histogram.items() if c > 0)
    weights = [month_histogram[m] for m in months]
    if not months:
        raise ValueError("empty moving-month histogram")
    n_months = index.n_months
    egos = sorted(
        u for u, s in statuses.items()
        if s.status == NON_MOVER and u in index.dataset.user_index
    )
    random.Random(derive_seed(seed, "control-order")).shuffle(egos)
    pairs: list[StrongPair] = []
    for ego in egos:
        if len(pairs) >= size:
            break
        m = draw_dummy_month(seed, ego, months, weights)
        if m - config.window_pre < 1 or m + config.window_post > n_months:
            continue
        first = m - config.persistence_months + 1
        if first < 1:
            continue
        ego_code = index.dataset.user_index[ego]
        candidates: set[int] | None = None
        for month in range(first, m + 1):
            top = index.top_alter_codes(ego_code, month - 1, config.top_k, config.ranking)
            candidates = top if candidates is None else candidates & top
            if not candidates:
                break
        if not candidates:
            continue
        names = index.dataset.users
        for alter in sorted(names[c] for c in candidates):
            if alter == ego:
                continue
            if check_pair_filters(index, statuses, ego, alter, m, config) is None:
                pairs.append(StrongPair(ego, alter, m, statuses[ego], statuses[alter]))
                if len(pairs) >= size:
                    break
    shortfall = max(0, size - len(pairs))
    if shortfall:
        warnings.warn(
            f"control pool exhausted: {len(pairs)} of {size} requested pairs"
        )
    return ControlSet(pairs, size, shortfall)


def zero_crossings(values: np.ndarray, t_axis: Sequence[int]) -> list[tuple[float, float]]:
    """All zero crossings of a piecewise-linear curve as (t, strength) with
    strength = |v_i| + |v_{i+1}| of the bracketing points."""
    out = []
    for i in range(len(values) - 1):
        v0, v1 = float(values[i]), float(values[i + 1])
        if v0 == 0.0 and v1 != 0.0:
            out.append((float(t_axis[i]), abs(v1)))
        elif v0 * v1 < 0.0:
            frac = v0 / (v0 - v1)
            out.append((float(t_axis[i]) + frac * (t_axis[i + 1] - t_axis[i]), abs(v0) + abs(v1)))
    return out


def dominant_crossing(values: np.ndarray, t_axis: Sequence[int]) -> float | None:
    """The sharpest zero crossing of a prototype curve, if any."""
    crossings = zero_crossings(values, t_axis)
    if not crossings:
        return None
    return max(crossings, key=lambda c: c[1])[0]


def truncation_analysis(
    series_matrix: np.ndarray,
    t_axis: Sequence[int],
    windows: Sequence[tuple[int, int]],
    k: int = 2,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
    seed: int = 0,
    min_length: int = 4,
) -> list[WindowClustering]:
    """Re-standardize raw series over each window, cluster with ``k``, and
    locate the prototypes' dominant zero crossings.

    Series that are constant within a window carry no shape and are excluded
    from that window's clustering. Windows shorter than ``min_length`` months
    are skipped with a warning.
    """
    series_matrix = np.asarray(series_matrix, dtype=float)
    t_arr = list(t_axis)
    results: list[WindowClustering] = []
    for window in windows:
        lo, hi = window
        cols = [i for i, t in enumerate(t_arr) if lo <= t <= hi]
        if len(cols) < min_length:
            warnings.warn(f"window {window} shorter than {min_length} months; skipped")
            continue
        sub = series_matrix[:, cols]
        rows = []
        standardized = []
        for i in range(sub.shape[0]):
            s = standardize(sub[i])
            if not s.was_constant:
                rows.append(i)
                standardized.append(s.values)
        if len(rows) < k:
            warnings.warn(f"window {window}: too few non-constant series; skipped")
            continue
        Z = np.stack(standardized)
        model = kmeans(
            Z, k, restarts, max_iter, tol, seed=derive_seed(seed, "window", lo, hi)
        )
        window_t = [t_arr[c] for c in cols]
        crossings = [
            dominant_crossing(model.centroids[c], window_t) for c in range(k)
        ]
        results.append(
            WindowClustering(
                window=(lo, hi),
                t_axis=tuple(window_t),
                prototypes=model.centroids,
                labels=model.labels,
                crossings=crossings,
                n_constant_excluded=sub.shape[0] - len(rows),
                row_indices=np.asarray(rows, dtype=np.int64),
            )
        )
    return results


def classify_prototype(values: np.ndarray, t_axis: Sequence[int]) -> str | None:
    """Rise/decay from the sign pattern: decay is positive before the move and
    negative after; None when the pattern is not clean."""
    t = np.asarray(list(t_axis))
    pre = np.asarray(values)[t < 0]
    post = np.asarray(values)[t > 0]
    if pre.size == 0 or post.size == 0:
        return None
    if pre.mean() > 0 > post.mean():
        return DECAY
    if pre.mean() < 0 < post.mean():
        return RISE
    return None


def label_agreement(
    model: ClusterModel,
    t_axis: Sequence[int],
    directions: Sequence[str],
) -> AgreementResult:
    """Fraction of pairs whose k=2 cluster label matches the actual direction.

    Clusters are identified as rise/decay by their prototype sign pattern;
    prototypes without a clean pattern fall back to the post-move mean sign
    and the result is flagged.
    """
    if model.k != 2:
        raise ValueError("label agreement is defined for k=2 models")
    assigned = [classify_prototype(model.centroids[c], t_axis) for c in range(2)]
    flagged = False
    if assigned[0] is None or assigned[1] is None or assigned[0] == assigned[1]:
        flagged = True
        t = np.asarray(list(t_axis))
        post_means = [float(model.centroids[c][t > 0].mean()) for c in range(2)]
        order = int(np.argmin(post_means))
        assigned = [RISE, RISE]
        assigned[order] = DECAY
    mapped = [assigned[label] for label in model.labels]
    matches = sum(1 for got, want in zip(mapped, directions) if got == want)
    return AgreementResult(
        fraction=matches / len(directions) if directions else float("nan"),
        cluster_directions=tuple(assigned),
        flagged=flagged,
        n=len(directions),
    )


def ward_labels(X: np.ndarray, k: int) -> np.ndarray:
    """Agglomerative Ward clustering cut at ``k`` clusters.

    Non-default verification mode for cross-method agreement with k-means;
    uses the Lance-Williams update on a dense distance matrix, so it is only
    suitable for moderate n.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    D = _pairwise_sq(X, X)  # Ward works on squared Euclidean merge costs
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    members: list[list[int]] = [[i] for i in range(n)]
    cost = D.copy()
    np.fill_diagonal(cost, np.inf)
    cost[:] = cost * 0.5  # initial Ward cost between singletons: ||a-b||^2 / 2
    for _ in range(n - k):
        masked = np.where(active[:, None] & active[None, :], cost, np.inf)
        np.fill_diagonal(masked, np.inf)
        i, j = np.unravel_index(int(masked.argmin()), masked.shape)
        if j < i:
            i, j = j, i
        si, sj = sizes[i], sizes[j]
        # Lance-Williams for Ward: cost(new, h).
        for h in range(n):
            if not active[h] or h in (i, j):
                continue
            sh = sizes[h]
            new = (
                (si + sh) * cost[i, h] + (sj + sh) * cost[j, h] - sh * cost[i, j]
            ) / (si + sj + sh)
            cost[i, h] = cost[h, i] = new
        sizes[i] = si + sj
        members[i] = members[i] + members[j]
        active[j] = False
    labels = np.empty(n, dtype=np.int64)
    next_label = 0
    for idx in range(n):
        if active[idx]:
            for row in members[idx]:
                labels[row] = next_label
            next_label += 1
    return labels


def cross_method_agreement(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Best label-permutation agreement between two 2-cluster labelings."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    direct = float((a == b).mean())
    return max(direct, 1.0 - direct)
