"""K-means, quality indices, bootstrap stability, control set, truncation."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from _support import make_dataset, weekday_stamp
from cdrmove.clustering import (
    _max_jaccard_per_cluster,
    cross_method_agreement,
    davies_bouldin,
    dominant_crossing,
    draw_dummy_month,
    jaccard_bootstrap,
    kmeans,
    label_agreement,
    make_control,
    select_k,
    silhouette_mean,
    truncation_analysis,
    ward_labels,
)
from cdrmove.homes import classify_all, compute_trajectories
from cdrmove.series import DECAY, RISE, standardize
from cdrmove.ties import MonthlyCallIndex

TOY_X = np.array([[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [4.0, 1.0]])
TOY_LABELS = np.array([0, 0, 1, 1])


def blobs(n_per=30, centers=((0.0, 0.0), (8.0, 8.0)), spread=0.4, seed=1):
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for i, c in enumerate(centers):
        points.append(rng.normal(c, spread, size=(n_per, len(c))))
        labels += [i] * n_per
    return np.vstack(points), np.array(labels)


class TestKmeans:
    def test_1d_toy_matches_enumeration_oracle(self):
        X = np.array([0.9, 1.1, 3.9, 4.1])
        # Oracle: enumerate every 2-labeling with both clusters non-empty.
        best = math.inf
        for assignment in itertools.product([0, 1], repeat=4):
            if len(set(assignment)) < 2:
                continue
            inertia = 0.0
            for c in (0, 1):
                members = X[[a == c for a in assignment]]
                inertia += float(((members - members.mean()) ** 2).sum())
            best = min(best, inertia)
        assert best == pytest.approx(0.04)
        model = kmeans(X, 2, seed=0)
        assert model.inertia == pytest.approx(best, abs=1e-12)
        assert sorted(model.centroids.ravel()) == pytest.approx([1.0, 4.0])

    def test_k1_global_mean(self):
        X = np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]])
        model = kmeans(X, 1, seed=0)
        assert np.allclose(model.centroids[0], X.mean(axis=0))
        assert (model.labels == 0).all()

    def test_k_equals_n_zero_inertia(self):
        X = np.array([[0.0], [1.0], [2.0], [5.0]])
        model = kmeans(X, 4, seed=0)
        assert model.inertia == pytest.approx(0.0, abs=1e-12)

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)

    def test_final_labels_are_fixed_point(self):
        X, _ = blobs(seed=3)
        model = kmeans(X, 2, seed=4)
        d2 = ((X[:, None, :] - model.centroids[None]) ** 2).sum(axis=2)
        assert (d2.argmin(axis=1) == model.labels).all()
        for c in range(2):
            assert np.allclose(
                model.centroids[c], X[model.labels == c].mean(axis=0), atol=1e-9
            )

    def test_deterministic_under_seed(self):
        X, _ = blobs(seed=5)
        a = kmeans(X, 3, seed=11)
        b = kmeans(X, 3, seed=11)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.centroids, b.centroids)

    def test_inertia_nonincreasing_over_iterations(self):
        # With one restart and a fixed seed, capping the iteration count
        # exposes the Lloyd trajectory: inertia must never increase.
        rng = np.random.default_rng(50)
        X = rng.normal(size=(80, 4))
        inertias = [
            kmeans(X, 4, restarts=1, max_iter=cap, seed=51).inertia
            for cap in range(1, 12)
        ]
        for earlier, later in zip(inertias, inertias[1:]):
            assert later <= earlier + 1e-9


class TestSilhouette:
    def test_hand_computed_toy(self):
        # a = 1, b = (4 + sqrt(17)) / 2 for every point by symmetry.
        assert silhouette_mean(TOY_X, TOY_LABELS) == pytest.approx(0.7538, abs=1e-3)

    def test_coincident_clusters_nonpositive(self):
        X = np.zeros((4, 2))
        assert silhouette_mean(X, np.array([0, 1, 0, 1])) <= 0.0

    def test_grows_with_separation(self):
        scores = []
        for gap in (2.0, 6.0, 20.0):
            X, labels = blobs(centers=((0.0, 0.0), (gap, 0.0)), seed=6)
            scores.append(silhouette_mean(X, labels))
        assert scores[0] < scores[1] < scores[2]
        assert scores[-1] > 0.95

    def test_single_cluster_undefined(self):
        assert math.isnan(silhouette_mean(TOY_X, np.zeros(4, dtype=int)))

    def test_against_sklearn_oracle(self):
        from sklearn.metrics import silhouette_score

        rng = np.random.default_rng(7)
        for _ in range(20):
            X = rng.normal(size=(40, 3))
            labels = rng.integers(0, 3, 40)
            if len(np.unique(labels)) < 2:
                continue
            assert silhouette_mean(X, labels) == pytest.approx(
                silhouette_score(X, labels), abs=1e-8
            )

    def test_translation_rotation_invariance(self):
        X, labels = blobs(seed=8)
        rng = np.random.default_rng(9)
        Q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        moved = X @ Q + np.array([13.0, -7.0])
        assert silhouette_mean(moved, labels) == pytest.approx(
            silhouette_mean(X, labels), abs=1e-9
        )


class TestDaviesBouldin:
    def test_hand_computed_toy(self):
        assert davies_bouldin(TOY_X, TOY_LABELS) == pytest.approx(0.25, abs=1e-6)

    def test_decreases_with_separation(self):
        values = []
        for gap in (2.0, 6.0, 20.0):
            X, labels = blobs(centers=((0.0, 0.0), (gap, 0.0)), seed=10)
            values.append(davies_bouldin(X, labels))
        assert values[0] > values[1] > values[2]

    def test_zero_variance_clusters(self):
        X = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
        assert davies_bouldin(X, np.array([0, 0, 1, 1])) == 0.0

    def test_against_sklearn_oracle(self):
        from sklearn.metrics import davies_bouldin_score

        rng = np.random.default_rng(11)
        for _ in range(20):
            X = rng.normal(size=(40, 3))
            labels = rng.integers(0, 3, 40)
            if len(np.unique(labels)) < 2:
                continue
            assert davies_bouldin(X, labels) == pytest.approx(
                davies_bouldin_score(X, labels), abs=1e-8
            )

    def test_opposite_response_to_silhouette(self):
        near, labels = blobs(centers=((0.0, 0.0), (3.0, 0.0)), seed=12)
        far, _ = blobs(centers=((0.0, 0.0), (30.0, 0.0)), seed=12)
        assert silhouette_mean(far, labels) > silhouette_mean(near, labels)
        assert davies_bouldin(far, labels) < davies_bouldin(near, labels)


class TestJaccardBootstrap:
    def test_identity_resample_scores_one(self):
        X, _ = blobs(seed=13)
        base = kmeans(X, 2, seed=14)
        refit = kmeans(X, 2, seed=15)
        scores = _max_jaccard_per_cluster(
            base.labels, refit.labels, np.arange(X.shape[0]), 2
        )
        assert np.allclose(scores, 1.0)

    def test_separated_blobs_are_stable(self):
        X, _ = blobs(seed=16)
        scores = jaccard_bootstrap(X, 2, n_bootstrap=30, seed=17, restarts=4)
        assert (scores >= 0.95).all()

    def test_uniform_cloud_less_stable_than_blobs(self):
        rng = np.random.default_rng(18)
        cloud = rng.uniform(0, 1, size=(60, 2))
        blob_X, _ = blobs(seed=19)
        cloud_scores = jaccard_bootstrap(cloud, 2, n_bootstrap=30, seed=20, restarts=4)
        blob_scores = jaccard_bootstrap(blob_X, 2, n_bootstrap=30, seed=20, restarts=4)
        assert cloud_scores.mean() < blob_scores.mean()

    def test_scores_within_unit_interval(self):
        X, _ = blobs(seed=21)
        scores = jaccard_bootstrap(X, 3, n_bootstrap=15, seed=22, restarts=3)
        assert ((scores >= 0.0) & (scores <= 1.0)).all()

    def test_few_replicates_warns(self):
        X, _ = blobs(n_per=10, seed=23)
        with pytest.warns(UserWarning):
            jaccard_bootstrap(X, 2, n_bootstrap=5, seed=24, restarts=2)


def planted_series(n, delta=0.5, noise=0.3, seed=0, t_axis=range(-4, 5)):
    """Standardized rise/decay series with the shift between t=0 and t=1."""
    rng = np.random.default_rng(seed)
    rows, truths = [], []
    for i in range(n):
        decay = i % 2 == 0
        base = np.array([1.0 + delta if decay else 1.0 - delta] * 5 +
                        [1.0 - delta if decay else 1.0 + delta] * 4)
        values = base + rng.normal(0, noise, 9)
        rows.append(standardize(values).values)
        truths.append(DECAY if decay else RISE)
    return np.stack(rows), truths


class TestSelectK:
    def test_two_planted_regimes(self):
        Z, _ = planted_series(80, seed=25)
        k_star, qualities = select_k(
            Z, k_range=range(2, 6), n_bootstrap=20, restarts=4, seed=26
        )
        assert k_star == 2
        assert len(qualities) == 4

    def test_three_separated_blobs(self):
        X, _ = blobs(n_per=25, centers=((0, 0), (10, 0), (0, 10)), seed=27)
        k_star, _ = select_k(X, k_range=range(2, 6), n_bootstrap=20, restarts=4, seed=28)
        assert k_star == 3

    def test_tie_rule_deterministic(self):
        rng = np.random.default_rng(29)
        X = rng.normal(size=(50, 2))
        a = select_k(X, k_range=range(2, 5), n_bootstrap=15, restarts=3, seed=30)
        b = select_k(X, k_range=range(2, 5), n_bootstrap=15, restarts=3, seed=30)
        assert a[0] == b[0]


class TestTruncation:
    def test_mover_crossings_stay_near_move(self):
        rng = np.random.default_rng(31)
        raw = []
        for i in range(60):
            decay = i % 2 == 0
            base = [12.0 if decay else 6.0] * 5 + [6.0 if decay else 12.0] * 4
            raw.append(np.array(base) + rng.normal(0, 1.0, 9))
        raw = np.stack(raw)
        results = truncation_analysis(
            raw, range(-4, 5), [(-4, 4), (-4, 2)], seed=32, restarts=4
        )
        assert len(results) == 2
        for res in results:
            for crossing in res.crossings:
                assert crossing is not None
                assert 0.0 <= crossing <= 1.0

    def test_short_window_skipped(self):
        raw = np.tile([1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0], (10, 1))
        with pytest.warns(UserWarning):
            results = truncation_analysis(raw, range(-4, 5), [(0, 2)], seed=33)
        assert results == []

    def test_constant_series_excluded(self):
        rng = np.random.default_rng(34)
        raw = rng.normal(5.0, 1.0, size=(20, 9))
        raw[3] = 7.0
        raw[11] = 2.0
        results = truncation_analysis(raw, range(-4, 5), [(-4, 4)], seed=35, restarts=3)
        assert results[0].n_constant_excluded == 2
        assert 3 not in results[0].row_indices and 11 not in results[0].row_indices

    def test_dominant_crossing_interpolates(self):
        values = np.array([2.0, 1.0, -1.0, -2.0])
        assert dominant_crossing(values, [0, 1, 2, 3]) == pytest.approx(1.5)
        assert dominant_crossing(np.array([1.0, 2.0, 3.0]), [0, 1, 2]) is None


class TestLabelAgreement:
    def test_strong_regimes_agree(self):
        Z, truths = planted_series(100, seed=36)
        model = kmeans(Z, 2, seed=37)
        result = label_agreement(model, range(-4, 5), truths)
        assert result.fraction >= 0.95
        assert not result.flagged
        assert set(result.cluster_directions) == {RISE, DECAY}

    def test_random_labels_agree_half(self):
        rng = np.random.default_rng(38)
        Z, truths = planted_series(400, seed=39)
        shuffled = list(truths)
        rng.shuffle(shuffled)
        model = kmeans(Z, 2, seed=40)
        result = label_agreement(model, range(-4, 5), shuffled)
        assert abs(result.fraction - 0.5) < 0.12

    def test_single_pair(self):
        Z, truths = planted_series(2, noise=0.01, seed=41)
        model = kmeans(Z, 2, seed=42)
        result = label_agreement(model, range(-4, 5), truths)
        assert result.fraction == 1.0

    def test_requires_k2(self):
        Z, truths = planted_series(30, seed=43)
        model = kmeans(Z, 3, seed=44)
        with pytest.raises(ValueError):
            label_agreement(model, range(-4, 5), truths)


class TestWard:
    def test_matches_kmeans_on_blobs(self):
        X, _ = blobs(n_per=20, seed=45)
        km = kmeans(X, 2, seed=46)
        ward = ward_labels(X, 2)
        assert cross_method_agreement(km.labels, ward) == 1.0

    def test_against_scipy_oracle(self):
        from scipy.cluster.hierarchy import fcluster, linkage

        rng = np.random.default_rng(47)
        X = rng.normal(size=(25, 3))
        mine = ward_labels(X, 3)
        ref = fcluster(linkage(X, method="ward"), 3, criterion="maxclust")
        # Same partition up to label names: compare co-membership matrices.
        co_mine = mine[:, None] == mine[None, :]
        co_ref = ref[:, None] == ref[None, :]
        assert (co_mine == co_ref).all()


def control_world(n_egos=6):
    rows = []
    profiles = {}
    towers = ["TA1", "TA2", "TA3"]
    for i in range(n_egos):
        ego, fav, filler = f"E{i}", f"F{i}", f"G{i}"
        profiles[ego] = (30 + i, "F" if i % 2 else "M")
        profiles[fav] = (28 + i, "M")
        profiles[filler] = (55, "F")
        for month in range(1, 25):
            mo0 = month - 1
            rows.append((ego, fav, "sms", weekday_stamp(mo0, 0, 7), "out", towers[i % 3]))
            rows.append((fav, ego, "sms", weekday_stamp(mo0, 1, 7), "out", towers[(i + 1) % 3]))
            rows.append((filler, fav, "sms", weekday_stamp(mo0, 2, 7), "out", towers[(i + 2) % 3]))
            for rep in range(4):
                rows.append((ego, fav, "call", weekday_stamp(mo0, 3, 9 + rep), "out", towers[i % 3]))
            rows.append((ego, filler, "call", weekday_stamp(mo0, 4, 9), "out", towers[i % 3]))
    ds = make_dataset(rows, profiles=profiles)
    index = MonthlyCallIndex(ds)
    statuses = classify_all(compute_trajectories(ds, seed=2))
    return index, statuses


class TestMakeControl:
    def test_degenerate_histogram(self):
        index, statuses = control_world()
        control = make_control(index, statuses, {10: 7}, size=4, seed=1)
        assert len(control.pairs) == 4
        assert all(p.m == 10 for p in control.pairs)
        assert control.shortfall == 0
        assert all(p.ego_status.status == "non_mover" for p in control.pairs)
        assert all(p.alter_status.status == "non_mover" for p in control.pairs)

    def test_insufficient_pool_warns(self):
        index, statuses = control_world(n_egos=2)
        with pytest.warns(UserWarning):
            control = make_control(index, statuses, {10: 1}, size=50, seed=1)
        assert control.shortfall > 0
        assert len(control.pairs) + control.shortfall == 50

    def test_dummy_month_draws_match_multinomial_band(self):
        months = list(range(5, 21))
        weights = [1] * len(months)
        draws = [
            draw_dummy_month(9, f"user-{i}", months, weights) for i in range(4000)
        ]
        counts = {m: draws.count(m) for m in months}
        # 99% band for Binomial(4000, 1/16) per bin: mean 250, sd ~15.3.
        for m in months:
            assert abs(counts[m] - 250) < 4 * 15.3

    def test_deterministic(self):
        index, statuses = control_world()
        a = make_control(index, statuses, {8: 1, 12: 2}, size=5, seed=3)
        b = make_control(index, statuses, {8: 1, 12: 2}, size=5, seed=3)
        assert [(p.ego, p.alter, p.m) for p in a.pairs] == [
            (p.ego, p.alter, p.m) for p in b.pairs
        ]
