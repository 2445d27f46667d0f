"""Acceptance suite: one test per criterion, at the stated tolerances.

Runs latency-bounded synthetic-oracle checks plus the statistical-kernel
toys. Criteria 3-5 share one session-scoped pipeline run at the 2,000-pair
scale; criterion 11 runs only when a real dataset is supplied via the
CDRMOVE_REAL_DATA environment variable (directory with cdr.csv,
demographics.csv, towers.csv).
"""

from __future__ import annotations

import csv
import filecmp
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from cdrmove.config import load_config
from cdrmove.pipeline import Runner
from cdrmove.synth import load_ground_truth, score_pipeline

CLUSTER_SEED = 424242
MOVER_SEED = 20080101


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    return rows[0], rows[1:]


@pytest.fixture(scope="session")
def cluster_run(tmp_path_factory):
    """Criterion 3 configuration: 2,000 planted mover pairs, 2,000 control
    pairs, delta=0.5, median pair rate 12, default noise parameters."""
    out = tmp_path_factory.mktemp("accept_cluster")
    config = load_config(
        None,
        {
            "output_dir": str(out),
            "seed": CLUSTER_SEED,
            "synth": {
                "n_users": 8000,
                "mover_fraction": 0.25,  # 2000 movers, one planted alter each
                "control_ties": 2000,
                "pair_rate_median": 12.0,
                "regime_delta": 0.5,
            },
        },
    )
    runner = Runner(config)
    started = time.monotonic()
    for stage in ("synth", "ingest", "homes", "movers", "ties", "series", "cluster"):
        runner.run(stage)
    elapsed = time.monotonic() - started
    runner.run("control")
    return {"out": out, "runner": runner, "cluster_elapsed": elapsed}


def block_gap(path: Path) -> float:
    """Mean within-block minus cross-block Spearman rho, computed directly
    from the emitted month-correlation matrix (diagonal and t=0 excluded)."""
    header, rows = read_rows(path)
    t_axis = [int(v) for v in header[1:]]
    within, cross = [], []
    for i, row in enumerate(rows):
        for j, cell in enumerate(row[1:]):
            s, t = t_axis[i], t_axis[j]
            if i == j or s == 0 or t == 0 or cell == "":
                continue
            (within if (s < 0) == (t < 0) else cross).append(float(cell))
    return float(np.mean(within) - np.mean(cross))


@pytest.mark.criterion(1, "mover-detection oracle on 5,000 noiseless users")
def test_c01_mover_detection(tmp_path):
    config = load_config(
        None,
        {
            "output_dir": str(tmp_path),
            "seed": MOVER_SEED,
            "synth": {"n_users": 5000, "mover_fraction": 0.013, "control_ties": 0},
        },
    )
    runner = Runner(config)
    started = time.monotonic()
    for stage in ("synth", "ingest", "homes", "movers"):
        runner.run(stage)
    elapsed = time.monotonic() - started
    truth = load_ground_truth(tmp_path / "synth" / "ground_truth.json")
    report = score_pipeline(truth, statuses=runner.statuses())
    assert report["n_true_movers"] == 65
    assert report["mover_precision"] == 1.0
    assert report["mover_recall"] == 1.0
    assert report["month_exact_fraction"] == 1.0
    assert elapsed < 120.0, f"mover pipeline took {elapsed:.1f}s (budget 120s)"


@pytest.mark.criterion(2, "RLE classification equals exhaustive enumeration on 3^6 toys")
def test_c02_rle_exhaustive():
    from cdrmove.homes import classify_trajectory

    def oracle(months):
        n = len(months)
        if all(v is not None and v == months[0] for v in months):
            return ("non_mover", months[0], None, None)
        for m in range(1, n):
            first, second = months[0], months[m]
            if first is None or second is None or first == second:
                continue
            if all(v == first for v in months[:m]) and all(
                v == second for v in months[m:]
            ):
                return ("mover", first, second, m)
        return ("unknown", None, None, None)

    checked = 0
    for months in itertools.product(["A", "B", None], repeat=6):
        got = classify_trajectory(months)
        kind, first, second, m = oracle(months)
        assert got.status == kind, months
        if kind == "mover":
            assert (got.province_from, got.province_to, got.move_month) == (
                first,
                second,
                m,
            ), months
        checked += 1
    assert checked == 3**6


@pytest.mark.criterion(3, "cluster recovery: k*=2 by all indices, accuracy >= 0.95")
def test_c03_cluster_recovery(cluster_run):
    out = cluster_run["out"]
    # All three indices vote k=2, for counts and fractions alike.
    _, rows = read_rows(out / "cluster" / "quality.csv")
    for quantity in ("count", "fraction"):
        sub = [r for r in rows if r[0] == quantity]
        assert sub, quantity
        by_sil = max(sub, key=lambda r: float(r[2]))
        by_db = min(sub, key=lambda r: float(r[3]))
        by_jac = max(sub, key=lambda r: float(r[4]))
        assert int(by_sil[1]) == 2, f"{quantity} silhouette picked k={by_sil[1]}"
        assert int(by_db[1]) == 2, f"{quantity} Davies-Bouldin picked k={by_db[1]}"
        assert int(by_jac[1]) == 2, f"{quantity} Jaccard picked k={by_jac[1]}"

    agreement = json.loads((out / "cluster" / "agreement.json").read_text())
    truth = load_ground_truth(out / "synth" / "ground_truth.json")
    regimes = {(p["ego"], p["alter"]): p["regime"] for p in truth.pairs}
    mapping = agreement["count"]["cluster_directions"]
    _, cluster_rows = read_rows(out / "cluster" / "clusters.csv")
    hits = n = 0
    for ego, alter, label_count, _ in cluster_rows:
        if (ego, alter) in regimes and label_count != "":
            n += 1
            hits += mapping[int(label_count)] == regimes[(ego, alter)]
    assert n >= 1900  # nearly all 2,000 planted pairs recovered
    accuracy = hits / n
    assert accuracy >= 0.95, f"cluster-vs-truth accuracy {accuracy:.4f}"

    # Paper-style agreement between cluster labels and actual rise/decay:
    # 97% with a +/-3 point band.
    for quantity in ("count", "fraction"):
        fraction_agreeing = agreement[quantity]["agreement"]
        assert 0.94 <= fraction_agreeing <= 1.0, (quantity, fraction_agreeing)

    # Both full-window count prototypes cross zero inside [0, 1].
    _, crossing_rows = read_rows(out / "cluster" / "crossings.csv")
    full = [
        float(r[4])
        for r in crossing_rows
        if r[0] == "count" and (r[1], r[2]) == ("-4", "4") and r[4] != ""
    ]
    assert len(full) == 2
    for crossing in full:
        assert 0.0 <= crossing <= 1.0, f"crossing at t={crossing:.3f}"

    elapsed = cluster_run["cluster_elapsed"]
    assert elapsed < 300.0, f"cluster pipeline took {elapsed:.1f}s (budget 300s)"


@pytest.mark.criterion(4, "control crossings track window midpoints; mover stays at move")
def test_c04_control_truncation(cluster_run):
    out = cluster_run["out"]
    midpoints = {(-4, 4): 0.0, (-2, 4): 1.0, (-4, 2): -1.0}

    _, control_rows = read_rows(out / "control" / "control_crossings.csv")
    for window, midpoint in midpoints.items():
        crossings = [
            float(r[4])
            for r in control_rows
            if r[0] == "count" and (int(r[1]), int(r[2])) == window and r[4] != ""
        ]
        assert len(crossings) == 2, f"window {window}"
        for crossing in crossings:
            assert abs(crossing - midpoint) <= 0.5, (
                f"control window {window}: crossing {crossing:.3f} "
                f"vs midpoint {midpoint}"
            )

    _, mover_rows = read_rows(out / "cluster" / "crossings.csv")
    for window in midpoints:
        crossings = [
            float(r[4])
            for r in mover_rows
            if r[0] == "count" and (int(r[1]), int(r[2])) == window and r[4] != ""
        ]
        assert len(crossings) == 2, f"window {window}"
        for crossing in crossings:
            assert 0.0 <= crossing <= 1.0, (
                f"mover window {window}: crossing {crossing:.3f}"
            )


@pytest.mark.criterion(5, "month-correlation block gap: mover >= 0.2, control <= 0.05")
def test_c05_correlation_blocks(cluster_run):
    out = cluster_run["out"]
    mover_gap = block_gap(out / "series" / "corr_count.csv")
    control_gap = block_gap(out / "control" / "control_corr_count.csv")
    assert mover_gap >= 0.2, f"mover within-cross gap {mover_gap:.4f}"
    assert control_gap <= 0.05, f"control within-cross gap {control_gap:.4f}"


@pytest.mark.criterion(6, "statistical kernels match hand values and oracles")
def test_c06_statistical_kernels():
    from cdrmove.clustering import davies_bouldin, kmeans, silhouette_mean
    from cdrmove.models import (
        fit_elastic_net,
        fit_ols,
        fit_ridge,
        logistic_objective,
    )
    from cdrmove.series import spearman

    X = np.array([[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [4.0, 1.0]])
    labels = np.array([0, 0, 1, 1])
    assert silhouette_mean(X, labels) == pytest.approx(0.7538, abs=1e-3)
    assert davies_bouldin(X, labels) == pytest.approx(0.25, abs=1e-6)

    assert spearman([1, 2, 3], [3, 1, 2]) == -0.5

    model = kmeans(np.array([0.9, 1.1, 3.9, 4.1]), 2, seed=0)
    assert sorted(model.centroids.ravel()) == pytest.approx([1.0, 4.0])
    assert model.inertia == pytest.approx(0.04, abs=1e-12)

    x = np.linspace(0, 1, 20)[:, None]
    ols = fit_ols(x, 2.0 * x.ravel())
    assert ols.coef[0] == pytest.approx(2.0, abs=1e-8)
    assert ols.intercept == pytest.approx(0.0, abs=1e-8)

    rng = np.random.default_rng(5)
    X2 = rng.normal(size=(30, 3))
    y2 = X2 @ np.array([1.0, -2.0, 0.5]) + 0.3 * rng.normal(size=30)
    ridge0 = fit_ridge(X2, y2, 1e-12)
    ols2 = fit_ols(X2, y2)
    assert np.allclose(ridge0.coef, ols2.coef, atol=1e-6)

    # Elastic net vs an independent proximal-gradient reference solver.
    def ista(Xm, ym, lam, ratio, iters=300_000):
        xm, ymean = Xm.mean(axis=0), ym.mean()
        Xc, yc = Xm - xm, ym - ymean
        l1, l2 = lam * ratio, lam * (1 - ratio)
        L = np.linalg.eigvalsh(Xc.T @ Xc / len(ym)).max() + l2
        w = np.zeros(Xm.shape[1])
        for _ in range(iters):
            grad = Xc.T @ (Xc @ w - yc) / len(ym) + l2 * w
            step = w - grad / L
            new = np.sign(step) * np.maximum(np.abs(step) - l1 / L, 0.0)
            if np.abs(new - w).max() < 1e-12:
                return new
            w = new
        return w

    Xe = rng.normal(size=(20, 5))
    ye = Xe @ np.array([1.5, 0.0, -2.0, 0.0, 0.3]) + 0.1 * rng.normal(size=20)
    enet = fit_elastic_net(Xe, ye, 0.1, 0.5, tol=1e-10)
    assert np.allclose(enet.coef, ista(Xe, ye, 0.1, 0.5), atol=1e-4)

    # Logistic gradient against central finite differences.
    Xl = rng.normal(size=(40, 3))
    yl = (rng.uniform(size=40) < 0.5).astype(float)
    w = rng.normal(size=3) * 0.3
    b = 0.1
    s = np.ones(40)
    _, grad = logistic_objective(Xl, yl, w, b, 0.7, s)
    theta = np.concatenate([w, [b]])
    eps = 1e-6
    for i in range(4):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi, _ = logistic_objective(Xl, yl, hi[:3], hi[3], 0.7, s)
        f_lo, _ = logistic_objective(Xl, yl, lo[:3], lo[3], 0.7, s)
        numeric = (f_hi - f_lo) / (2 * eps)
        assert abs(grad[i] - numeric) / max(abs(numeric), 1e-8) < 1e-4


@pytest.mark.criterion(7, "metric plumbing: back-transform, identity, class weights")
def test_c07_metric_plumbing():
    from cdrmove.metrics import evaluate_regression
    from cdrmove.models import balanced_class_weights, fit_ols

    x = np.arange(10, dtype=float)[:, None]
    y = np.array([1.2, 2.1, 2.9, 4.4, 6.5, 9.1, 13.0, 19.5, 27.0, 40.0])
    model = fit_ols(x, np.log(y))
    report = evaluate_regression(model, x, y, np.exp)
    preds = [math.exp(model.intercept + model.coef[0] * xi) for xi in x.ravel()]
    mse = sum((yi - pi) ** 2 for yi, pi in zip(y, preds)) / len(y)
    mean_y = sum(y) / len(y)
    r2 = 1.0 - sum((yi - pi) ** 2 for yi, pi in zip(y, preds)) / sum(
        (yi - mean_y) ** 2 for yi in y
    )
    assert report.mse == pytest.approx(mse, rel=1e-12)
    assert report.r2 == pytest.approx(r2, rel=1e-12)

    rng = np.random.default_rng(1)
    Xi = rng.normal(size=(12, 2))
    yi = rng.normal(size=12)
    direct_model = fit_ols(Xi, yi)
    via_identity = evaluate_regression(direct_model, Xi, yi, lambda z: z)
    pred = direct_model.predict(Xi)
    assert via_identity.mse == float(((yi - pred) ** 2).mean())
    assert via_identity.r2 == 1.0 - float(((yi - pred) ** 2).sum()) / float(
        ((yi - yi.mean()) ** 2).sum()
    )

    weights = balanced_class_weights(np.array([0] * 57 + [1] * 43))
    assert weights[0] == pytest.approx(0.877, abs=1e-3)
    assert weights[1] == pytest.approx(1.163, abs=1e-3)


@pytest.mark.criterion(8, "permutation importance: noise within band, duplicate positive")
def test_c08_permutation_importance():
    from cdrmove.metrics import permutation_importance
    from cdrmove.models import fit_ridge

    rng = np.random.default_rng(88)
    n = 400
    signal = rng.normal(size=n)
    noise = rng.normal(size=n)
    X_train = np.column_stack([signal, noise])
    y_train = 3.0 * signal + 0.2 * rng.normal(size=n)
    model = fit_ridge(X_train, y_train, 1e-6)
    X_test = np.column_stack([rng.normal(size=200), rng.normal(size=200)])
    y_test = 3.0 * X_test[:, 0] + 0.2 * rng.normal(size=200)
    groups = [("signal", [0]), ("noise", [1])]
    tested = permutation_importance(
        model, X_test, y_test, "r2", groups, n_perm=5, seed=0
    )["noise"]
    replicates = []
    for rep in range(50):
        X_rep = X_test.copy()
        X_rep[:, 1] = rng.normal(size=200)
        value = permutation_importance(
            model, X_rep, y_test, "r2", groups, n_perm=5, seed=1000 + rep
        )["noise"]
        replicates.append(value)
    sigma = float(np.std(replicates))
    assert sigma > 0.0
    assert abs(tested) < 3.0 * sigma, f"noise importance {tested:.2e} vs 3sigma {3*sigma:.2e}"

    dup = np.column_stack([signal, signal])
    dup_model = fit_ridge(dup, 3.0 * signal, 1e-6)
    dup_test = rng.normal(size=150)
    importances = permutation_importance(
        dup_model,
        np.column_stack([dup_test, dup_test]),
        3.0 * dup_test,
        "r2",
        [("a", [0]), ("b", [1])],
        n_perm=5,
        seed=2,
    )
    assert importances["a"] > 0.0 and importances["b"] > 0.0


@pytest.mark.criterion(9, "1-NN Bayes bound >= analytic 0.84 in >= 95 of 100 trials")
def test_c09_bayes_bound():
    from cdrmove.metrics import bayes_accuracy_upper_bound

    mu = 0.994457883209753  # standard-normal quantile with cdf 0.84
    n = 2000
    successes = 0
    for trial in range(100):
        rng = np.random.default_rng(9000 + trial)
        labels = rng.integers(0, 2, n)
        x = rng.normal(0.0, 1.0, n) + np.where(labels == 1, mu, -mu)
        bound = bayes_accuracy_upper_bound(x, labels)
        successes += bound >= 0.84
    assert successes >= 95, f"bound cleared 0.84 in only {successes}/100 trials"


@pytest.mark.criterion(10, "byte-identical artifacts across reruns and thread caps")
def test_c10_determinism(tmp_path):
    overrides = {
        "seed": 33,
        "synth": {
            "n_users": 150,
            "mover_fraction": 0.08,
            "control_ties": 10,
            "bg_call_rate": 2.0,
        },
        "cluster": {"k_range": [2, 3], "bootstrap": 12, "restarts": 3},
        "models": {
            "regression_kinds": ["OLS", "Ridge", "SVR_rbf"],
            "classification_kinds": ["LogRegL2", "SVM_rbf"],
            "grids": {
                "Ridge": {"lam": [0.1, 1.0]},
                "SVR_rbf": {"C": [1.0, 10.0], "gamma": [0.1], "epsilon": [0.1]},
                "LogRegL2": {"lam": [1.0]},
                "SVM_rbf": {"C": [1.0, 10.0], "gamma": [0.1]},
            },
        },
    }
    dirs = []
    for name, threads in (("a", 1), ("b", 8)):
        out = tmp_path / name
        config = load_config(None, {**overrides, "output_dir": str(out)})
        Runner(config, threads=threads).run("all")
        dirs.append(out)
    a, b = dirs
    files_a = sorted(
        p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timings.json"
    )
    files_b = sorted(
        p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "timings.json"
    )
    assert files_a == files_b
    for rel in files_a:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), f"artifact differs: {rel}"


@pytest.mark.criterion(11, "[conditional] real-dataset headline numbers")
def test_c11_real_dataset(tmp_path):
    data_dir = os.environ.get("CDRMOVE_REAL_DATA")
    if not data_dir:
        pytest.skip("real dataset not available (set CDRMOVE_REAL_DATA)")
    data = Path(data_dir)
    config = load_config(
        None,
        {
            "output_dir": str(tmp_path),
            "inputs": {
                "cdr": [str(data / "cdr.csv")],
                "demographics": str(data / "demographics.csv"),
                "towers": str(data / "towers.csv"),
            },
        },
    )
    runner = Runner(config)
    for stage in (
        "ingest",
        "homes",
        "movers",
        "ties",
        "series",
        "cluster",
        "control",
        "features",
        "train",
        "evaluate",
        "report",
    ):
        runner.run(stage)
    metrics = json.loads((tmp_path / "report" / "metrics.json").read_text())
    population = metrics["population"]
    assert population["movers"] == pytest.approx(13611, rel=0.02)
    assert population["non_movers"] == pytest.approx(969513, rel=0.02)
    assert metrics["pairs"]["pairs"] == pytest.approx(4487, rel=0.02)
    assert metrics["median_move_distance_km"] == pytest.approx(168.0, abs=10.0)
    assert metrics["cluster"]["count"]["k_star"] == 2
    assert metrics["cluster"]["fraction"]["k_star"] == 2
    assert metrics["cluster"]["count"]["agreement"] == pytest.approx(0.97, abs=0.02)
    models = metrics["models"]
    best_r2_count = max(
        info["metrics"]["r2"]
        for block in models["count"].values()
        if isinstance(block, dict)
        for info in block.values()
        if isinstance(info, dict) and "metrics" in info
    )
    assert best_r2_count == pytest.approx(0.58, abs=0.05)
    best_r2_frac = max(
        info["metrics"]["r2"]
        for block in models["fraction"].values()
        if isinstance(block, dict)
        for info in block.values()
        if isinstance(info, dict) and "metrics" in info
    )
    assert best_r2_frac == pytest.approx(0.67, abs=0.05)
    best_acc_count = max(
        info["metrics"]["accuracy"]
        for block in models["decay_count"].values()
        if isinstance(block, dict)
        for info in block.values()
        if isinstance(info, dict) and "metrics" in info
    )
    assert best_acc_count == pytest.approx(0.66, abs=0.05)
    best_acc_frac = max(
        info["metrics"]["accuracy"]
        for block in models["decay_frac"].values()
        if isinstance(block, dict)
        for info in block.values()
        if isinstance(info, dict) and "metrics" in info
    )
    assert best_acc_frac == pytest.approx(0.61, abs=0.05)
