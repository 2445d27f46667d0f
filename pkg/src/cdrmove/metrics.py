"""Back-transformed evaluation metrics, permutation importance, Bayes bound."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._rand import derive_seed

MAXIMIZED_METRICS = ("r2", "accuracy", "average_recall")
MINIMIZED_METRICS = ("mse",)


@dataclass(frozen=True)
class RegressionReport:
    mse: float
    r2: float | None  # None when the test target has zero variance


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    recall: dict[int, float | None]
    precision: dict[int, float | None]
    average_recall: float | None


def evaluate_regression(
    model, X_test: np.ndarray, y_test_original: np.ndarray,
    back_transform: Callable[[np.ndarray], np.ndarray],
) -> RegressionReport:
    """MSE and R^2 on the original target scale after back-transforming
    predictions; R^2 uses the test-target mean for the total sum of squares."""
    y_true = np.asarray(y_test_original, dtype=float)
    y_pred = back_transform(model.predict(X_test))
    mse = float(((y_true - y_pred) ** 2).mean())
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return RegressionReport(mse, None)
    ss_res = float(((y_true - y_pred) ** 2).sum())
    return RegressionReport(mse, 1.0 - ss_res / ss_tot)


def evaluate_classifier(model, X_test: np.ndarray, y_test: np.ndarray) -> ClassificationReport:
    """Total accuracy plus per-class recall/precision; the average recall is
    the unweighted mean of the two recalls and is missing when the test set
    lacks a class."""
    y_true = np.asarray(y_test).astype(int)
    y_pred = np.asarray(model.predict(X_test)).astype(int)
    accuracy = float((y_true == y_pred).mean())
    recall: dict[int, float | None] = {}
    precision: dict[int, float | None] = {}
    for c in (0, 1):
        actual = y_true == c
        predicted = y_pred == c
        recall[c] = float((y_pred[actual] == c).mean()) if actual.any() else None
        precision[c] = float((y_true[predicted] == c).mean()) if predicted.any() else None
    if recall[0] is None or recall[1] is None:
        average_recall = None
    else:
        average_recall = (recall[0] + recall[1]) / 2.0
    return ClassificationReport(accuracy, recall, precision, average_recall)


def metric_value(
    metric: str,
    model,
    X: np.ndarray,
    y: np.ndarray,
    back_transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Evaluate one named metric; regression metrics expect the original-scale
    target and a back-transform."""
    if metric in ("r2", "mse"):
        report = evaluate_regression(model, X, y, back_transform or (lambda z: z))
        value = report.mse if metric == "mse" else report.r2
        return float("nan") if value is None else float(value)
    report = evaluate_classifier(model, X, y)
    if metric == "accuracy":
        return report.accuracy
    if metric == "average_recall":
        value = report.average_recall
        return float("nan") if value is None else float(value)
    raise ValueError(f"unknown metric {metric!r}")


def permutation_importance(
    model,
    X_test: np.ndarray,
    y_test: np.ndarray,
    metric: str,
    groups: Sequence[tuple[str, Sequence[int]]],
    n_perm: int = 5,
    seed: int = 0,
    back_transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> dict[str, float]:
    """Mean metric degradation when one feature's test values are shuffled.

    Dummy-indicator columns of one categorical feature are shuffled jointly.
    The sign convention makes positive mean important: baseline - shuffled for
    maximized metrics, shuffled - baseline for minimized ones.
    """
    if metric not in MAXIMIZED_METRICS + MINIMIZED_METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    X_test = np.asarray(X_test, dtype=float)
    baseline = metric_value(metric, model, X_test, y_test, back_transform)
    n = X_test.shape[0]
    out: dict[str, float] = {}
    for g_idx, (name, cols) in enumerate(groups):
        cols = list(cols)
        drops = []
        for rep in range(n_perm):
            rng = np.random.default_rng(derive_seed(seed, "perm", g_idx, rep))
            perm = rng.permutation(n)
            shuffled = X_test.copy()
            shuffled[:, cols] = shuffled[perm][:, cols]
            score = metric_value(metric, model, shuffled, y_test, back_transform)
            if metric in MINIMIZED_METRICS:
                drops.append(score - baseline)
            else:
                drops.append(baseline - score)
        out[name] = float(np.mean(drops))
    return out


def bayes_accuracy_upper_bound(X: np.ndarray, y: np.ndarray) -> float:
    """1 - epsilon/2 with epsilon the leave-one-out 1-NN error (brute force).

    Zero-distance neighbours with conflicting labels count as errors (worst
    case for duplicates).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(int)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    d2 = (
        (X * X).sum(axis=1)[:, None]
        + (X * X).sum(axis=1)[None, :]
        - 2.0 * X @ X.T
    )
    d2 = np.maximum(d2, 0.0)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    errors = y[nn] != y
    d_min = d2[np.arange(n), nn]
    dup_rows = np.flatnonzero(d_min == 0.0)
    for i in dup_rows:
        tied = np.flatnonzero(d2[i] == 0.0)
        if (y[tied] != y[i]).any():
            errors[i] = True
    eps = float(errors.mean())
    return 1.0 - eps / 2.0
