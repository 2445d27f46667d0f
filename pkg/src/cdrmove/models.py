"""Regression and classification models with 5-fold cross-validated tuning.

Linear models use closed-form normal equations (ridge penalty excludes the
intercept), the elastic net uses coordinate descent, and SVR/SVM use a dense
most-violating-pair SMO dual solver. Logistic regression is a damped Newton
iteration with an L2 penalty on the weights only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ._rand import derive_seed

REGRESSION_KINDS = ("OLS", "Ridge", "ElasticNet", "KNN", "SVR_lin", "SVR_poly", "SVR_rbf")
CLASSIFIER_KINDS = ("LogRegL2", "SVM_lin", "SVM_poly", "SVM_rbf")

_LOG_GRID_C = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]
_LOG_GRID_GAMMA = [0.001, 0.01, 0.1, 1.0, 10.0]
_LOG_GRID_LAMBDA = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]

DEFAULT_REGRESSION_GRIDS: dict[str, dict[str, list]] = {
    "OLS": {},
    "Ridge": {"lam": _LOG_GRID_LAMBDA},
    "ElasticNet": {"lam": _LOG_GRID_LAMBDA, "l1_ratio": [0.2, 0.5, 0.8]},
    "KNN": {"k": [3, 5, 10, 20]},
    "SVR_lin": {"C": _LOG_GRID_C, "epsilon": [0.1]},
    "SVR_poly": {
        "C": _LOG_GRID_C,
        "epsilon": [0.1],
        "degree": [2, 3],
        "coef0": [0.0, 1.0],
    },
    "SVR_rbf": {"C": _LOG_GRID_C, "epsilon": [0.1], "gamma": _LOG_GRID_GAMMA},
}
DEFAULT_CLASSIFIER_GRIDS: dict[str, dict[str, list]] = {
    "LogRegL2": {"lam": _LOG_GRID_LAMBDA},
    "SVM_lin": {"C": _LOG_GRID_C},
    "SVM_poly": {"C": _LOG_GRID_C, "degree": [2, 3], "coef0": [0.0, 1.0]},
    "SVM_rbf": {"C": _LOG_GRID_C, "gamma": _LOG_GRID_GAMMA},
}


def balanced_class_weights(y: np.ndarray) -> dict[int, float]:
    """Weight n / (2 * n_c) per class of a binary target."""
    y = np.asarray(y).astype(int)
    n = y.size
    return {c: n / (2.0 * int((y == c).sum())) for c in (0, 1)}


# ---------------------------------------------------------------- linear


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    kind: str
    params: dict = field(default_factory=dict)
    flagged_singular: bool = False

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept


def fit_ols(X: np.ndarray, y: np.ndarray) -> LinearModel:
    """Normal equations with a ridge-jitter fallback on singular designs."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([X, np.ones(X.shape[0])])
    gram = A.T @ A
    rhs = A.T @ y
    flagged = False
    try:
        beta = np.linalg.solve(gram, rhs)
        if not np.isfinite(beta).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        flagged = True
        beta = np.linalg.solve(gram + 1e-8 * np.eye(gram.shape[0]), rhs)
    return LinearModel(beta[:-1], float(beta[-1]), "OLS", flagged_singular=flagged)


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float) -> LinearModel:
    """Closed-form ridge; the penalty matrix excludes the intercept."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([X, np.ones(X.shape[0])])
    penalty = lam * np.eye(A.shape[1])
    penalty[-1, -1] = 0.0
    beta = np.linalg.solve(A.T @ A + penalty, A.T @ y)
    return LinearModel(beta[:-1], float(beta[-1]), "Ridge", {"lam": lam})


def fit_elastic_net(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    l1_ratio: float,
    tol: float = 1e-6,
    max_iter: int = 10000,
) -> LinearModel:
    """Coordinate descent for
    (1/2n)||y - Xw - b||^2 + lam * (l1 ||w||_1 + (1 - l1)/2 ||w||^2)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.zeros(p)
    col_sq = (X * X).sum(axis=0) / n
    intercept = float(y.mean())
    residual = y - intercept  # y - Xw - b with w = 0
    l1 = lam * l1_ratio
    l2 = lam * (1.0 - l1_ratio)
    for _ in range(max_iter):
        max_change = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            rho = (X[:, j] @ residual) / n + col_sq[j] * w[j]
            new_w = np.sign(rho) * max(abs(rho) - l1, 0.0) / (col_sq[j] + l2)
            if new_w != w[j]:
                residual -= X[:, j] * (new_w - w[j])
                max_change = max(max_change, abs(new_w - w[j]))
                w[j] = new_w
        new_intercept = intercept + float(residual.mean())
        residual -= new_intercept - intercept
        max_change = max(max_change, abs(new_intercept - intercept))
        intercept = new_intercept
        if max_change <= tol:
            break
    else:
        warnings.warn("elastic net did not converge; increase max_iter")
    return LinearModel(w, intercept, "ElasticNet", {"lam": lam, "l1_ratio": l1_ratio})


# ---------------------------------------------------------------- KNN


@dataclass
class KnnRegressor:
    X: np.ndarray
    y: np.ndarray
    k: int
    kind: str = "KNN"
    params: dict = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        d2 = (
            (X * X).sum(axis=1)[:, None]
            + (self.X * self.X).sum(axis=1)[None, :]
            - 2.0 * X @ self.X.T
        )
        order = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        return self.y[order].mean(axis=1)


def fit_knn(X: np.ndarray, y: np.ndarray, k: int) -> KnnRegressor:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    k = min(k, X.shape[0])
    return KnnRegressor(X, y, k, params={"k": k})


# ---------------------------------------------------------------- kernels & SMO


def make_kernel(
    name: str, gamma: float = 1.0, degree: int = 3, coef0: float = 0.0
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if name == "linear":
        return lambda A, B: A @ B.T
    if name == "poly":
        return lambda A, B: (A @ B.T + coef0) ** degree
    if name == "rbf":

        def rbf(A: np.ndarray, B: np.ndarray) -> np.ndarray:
            d2 = (
                (A * A).sum(axis=1)[:, None]
                + (B * B).sum(axis=1)[None, :]
                - 2.0 * A @ B.T
            )
            return np.exp(-gamma * np.maximum(d2, 0.0))

        return rbf
    raise ValueError(f"unknown kernel {name!r}")


def _smo_solve(
    q_col: Callable[[int], np.ndarray],
    q_diag: np.ndarray,
    p: np.ndarray,
    y: np.ndarray,
    C: np.ndarray,
    tol: float = 1e-4,
    max_iter: int = 0,
) -> tuple[np.ndarray, float]:
    """Most-violating-pair SMO for min 1/2 a'Qa + p'a, y'a = 0, 0 <= a <= C.

    Returns the solution and the offset rho (decision threshold). ``q_col``
    materializes one column of Q on demand.
    """
    n = p.size
    if max_iter <= 0:
        # High-precision solves (cross-checks against reference solvers) get a
        # larger budget; CV-grid fits stop early at the default tolerance.
        max_iter = max(200_000, 120 * n) if tol < 1e-5 else max(20_000, 60 * n)
    alpha = np.zeros(n)
    grad = p.copy()
    cols: dict[int, np.ndarray] = {}

    def column(i: int) -> np.ndarray:
        got = cols.get(i)
        if got is None:
            got = q_col(i)
            cols[i] = got
        return got

    minus_yg = np.empty(n)
    for it in range(max_iter):
        np.multiply(-y, grad, out=minus_yg)
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[minus_yg[up].argmax()])
        j = int(np.flatnonzero(low)[minus_yg[low].argmin()])
        if minus_yg[i] - minus_yg[j] <= tol:
            break
        qi, qj = column(i), column(j)
        old_i, old_j = alpha[i], alpha[j]
        Ci, Cj = C[i], C[j]
        if y[i] != y[j]:
            quad = q_diag[i] + q_diag[j] + 2.0 * qi[j]
            delta = (-grad[i] - grad[j]) / max(quad, 1e-12)
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0 and alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = diff
            elif diff <= 0 and alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > Ci - Cj and alpha[i] > Ci:
                alpha[i] = Ci
                alpha[j] = Ci - diff
            elif diff <= Ci - Cj and alpha[j] > Cj:
                alpha[j] = Cj
                alpha[i] = Cj + diff
        else:
            quad = q_diag[i] + q_diag[j] - 2.0 * qi[j]
            delta = (grad[i] - grad[j]) / max(quad, 1e-12)
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > Ci and alpha[i] > Ci:
                alpha[i] = Ci
                alpha[j] = total - Ci
            elif total <= Ci and alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > Cj and alpha[j] > Cj:
                alpha[j] = Cj
                alpha[i] = total - Cj
            elif total <= Cj and alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total
        grad += qi * (alpha[i] - old_i) + qj * (alpha[j] - old_j)
    else:
        warnings.warn("SMO hit the iteration cap before reaching tolerance")

    np.multiply(-y, grad, out=minus_yg)
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if free.any():
        rho = float(minus_yg[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = minus_yg[up].max() if up.any() else 0.0
        lo = minus_yg[low].min() if low.any() else 0.0
        rho = float((hi + lo) / 2.0)
    return alpha, rho


@dataclass
class SvmClassifier:
    support: np.ndarray
    coef: np.ndarray  # alpha_i * y_i at support vectors
    intercept: float
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str
    params: dict = field(default_factory=dict)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        K = self.kernel(np.asarray(X, dtype=float), self.support)
        return K @ self.coef + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) >= 0.0).astype(int)


def fit_svc(
    X: np.ndarray,
    y01: np.ndarray,
    C: float,
    kernel_name: str,
    gamma: float = 1.0,
    degree: int = 3,
    coef0: float = 0.0,
    class_weights: Mapping[int, float] | None = None,
    tol: float = 1e-4,
    kind: str = "SVM",
    params: dict | None = None,
) -> SvmClassifier:
    """Weighted soft-margin SVM via the SMO dual solver."""
    X = np.asarray(X, dtype=float)
    y01 = np.asarray(y01).astype(int)
    if len(np.unique(y01)) < 2:
        raise ValueError("single-class training target")
    y = np.where(y01 == 1, 1.0, -1.0)
    kernel = make_kernel(kernel_name, gamma, degree, coef0)
    K = kernel(X, X)
    weights = class_weights or {0: 1.0, 1: 1.0}
    C_vec = np.array([C * weights[int(c)] for c in y01])
    q_diag = np.diag(K) * 1.0

    def q_col(i: int) -> np.ndarray:
        return y * (y[i] * K[:, i])

    alpha, rho = _smo_solve(q_col, q_diag, -np.ones(X.shape[0]), y, C_vec, tol)
    sv = alpha > 1e-10
    return SvmClassifier(
        support=X[sv],
        coef=(alpha * y)[sv],
        intercept=rho,
        kernel=kernel,
        kind=kind,
        params=params or {},
    )


@dataclass
class SvrModel:
    support: np.ndarray
    coef: np.ndarray  # beta_i at support vectors
    intercept: float
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str
    params: dict = field(default_factory=dict)

    def predict(self, X: np.ndarray) -> np.ndarray:
        K = self.kernel(np.asarray(X, dtype=float), self.support)
        return K @ self.coef + self.intercept


def fit_svr(
    X: np.ndarray,
    y: np.ndarray,
    C: float,
    epsilon: float,
    kernel_name: str,
    gamma: float = 1.0,
    degree: int = 3,
    coef0: float = 0.0,
    tol: float = 1e-4,
    kind: str = "SVR",
    params: dict | None = None,
) -> SvrModel:
    """Epsilon-insensitive SVR via the 2n-variable SMO dual."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    kernel = make_kernel(kernel_name, gamma, degree, coef0)
    K = kernel(X, X)
    z = np.concatenate([np.ones(n), -np.ones(n)])
    p = np.concatenate([epsilon - y, epsilon + y])
    q_diag = np.concatenate([np.diag(K), np.diag(K)])

    def q_col(i: int) -> np.ndarray:
        base = K[:, i % n]
        return z * (z[i] * np.concatenate([base, base]))

    alpha, rho = _smo_solve(q_col, q_diag, p, z, np.full(2 * n, C), tol)
    beta = alpha[:n] - alpha[n:]
    sv = np.abs(beta) > 1e-10
    return SvrModel(
        support=X[sv],
        coef=beta[sv],
        intercept=rho,
        kernel=kernel,
        kind=kind,
        params=params or {},
    )


# ---------------------------------------------------------------- logistic


@dataclass
class LogisticModel:
    coef: np.ndarray
    intercept: float
    kind: str = "LogRegL2"
    params: dict = field(default_factory=dict)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) >= 0.0).astype(int)


def logistic_objective(
    X: np.ndarray,
    y01: np.ndarray,
    w: np.ndarray,
    b: float,
    lam: float,
    sample_weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Weighted negative log-likelihood with L2 penalty on weights only;
    returns (loss, gradient over [w, b])."""
    z = X @ w + b
    # log(1 + exp(-|z|)) + max(z, 0) - z*y is the stable cross-entropy.
    loss_terms = np.logaddexp(0.0, z) - y01 * z
    loss = float((sample_weights * loss_terms).sum() + 0.5 * lam * (w @ w))
    prob = 1.0 / (1.0 + np.exp(-z))
    err = sample_weights * (prob - y01)
    grad = np.concatenate([X.T @ err + lam * w, [err.sum()]])
    return loss, grad


def fit_logistic(
    X: np.ndarray,
    y01: np.ndarray,
    lam: float = 1.0,
    class_weights: Mapping[int, float] | None = None,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> LogisticModel:
    """Damped Newton iterations for weighted L2 logistic regression."""
    X = np.asarray(X, dtype=float)
    y01 = np.asarray(y01).astype(float)
    if len(np.unique(y01)) < 2:
        raise ValueError("single-class training target")
    n, d = X.shape
    weights = class_weights or {0: 1.0, 1: 1.0}
    s = np.array([weights[int(c)] for c in y01])
    w = np.zeros(d)
    b = 0.0
    loss, grad = logistic_objective(X, y01, w, b, lam, s)
    for _ in range(max_iter):
        if np.abs(grad).max() <= tol:
            break
        z = X @ w + b
        prob = 1.0 / (1.0 + np.exp(-z))
        r = s * prob * (1.0 - prob)
        A = np.column_stack([X, np.ones(n)])
        H = A.T @ (A * r[:, None])
        H[:d, :d] += lam * np.eye(d)
        H += 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, grad)
        scale = 1.0
        for _ in range(50):
            w_new = w - scale * step[:d]
            b_new = b - scale * step[d]
            new_loss, new_grad = logistic_objective(X, y01, w_new, b_new, lam, s)
            if new_loss <= loss + 1e-12:
                w, b, loss, grad = w_new, b_new, new_loss, new_grad
                break
            scale *= 0.5
        else:
            break
    return LogisticModel(w, float(b), params={"lam": lam})


# ---------------------------------------------------------------- CV search


@dataclass
class FitResult:
    kind: str
    model: object
    params: dict
    cv_table: list[dict]
    cv_metric: str


def kfold_indices(n: int, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    perm = np.random.default_rng(derive_seed(seed, "cv")).permutation(n)
    chunks = np.array_split(perm, folds)
    out = []
    for f in range(folds):
        val = chunks[f]
        train = np.concatenate([chunks[g] for g in range(folds) if g != f])
        out.append((np.sort(train), np.sort(val)))
    return out


def grid_points(grid: Mapping[str, Sequence]) -> list[dict]:
    keys = sorted(grid)
    points: list[dict] = [{}]
    for key in keys:
        points = [dict(p, **{key: v}) for p in points for v in grid[key]]
    return points


def _make_regressor(kind: str, X: np.ndarray, y: np.ndarray, params: dict):
    if kind == "OLS":
        return fit_ols(X, y)
    if kind == "Ridge":
        return fit_ridge(X, y, params["lam"])
    if kind == "ElasticNet":
        return fit_elastic_net(X, y, params["lam"], params["l1_ratio"])
    if kind == "KNN":
        return fit_knn(X, y, params["k"])
    if kind.startswith("SVR_"):
        kernel = {"SVR_lin": "linear", "SVR_poly": "poly", "SVR_rbf": "rbf"}[kind]
        return fit_svr(
            X,
            y,
            C=params.get("C", 1.0),
            epsilon=params.get("epsilon", 0.1),
            kernel_name=kernel,
            gamma=params.get("gamma", 1.0),
            degree=params.get("degree", 3),
            coef0=params.get("coef0", 0.0),
            kind=kind,
            params=params,
        )
    raise ValueError(f"unknown regression kind {kind!r}")


def _make_classifier(
    kind: str, X: np.ndarray, y: np.ndarray, params: dict, balanced: bool
):
    weights = balanced_class_weights(y) if balanced else None
    if kind == "LogRegL2":
        return fit_logistic(X, y, lam=params.get("lam", 1.0), class_weights=weights)
    if kind.startswith("SVM_"):
        kernel = {"SVM_lin": "linear", "SVM_poly": "poly", "SVM_rbf": "rbf"}[kind]
        return fit_svc(
            X,
            y,
            C=params.get("C", 1.0),
            kernel_name=kernel,
            gamma=params.get("gamma", 1.0),
            degree=params.get("degree", 3),
            coef0=params.get("coef0", 0.0),
            class_weights=weights,
            kind=kind,
            params=params,
        )
    raise ValueError(f"unknown classifier kind {kind!r}")


def _mse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(((y_true - y_pred) ** 2).mean())


def _average_recall(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    recalls = []
    for c in (0, 1):
        mask = y_true == c
        if mask.any():
            recalls.append(float((y_pred[mask] == c).mean()))
    return float(np.mean(recalls)) if recalls else float("nan")


def fit_regression(
    kind: str,
    X: np.ndarray,
    y: np.ndarray,
    grid: Mapping[str, Sequence] | None = None,
    cv_folds: int = 5,
    seed: int = 0,
) -> FitResult:
    """Tune by 5-fold CV minimizing MSE (in the fitting scale), then refit."""
    if kind not in REGRESSION_KINDS:
        raise ValueError(f"unknown regression kind {kind!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = DEFAULT_REGRESSION_GRIDS[kind] if grid is None else grid
    points = grid_points(grid)
    cv_table: list[dict] = []
    best_params: dict = points[0]
    best_score = np.inf
    if len(points) > 1:
        folds = kfold_indices(X.shape[0], cv_folds, seed)
        for params in points:
            scores = []
            for train_idx, val_idx in folds:
                model = _make_regressor(kind, X[train_idx], y[train_idx], params)
                scores.append(_mse(y[val_idx], model.predict(X[val_idx])))
            mean_score = float(np.mean(scores))
            cv_table.append({"params": params, "cv_mse": mean_score})
            if mean_score < best_score:
                best_score = mean_score
                best_params = params
    model = _make_regressor(kind, X, y, best_params)
    return FitResult(kind, model, best_params, cv_table, "mse")


def fit_classifier(
    kind: str,
    X: np.ndarray,
    y: np.ndarray,
    grid: Mapping[str, Sequence] | None = None,
    cv_folds: int = 5,
    seed: int = 0,
    balanced: bool = True,
) -> FitResult:
    """Tune by 5-fold CV maximizing average recall, with balanced class weights."""
    if kind not in CLASSIFIER_KINDS:
        raise ValueError(f"unknown classifier kind {kind!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if len(np.unique(y)) < 2:
        raise ValueError("single-class training target")
    grid = DEFAULT_CLASSIFIER_GRIDS[kind] if grid is None else grid
    points = grid_points(grid)
    cv_table: list[dict] = []
    best_params: dict = points[0]
    best_score = -np.inf
    if len(points) > 1:
        folds = kfold_indices(X.shape[0], cv_folds, seed)
        for params in points:
            scores = []
            for train_idx, val_idx in folds:
                if len(np.unique(y[train_idx])) < 2:
                    continue
                model = _make_classifier(kind, X[train_idx], y[train_idx], params, balanced)
                scores.append(_average_recall(y[val_idx], model.predict(X[val_idx])))
            mean_score = float(np.mean(scores)) if scores else -np.inf
            cv_table.append({"params": params, "cv_average_recall": mean_score})
            if mean_score > best_score:
                best_score = mean_score
                best_params = params
    model = _make_classifier(kind, X, y, best_params, balanced)
    return FitResult(kind, model, best_params, cv_table, "average_recall")
