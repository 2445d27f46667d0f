"""Per-pair predictor assembly, transforms, and design-matrix construction.

The ten predictors: pre-move call count and fraction means, ego age, age
difference, ego gender, gender difference, distance moved, pre-move ego-alter
distance, direction of the move, and pre-move reciprocity. The absolute
pre/post distance change is computed as a diagnostic only; it is excluded
from default models because it nearly duplicates the distance moved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .homes import compute_city_homes
from .records import DIR_OUT, Dataset, great_circle_km
from .series import DECAY, PrePostSummary
from .ties import StrongPair

TOWARDS = "towards"
AWAY = "away"
SAME = "same"
OPPOSITE = "opposite"

NUMERIC_FEATURES = (
    "count_pre",
    "frac_pre",
    "age_ego",
    "age_diff",
    "distance_move",
    "distance_ea_pre",
    "recip_pre",
)
CATEGORICAL_LEVELS = {
    "gender_ego": ("F", "M"),
    "gender_diff": (SAME, OPPOSITE),
    "direction_move": (TOWARDS, AWAY),
}
DEFAULT_FEATURES = (
    "count_pre",
    "frac_pre",
    "age_ego",
    "age_diff",
    "gender_ego",
    "gender_diff",
    "distance_move",
    "distance_ea_pre",
    "direction_move",
    "recip_pre",
)
REGRESSION_TARGETS = ("count_post", "frac_post")
CLASSIFICATION_TARGETS = ("decay_count", "decay_frac")


@dataclass(frozen=True)
class FeatureRow:
    ego: str
    alter: str
    m: int
    count_pre: float
    frac_pre: float
    age_ego: float
    age_diff: float
    gender_ego: str
    gender_diff: str
    distance_move: float
    distance_ea_pre: float
    direction_move: str
    recip_pre: float
    count_post: float
    frac_post: float
    decay_count: bool
    decay_frac: bool
    abs_dist_change: float
    distance_ea_post: float
    direction_tie: bool


@dataclass(frozen=True)
class TransformSpec:
    """Per-feature transform choices plus the zero substitutions.

    Zeros are replaced before log/logit: counts and kilometers by 0.1,
    fractions by 0.001; logit inputs at or above 1 are capped at 0.999.
    """

    transforms: Mapping[str, str]  # feature -> "none" | "log" | "logit"
    zero_count_km: float = 0.1
    zero_fraction: float = 0.001
    logit_cap: float = 0.999

    def kind(self, feature: str) -> str:
        return self.transforms.get(feature, "none")


def transform_column(
    values: np.ndarray, kind: str, spec: TransformSpec
) -> tuple[np.ndarray, int]:
    """Apply a transform with the documented zero substitutions.

    Returns the transformed column and the number of capped logit inputs.
    """
    arr = np.asarray(values, dtype=float)
    if kind == "none":
        return arr.copy(), 0
    if kind == "log":
        safe = np.where(arr <= 0.0, spec.zero_count_km, arr)
        return np.log(safe), 0
    if kind == "logit":
        capped = int((arr >= 1.0).sum())
        safe = np.where(arr <= 0.0, spec.zero_fraction, arr)
        safe = np.where(safe >= 1.0, spec.logit_cap, safe)
        return np.log(safe / (1.0 - safe)), capped
    raise ValueError(f"unknown transform {kind!r}")


def back_transform_fn(kind: str) -> Callable[[np.ndarray], np.ndarray]:
    if kind == "none":
        return lambda z: np.asarray(z, dtype=float)
    if kind == "log":
        return lambda z: np.exp(np.asarray(z, dtype=float))
    if kind == "logit":
        return lambda z: 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))
    raise ValueError(f"unknown transform {kind!r}")


class FeatureAssembler:
    """Resolves pre/post city homes and distances for strong pairs.

    The representative point of a user's month-city is the unweighted
    coordinate centroid of the distinct towers the user used in that city
    that month (outgoing records carry the user's own tower).
    """

    def __init__(self, dataset: Dataset, seed: int = 0, pre_t: int = -1, post_t: int = 2):
        self.dataset = dataset
        self.seed = seed
        self.pre_t = pre_t
        self.post_t = post_t

    def _tower_usage(
        self, user_months: set[tuple[int, int]]
    ) -> dict[tuple[int, int], np.ndarray]:
        ds = self.dataset
        out_rows = np.flatnonzero((ds.direction == DIR_OUT) & (ds.tower >= 0))
        users = ds.origin[out_rows].astype(np.int64)
        months = ds.month[out_rows].astype(np.int64)
        towers = ds.tower[out_rows].astype(np.int64)
        wanted_users = np.asarray(sorted({u for u, _ in user_months}), dtype=np.int64)
        hit = np.isin(users, wanted_users)
        users, months, towers = users[hit], months[hit], towers[hit]
        n_towers = max(len(ds.tower_names), 1)
        packed = (users * ds.window.n_months + months) * n_towers + towers
        uniq = np.unique(packed)
        usage: dict[tuple[int, int], list[int]] = {}
        for k in uniq:
            k = int(k)
            tower = k % n_towers
            um = k // n_towers
            key = (um // ds.window.n_months, um % ds.window.n_months)
            if key in user_months:
                usage.setdefault(key, []).append(tower)
        return {k: np.asarray(v, dtype=np.int64) for k, v in usage.items()}

    def _point(
        self,
        usage: Mapping[tuple[int, int], np.ndarray],
        user_code: int,
        month0: int,
        city: str | None,
    ) -> tuple[float, float] | None:
        if city is None:
            return None
        ds = self.dataset
        city_code = ds.city_names.index(city) if city in ds.city_names else -1
        towers = usage.get((user_code, month0))
        if towers is None or city_code < 0:
            return None
        in_city = towers[ds.tower_city[towers] == city_code]
        if in_city.size == 0:
            return None
        return (
            float(ds.tower_lat[in_city].mean()),
            float(ds.tower_lon[in_city].mean()),
        )

    def assemble(
        self,
        pairs: Sequence[StrongPair],
        summaries: Sequence[PrePostSummary],
    ) -> tuple[list[FeatureRow], list[tuple[str, str, str]]]:
        """Feature rows for each pair; unresolvable pairs are dropped with a reason."""
        ds = self.dataset
        requests = []
        for p in pairs:
            pre_m0 = p.m - 1 + self.pre_t
            post_m0 = p.m - 1 + self.post_t
            requests.append((p.ego, pre_m0, p.ego_status.province_from))
            requests.append((p.ego, post_m0, p.ego_status.province_to))
            requests.append((p.alter, pre_m0, p.alter_status.province_from))
            requests.append((p.alter, post_m0, p.alter_status.province_from))
        city_homes = compute_city_homes(ds, requests, self.seed)
        user_months = {
            (ds.user_index[u], m0) for u, m0, _ in requests if u in ds.user_index
        }
        usage = self._tower_usage(user_months)

        rows: list[FeatureRow] = []
        dropped: list[tuple[str, str, str]] = []
        for p, summary in zip(pairs, summaries):
            pre_m0 = p.m - 1 + self.pre_t
            post_m0 = p.m - 1 + self.post_t
            points = {}
            failure = None
            for who, user, month0 in (
                ("ego_pre", p.ego, pre_m0),
                ("ego_post", p.ego, post_m0),
                ("alter_pre", p.alter, pre_m0),
                ("alter_post", p.alter, post_m0),
            ):
                home = city_homes.get((user, month0))
                point = (
                    self._point(usage, ds.user_index[user], month0, home.city)
                    if home is not None
                    else None
                )
                if point is None:
                    failure = f"unresolved_{who}_city"
                    break
                points[who] = point
            if failure is not None:
                dropped.append((p.ego, p.alter, failure))
                continue
            ego_profile = ds.profiles[p.ego]
            alter_profile = ds.profiles[p.alter]
            dist_move = great_circle_km(points["ego_pre"], points["ego_post"])
            ea_pre = great_circle_km(points["ego_pre"], points["alter_pre"])
            ea_post = great_circle_km(points["ego_post"], points["alter_post"])
            tie = ea_post == ea_pre
            rows.append(
                FeatureRow(
                    ego=p.ego,
                    alter=p.alter,
                    m=p.m,
                    count_pre=summary.pre_count,
                    frac_pre=summary.pre_frac,
                    age_ego=float(ego_profile.age or 0),
                    age_diff=float((ego_profile.age or 0) - (alter_profile.age or 0)),
                    gender_ego=ego_profile.gender or "F",
                    gender_diff=SAME
                    if ego_profile.gender == alter_profile.gender
                    else OPPOSITE,
                    distance_move=dist_move,
                    distance_ea_pre=ea_pre,
                    direction_move=TOWARDS if ea_post <= ea_pre else AWAY,
                    recip_pre=summary.pre_recip,
                    count_post=summary.post_count,
                    frac_post=summary.post_frac,
                    decay_count=summary.direction_count == DECAY,
                    decay_frac=summary.direction_frac == DECAY,
                    abs_dist_change=abs(ea_post - ea_pre),
                    distance_ea_post=ea_post,
                    direction_tie=tie,
                )
            )
        return rows, dropped


@dataclass
class DesignMatrices:
    X_train: np.ndarray
    X_test: np.ndarray
    y_train: np.ndarray  # transformed scale (fitting scale)
    y_test: np.ndarray  # transformed scale
    y_test_original: np.ndarray
    columns: list[str]
    groups: list[tuple[str, list[int]]]  # feature name -> column indices
    back_transform: Callable[[np.ndarray], np.ndarray]
    target: str
    target_transform: str
    n_logit_capped: int


def _feature_matrix(
    rows: Sequence[FeatureRow],
    features: Sequence[str],
    spec: TransformSpec,
) -> tuple[np.ndarray, list[str], list[tuple[str, list[int]]], int]:
    columns: list[np.ndarray] = []
    names: list[str] = []
    groups: list[tuple[str, list[int]]] = []
    capped = 0
    for feature in features:
        if feature in CATEGORICAL_LEVELS:
            levels = CATEGORICAL_LEVELS[feature]
            start = len(columns)
            for level in levels[1:]:  # first level is the baseline
                values = np.array(
                    [1.0 if getattr(r, feature) == level else 0.0 for r in rows]
                )
                columns.append(values)
                names.append(f"{feature}={level}")
            groups.append((feature, list(range(start, len(columns)))))
        else:
            raw = np.array([getattr(r, feature) for r in rows], dtype=float)
            col, n_cap = transform_column(raw, spec.kind(feature), spec)
            capped += n_cap
            groups.append((feature, [len(columns)]))
            columns.append(col)
            names.append(feature)
    X = np.stack(columns, axis=1) if columns else np.zeros((len(rows), 0))
    return X, names, groups, capped


def build_design(
    train_rows: Sequence[FeatureRow],
    test_rows: Sequence[FeatureRow],
    features: Sequence[str],
    spec: TransformSpec,
    target: str,
    target_transform: str = "none",
) -> DesignMatrices:
    """Transform, dummy-encode (k-1), and standardize with train statistics only."""
    X_train, names, groups, capped_a = _feature_matrix(train_rows, features, spec)
    X_test, _, _, capped_b = _feature_matrix(test_rows, features, spec)
    mean = X_train.mean(axis=0) if len(train_rows) else np.zeros(X_train.shape[1])
    sd = X_train.std(axis=0) if len(train_rows) else np.ones(X_train.shape[1])
    sd = np.where(sd == 0.0, 1.0, sd)
    X_train = (X_train - mean) / sd
    X_test = (X_test - mean) / sd

    y_train_raw = np.array([getattr(r, target) for r in train_rows], dtype=float)
    y_test_raw = np.array([getattr(r, target) for r in test_rows], dtype=float)
    if target in CLASSIFICATION_TARGETS:
        if target_transform != "none":
            raise ValueError("binary targets take no transform")
        y_train, y_test = y_train_raw, y_test_raw
        capped = capped_a + capped_b
    else:
        y_train, cap_tr = transform_column(y_train_raw, target_transform, spec)
        y_test, cap_te = transform_column(y_test_raw, target_transform, spec)
        capped = capped_a + capped_b + cap_tr + cap_te
    return DesignMatrices(
        X_train=X_train,
        X_test=X_test,
        y_train=y_train,
        y_test=y_test,
        y_test_original=y_test_raw,
        columns=names,
        groups=groups,
        back_transform=back_transform_fn(target_transform),
        target=target,
        target_transform=target_transform,
        n_logit_capped=capped,
    )


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def predictor_correlations(rows: Sequence[FeatureRow]) -> list[list[str]]:
    """Pairwise correlation table among predictors plus the distance-change
    diagnostic: Pearson and Spearman for numeric pairs, point-biserial when
    one side is categorical (binary-coded)."""
    from .series import spearman

    numeric = list(NUMERIC_FEATURES) + ["abs_dist_change"]
    binary = list(CATEGORICAL_LEVELS)
    table = [["feature_a", "feature_b", "pearson", "spearman", "point_biserial"]]
    values: dict[str, np.ndarray] = {}
    for f in numeric:
        values[f] = np.array([getattr(r, f) for r in rows], dtype=float)
    for f in binary:
        levels = CATEGORICAL_LEVELS[f]
        values[f] = np.array(
            [1.0 if getattr(r, f) == levels[1] else 0.0 for r in rows]
        )
    everything = numeric + binary
    for i, fa in enumerate(everything):
        for fb in everything[i + 1 :]:
            xa, xb = values[fa], values[fb]
            pearson = _pearson(xa, xb)
            is_binary = fa in binary or fb in binary
            rho = float("nan") if is_binary else spearman(xa, xb)
            pb = pearson if is_binary else float("nan")
            table.append(
                [
                    fa,
                    fb,
                    "" if math.isnan(pearson) else repr(pearson),
                    "" if math.isnan(rho) else repr(rho),
                    "" if math.isnan(pb) else repr(pb),
                ]
            )
    return table
