"""Per-pair monthly series aligned to the moving month, and their statistics.

The moving month is t=0; series cover t in [-4, 4]. Counts are deduplicated
calls between the pair in either direction; fractions divide by all calls the
ego exchanged that month; reciprocity is (ego->alter - alter->ego) / total,
undefined (NaN) in months without pair calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .records import DIR_OUT, KIND_CALL, Dataset
from .ties import StrongPair

RISE = "rise"
DECAY = "decay"


@dataclass(frozen=True)
class PairSeries:
    pair: StrongPair
    t_axis: tuple[int, ...]
    count: np.ndarray  # int64, calls between ego and alter
    fraction: np.ndarray  # float64 in [0, 1]
    reciprocity: np.ndarray  # float64 in [-1, 1], NaN when undefined
    fraction_defined: np.ndarray  # False where the ego had no calls at all


@dataclass(frozen=True)
class StandardizedSeries:
    values: np.ndarray
    was_constant: bool


@dataclass(frozen=True)
class PrePostSummary:
    pre_count: float
    post_count: float
    pre_frac: float
    post_frac: float
    pre_recip: float
    direction_count: str  # RISE | DECAY
    direction_frac: str


def pair_series_from_counts(
    pair: StrongPair,
    ego_to_alter: Sequence[int],
    alter_to_ego: Sequence[int],
    ego_totals: Sequence[int],
    window_pre: int = 4,
    window_post: int = 4,
) -> PairSeries:
    """Assemble a PairSeries from per-t directed counts and ego monthly totals."""
    t_axis = tuple(range(-window_pre, window_post + 1))
    fwd = np.asarray(ego_to_alter, dtype=np.int64)
    bwd = np.asarray(alter_to_ego, dtype=np.int64)
    totals = np.asarray(ego_totals, dtype=np.int64)
    count = fwd + bwd
    defined = totals > 0
    fraction = np.zeros(len(t_axis))
    np.divide(count, totals, out=fraction, where=defined)
    with np.errstate(invalid="ignore"):
        reciprocity = np.where(count > 0, (fwd - bwd) / np.maximum(count, 1), np.nan)
    return PairSeries(pair, t_axis, count, fraction, reciprocity, defined)


class PairSeriesBuilder:
    """Extracts directed pair-month call counts and ego totals for given pairs."""

    def __init__(
        self,
        dataset: Dataset,
        pairs: Sequence[StrongPair],
        window_pre: int = 4,
        window_post: int = 4,
    ) -> None:
        self.window_pre = window_pre
        self.window_post = window_post
        self.n_months = dataset.window.n_months
        n_users = len(dataset.users)
        calls = np.flatnonzero(dataset.kind == KIND_CALL)
        origin = dataset.origin[calls].astype(np.int64)
        peer = dataset.peer[calls].astype(np.int64)
        month = dataset.month[calls].astype(np.int64)
        caller = np.where(dataset.direction[calls] == DIR_OUT, origin, peer)
        lo = np.minimum(origin, peer)
        hi = np.maximum(origin, peer)
        code = lo * n_users + hi

        self._pair_key: dict[tuple[str, str], int] = {}
        wanted_codes = []
        for p in pairs:
            e = dataset.user_index[p.ego]
            a = dataset.user_index[p.alter]
            c = int(min(e, a)) * n_users + int(max(e, a))
            self._pair_key[(p.ego, p.alter)] = c
            wanted_codes.append(c)
        wanted = np.unique(np.asarray(wanted_codes, dtype=np.int64))
        sel = np.isin(code, wanted) if wanted.size else np.zeros(code.size, dtype=bool)
        # Directed counts per (pair, month): row 0 = high-id caller, 1 = low-id.
        self._directed: dict[int, np.ndarray] = {}
        packed = (code[sel] * self.n_months + month[sel]) * 2 + (
            caller[sel] == lo[sel]
        )
        uniq, cnt = np.unique(packed, return_counts=True)
        for k, c in zip(uniq, cnt):
            k = int(k)
            is_lo = k & 1
            pm = k >> 1
            table = self._directed.get(pm // self.n_months)
            if table is None:
                table = np.zeros((2, self.n_months), dtype=np.int64)
                self._directed[pm // self.n_months] = table
            table[is_lo, pm % self.n_months] = int(c)

        ego_codes = np.asarray(
            sorted({dataset.user_index[p.ego] for p in pairs}), dtype=np.int64
        )
        self._ego_slot = {int(code_): i for i, code_ in enumerate(ego_codes)}
        self._totals = np.zeros((len(ego_codes), self.n_months), dtype=np.int64)
        for side in (origin, peer):
            hit = np.isin(side, ego_codes)
            slots = np.searchsorted(ego_codes, side[hit])
            np.add.at(self._totals, (slots, month[hit]), 1)
        self._user_index = dataset.user_index

    def build(self, pair: StrongPair) -> PairSeries:
        e = self._user_index[pair.ego]
        a = self._user_index[pair.alter]
        code = self._pair_key[(pair.ego, pair.alter)]
        table = self._directed.get(code, np.zeros((2, self.n_months), dtype=np.int64))
        ego_is_lo = e < a
        months0 = [pair.m - 1 + t for t in range(-self.window_pre, self.window_post + 1)]
        fwd = [int(table[1 if ego_is_lo else 0, mo]) for mo in months0]
        bwd = [int(table[0 if ego_is_lo else 1, mo]) for mo in months0]
        totals = [int(self._totals[self._ego_slot[e], mo]) for mo in months0]
        return pair_series_from_counts(
            pair, fwd, bwd, totals, self.window_pre, self.window_post
        )

    def build_all(self, pairs: Sequence[StrongPair]) -> list[PairSeries]:
        return [self.build(p) for p in pairs]


def standardize(values: Sequence[float]) -> StandardizedSeries:
    """Center and scale to population standard deviation 1; constant input
    maps to all zeros with ``was_constant`` set."""
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std())
    if sd == 0.0:
        return StandardizedSeries(np.zeros_like(arr), True)
    return StandardizedSeries((arr - arr.mean()) / sd, False)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with midranks for ties; NaN when undefined."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.size != ya.size or xa.size < 3:
        raise ValueError("spearman needs two equal-length vectors, n >= 3")
    rx = _midranks(xa)
    ry = _midranks(ya)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def month_correlation_matrix(
    series_list: Sequence[PairSeries], quantity: str
) -> np.ndarray:
    """Spearman correlation of the unstandardized quantity between months.

    Entry (s, t) correlates month s values with month t values across pairs;
    the diagonal is 1 and undefined cells are NaN.
    """
    if len(series_list) < 3:
        raise ValueError("month correlation needs at least 3 pairs")
    if quantity not in ("count", "fraction"):
        raise ValueError(f"unknown quantity {quantity!r}")
    X = np.stack([getattr(s, quantity) for s in series_list]).astype(float)
    d = X.shape[1]
    out = np.eye(d)
    for s in range(d):
        for t in range(s + 1, d):
            rho = spearman(X[:, s], X[:, t])
            out[s, t] = out[t, s] = rho
    return out


def summarize(series: PairSeries, include_t0: str = "neither") -> PrePostSummary:
    """Pre/post means and rise-or-decay directions.

    t=0 is excluded from both sides by default (``include_t0`` may claim it
    for "pre" or "post"). Undefined reciprocity months are skipped; if every
    pre month is undefined the mean defaults to 0. Equal pre and post means
    count as a rise (non-decay).
    """
    t = np.asarray(series.t_axis)
    pre = t < 0
    post = t > 0
    if include_t0 == "pre":
        pre = t <= 0
    elif include_t0 == "post":
        post = t >= 0
    elif include_t0 != "neither":
        raise ValueError(f"invalid include_t0 {include_t0!r}")
    pre_count = float(series.count[pre].mean())
    post_count = float(series.count[post].mean())
    pre_frac = float(series.fraction[pre].mean())
    post_frac = float(series.fraction[post].mean())
    recip_pre = series.reciprocity[pre]
    defined = ~np.isnan(recip_pre)
    pre_recip = float(recip_pre[defined].mean()) if defined.any() else 0.0
    return PrePostSummary(
        pre_count=pre_count,
        post_count=post_count,
        pre_frac=pre_frac,
        post_frac=post_frac,
        pre_recip=pre_recip,
        direction_count=DECAY if post_count < pre_count else RISE,
        direction_frac=DECAY if post_frac < pre_frac else RISE,
    )


def series_rows(series_list: Sequence[PairSeries]) -> list[list[str]]:
    """Rows for series.csv: pair identity, t, count, fraction, reciprocity."""
    rows = []
    for s in series_list:
        for i, t in enumerate(s.t_axis):
            recip = s.reciprocity[i]
            rows.append(
                [
                    s.pair.ego,
                    s.pair.alter,
                    str(t),
                    str(int(s.count[i])),
                    repr(float(s.fraction[i])),
                    "" if np.isnan(recip) else repr(float(recip)),
                ]
            )
    return rows


def matrix_rows(matrix: np.ndarray, t_axis: Sequence[int]) -> list[list[str]]:
    """Rows for a correlation-matrix csv with a t-axis header column."""
    rows = [["t"] + [str(t) for t in t_axis]]
    for i, t in enumerate(t_axis):
        rows.append(
            [str(t)]
            + ["" if np.isnan(v) else repr(float(v)) for v in matrix[i]]
        )
    return rows
