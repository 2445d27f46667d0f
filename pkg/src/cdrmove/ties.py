"""Alter ranking by monthly call fraction, strong-tie pair extraction, ego splits.

Ranking counts deduplicated calls only (made or received); activity counts
calls or SMS in either direction. Rank comparisons run on integer counts,
which share a month's denominator with the fractions, so ties are exact.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._rand import derive_seed
from .homes import MOVER, UNKNOWN, MoverStatus, min_stay_ok
from .records import KIND_CALL, Dataset, UserProfile


class SplitError(ValueError):
    """Raised when an ego-level train/test split is impossible."""


@dataclass(frozen=True)
class AlterFraction:
    alter: str
    count: int
    fraction: float


@dataclass(frozen=True)
class MonthlyAlterStats:
    ego: str
    month: int  # 1-based calendar month within the window
    counts: dict[str, int]
    total: int


@dataclass(frozen=True)
class PairFilterConfig:
    window_pre: int = 4
    window_post: int = 4
    top_k: int = 5
    persistence_months: int = 3
    min_stay: int = 4
    ranking: str = "competition"  # or "dense"
    activity: str = "per_month"  # or "window"


@dataclass(frozen=True)
class StrongPair:
    ego: str
    alter: str
    m: int  # 1-based moving month (months spent in the origin province)
    ego_status: MoverStatus
    alter_status: MoverStatus


@dataclass(frozen=True)
class PairExclusion:
    ego: str
    alter: str  # empty for ego-level exclusions
    m: int
    reason: str


class MonthlyCallIndex:
    """Per-(user, month) alter call counts and activity over a dataset.

    Every deduplicated call event feeds both parties' ego views. Expects the
    dataset to be deduplicated already when mirror legs are present.
    """

    def __init__(self, dataset: Dataset) -> None:
        self.dataset = dataset
        self.n_months = dataset.window.n_months
        calls = np.flatnonzero(dataset.kind == KIND_CALL)
        ego = np.concatenate([dataset.origin[calls], dataset.peer[calls]]).astype(np.int64)
        alter = np.concatenate([dataset.peer[calls], dataset.origin[calls]]).astype(np.int64)
        month = np.concatenate([dataset.month[calls], dataset.month[calls]]).astype(np.int64)
        key = ego * self.n_months + month
        order = np.lexsort((alter, key))
        key, alter = key[order], alter[order]
        new = np.ones(key.size, dtype=bool)
        new[1:] = (key[1:] != key[:-1]) | (alter[1:] != alter[:-1])
        starts = np.flatnonzero(new)
        self._row_key = key[starts]
        self._row_alter = alter[starts].astype(np.int32)
        self._row_count = np.diff(np.append(starts, key.size)).astype(np.int64)
        knew = np.ones(self._row_key.size, dtype=bool)
        knew[1:] = self._row_key[1:] != self._row_key[:-1]
        self._ustart = np.append(np.flatnonzero(knew), self._row_key.size)
        self._ukey = self._row_key[self._ustart[:-1]] if self._row_key.size else self._row_key
        self._utotal = (
            np.add.reduceat(self._row_count, self._ustart[:-1])
            if self._row_count.size
            else np.zeros(0, dtype=np.int64)
        )

        self.activity = np.zeros((len(dataset.users), self.n_months), dtype=bool)
        self.activity[dataset.origin, dataset.month] = True
        self.activity[dataset.peer, dataset.month] = True

    def _slice(self, ego_code: int, month0: int) -> tuple[np.ndarray, np.ndarray, int]:
        key = ego_code * self.n_months + month0
        pos = np.searchsorted(self._ukey, key)
        if pos >= self._ukey.size or self._ukey[pos] != key:
            return np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int64), 0
        lo, hi = self._ustart[pos], self._ustart[pos + 1]
        return self._row_alter[lo:hi], self._row_count[lo:hi], int(self._utotal[pos])

    def monthly_stats(self, ego: str, month: int) -> MonthlyAlterStats:
        """Call counts per alter for a 1-based window month."""
        code = self.dataset.user_index.get(ego, -1)
        alters, counts, total = self._slice(code, month - 1)
        names = self.dataset.users
        return MonthlyAlterStats(
            ego, month, {names[a]: int(c) for a, c in zip(alters, counts)}, total
        )

    def alter_fractions(self, ego: str, month: int) -> list[AlterFraction]:
        """Alters of an ego in a 1-based month, sorted by call fraction descending."""
        stats = self.monthly_stats(ego, month)
        if stats.total == 0:
            return []
        rows = [
            AlterFraction(alter, count, count / stats.total)
            for alter, count in stats.counts.items()
        ]
        rows.sort(key=lambda r: (-r.count, r.alter))
        return rows

    def top_alter_codes(self, ego_code: int, month0: int, k: int, ranking: str) -> set[int]:
        """Alter codes ranked in the top ``k`` for a 0-based month."""
        alters, counts, _ = self._slice(ego_code, month0)
        if alters.size == 0:
            return set()
        if ranking == "dense":
            distinct = np.unique(counts)[::-1]
            threshold = distinct[min(k, distinct.size) - 1]
        else:  # competition ("min") ranking
            if alters.size <= k:
                return set(int(a) for a in alters)
            threshold = np.sort(counts)[::-1][k - 1]
        return set(int(a) for a in alters[counts >= threshold])

    def active_all(self, user_code: int, month0_lo: int, month0_hi: int) -> bool:
        return bool(self.activity[user_code, month0_lo : month0_hi + 1].all())

    def active_any(self, user_code: int, month0_lo: int, month0_hi: int) -> bool:
        return bool(self.activity[user_code, month0_lo : month0_hi + 1].any())


def rank_alters(fractions: Sequence[AlterFraction]) -> dict[str, int]:
    """Competition ("min") ranks: tied fractions share the smallest applicable
    rank; the next distinct fraction ranks below all strictly-better alters."""
    ranks: dict[str, int] = {}
    values = [f.fraction for f in fractions]
    for f in fractions:
        ranks[f.alter] = 1 + sum(1 for v in values if v > f.fraction)
    return ranks


def _profile_known(profile: UserProfile | None) -> bool:
    return profile is not None and profile.age is not None and profile.gender is not None


def check_pair_filters(
    index: MonthlyCallIndex,
    statuses: Mapping[str, MoverStatus],
    ego: str,
    alter: str,
    m: int,
    config: PairFilterConfig,
) -> str | None:
    """First failing filter for a candidate (ego, alter, m), or None if eligible."""
    profiles = index.dataset.profiles
    alter_status = statuses.get(alter, MoverStatus.unknown())
    if alter_status.status == MOVER:
        return "alter_mover"
    if alter_status.status == UNKNOWN:
        return "alter_unknown_trajectory"
    if not _profile_known(profiles.get(ego)):
        return "ego_demographics"
    if not _profile_known(profiles.get(alter)):
        return "alter_demographics"
    lo0 = m - config.window_pre - 1
    hi0 = m + config.window_post - 1
    ego_code = index.dataset.user_index[ego]
    alter_code = index.dataset.user_index[alter]
    check = index.active_all if config.activity == "per_month" else index.active_any
    if not check(ego_code, lo0, hi0):
        return "ego_activity"
    if not check(alter_code, lo0, hi0):
        return "alter_activity"
    return None


def find_strong_pairs(
    index: MonthlyCallIndex,
    statuses: Mapping[str, MoverStatus],
    config: PairFilterConfig = PairFilterConfig(),
) -> tuple[list[StrongPair], list[PairExclusion]]:
    """Mover-ego / non-mover-alter pairs with a persistent top-k tie.

    A pair qualifies when the alter ranks in the ego's top ``top_k`` in each of
    the ``persistence_months`` months ending at the moving month, the alter is
    a non-mover, both users have known age and gender, and both are active in
    every month of the +/- window. Near-miss candidates (persistence passed,
    later filter failed) are returned with the excluding reason.
    """
    n_months = index.n_months
    pairs: list[StrongPair] = []
    exclusions: list[PairExclusion] = []
    for ego in sorted(statuses):
        status = statuses[ego]
        if status.status != MOVER:
            continue
        if not min_stay_ok(status, config.min_stay, n_months):
            continue
        m = status.move_month or 0
        if ego not in index.dataset.user_index:
            continue
        if m - config.window_pre < 1 or m + config.window_post > n_months:
            exclusions.append(PairExclusion(ego, "", m, "window"))
            continue
        first = m - config.persistence_months + 1
        if first < 1:
            exclusions.append(PairExclusion(ego, "", m, "window"))
            continue
        ego_code = index.dataset.user_index[ego]
        candidate_codes: set[int] | None = None
        for month in range(first, m + 1):
            top = index.top_alter_codes(ego_code, month - 1, config.top_k, config.ranking)
            candidate_codes = top if candidate_codes is None else candidate_codes & top
            if not candidate_codes:
                break
        if not candidate_codes:
            continue
        names = index.dataset.users
        for alter in sorted(names[c] for c in candidate_codes):
            reason = check_pair_filters(index, statuses, ego, alter, m, config)
            if reason is None:
                pairs.append(StrongPair(ego, alter, m, status, statuses[alter]))
            else:
                exclusions.append(PairExclusion(ego, alter, m, reason))
    return pairs, exclusions


def split_by_ego(
    pairs: Sequence[StrongPair], train_fraction: float = 0.8, seed: int = 0
) -> tuple[list[StrongPair], list[StrongPair]]:
    """Partition pairs by unique ego at the given fraction (egos never straddle)."""
    egos = sorted({p.ego for p in pairs})
    if len(egos) < 2:
        raise SplitError("need at least two unique egos to split")
    rng = random.Random(derive_seed(seed, "ego-split"))
    rng.shuffle(egos)
    n_train = min(max(int(round(train_fraction * len(egos))), 1), len(egos) - 1)
    train_egos = set(egos[:n_train])
    train = [p for p in pairs if p.ego in train_egos]
    test = [p for p in pairs if p.ego not in train_egos]
    return train, test


def pair_rows(
    pairs: Sequence[StrongPair],
    profiles: Mapping[str, UserProfile],
    split: Mapping[str, str] | None = None,
) -> list[list[str]]:
    """Rows for pairs.csv: identities, m, demographics, and the split side."""
    rows = []
    for p in pairs:
        ego_p, alter_p = profiles.get(p.ego), profiles.get(p.alter)
        rows.append(
            [
                p.ego,
                p.alter,
                str(p.m),
                str(ego_p.age) if ego_p and ego_p.age is not None else "",
                ego_p.gender or "" if ego_p else "",
                str(alter_p.age) if alter_p and alter_p.age is not None else "",
                alter_p.gender or "" if alter_p else "",
                p.ego_status.province_from or "",
                p.ego_status.province_to or "",
                (split or {}).get(p.ego, ""),
            ]
        )
    return rows
