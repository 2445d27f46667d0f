"""Home-location trajectories and mover classification.

Locations are inferred from outgoing events only (the event carries the
origin tower). Unknown locations compete as a category in every modal vote,
and ties are broken by a seeded uniform choice derived per (user, day) or
per (user, month), so any execution order gives identical results.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from itertools import groupby
from typing import Mapping, Sequence

import numpy as np

from ._rand import derive_seed
from .records import DIR_OUT, Dataset

MOVER = "mover"
NON_MOVER = "non_mover"
UNKNOWN = "unknown"

WEEKDAYS_MON_FRI = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class HomeTrajectory:
    """Per-user monthly home provinces; ``None`` marks an unknown month."""

    user: str
    months: tuple[str | None, ...]


@dataclass(frozen=True)
class MoverStatus:
    status: str  # MOVER | NON_MOVER | UNKNOWN
    province_from: str | None = None
    province_to: str | None = None
    move_month: int | None = None  # months spent in the origin province (1-based)

    @classmethod
    def mover(cls, province_from: str, province_to: str, m: int) -> "MoverStatus":
        return cls(MOVER, province_from, province_to, m)

    @classmethod
    def non_mover(cls, province: str) -> "MoverStatus":
        return cls(NON_MOVER, province_from=province, province_to=province)

    @classmethod
    def unknown(cls) -> "MoverStatus":
        return cls(UNKNOWN)


@dataclass(frozen=True)
class CityHome:
    user: str
    month: int  # 0-based window month
    city: str | None
    province_constrained: bool = False


def modal_value(values: Sequence[str | None], rng: random.Random) -> str | None:
    """Most frequent value, unknown (None) competing; ties broken uniformly."""
    counts: dict[str | None, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    if not counts:
        return None
    best = max(counts.values())
    winners = sorted(
        (k for k, c in counts.items() if c == best),
        key=lambda k: (k is not None, k or ""),
    )
    if len(winners) == 1:
        return winners[0]
    return winners[rng.randrange(len(winners))]


def daily_modal_province(
    provinces: Sequence[str | None], seed: int, user: str, day: int
) -> str | None:
    """Daily most common province over one user's outgoing events on one day."""
    if not provinces:
        return None
    return modal_value(provinces, random.Random(derive_seed(seed, "daily", user, day)))


def monthly_home(
    daily: Mapping[int, str | None],
    seed: int,
    user: str,
    month: int,
    weekdays: Sequence[int] = WEEKDAYS_MON_FRI,
) -> str | None:
    """Monthly home: modal value of the weekday daily locations.

    ``daily`` maps day ordinals (days since epoch) to that day's modal
    location. Months with no weekday entries resolve to unknown.
    """
    wd = set(weekdays)
    values = [v for d, v in daily.items() if (d + 3) % 7 in wd]
    if not values:
        return None
    return modal_value(values, random.Random(derive_seed(seed, "monthly", user, month)))


def classify_trajectory(months: Sequence[str | None]) -> MoverStatus:
    """Classify a home-location vector by its run-length encoding.

    One run of a known province is a non-mover; two runs of distinct known
    provinces make a mover whose move month is the first run's length. Any
    unknown entry, third run, or return trip leaves the user unclassified.
    """
    runs = [(value, sum(1 for _ in grp)) for value, grp in groupby(months)]
    if any(value is None for value, _ in runs):
        return MoverStatus.unknown()
    if len(runs) == 1:
        return MoverStatus.non_mover(runs[0][0])
    if len(runs) == 2 and runs[0][0] != runs[1][0]:
        return MoverStatus.mover(runs[0][0], runs[1][0], runs[0][1])
    return MoverStatus.unknown()


def min_stay_ok(status: MoverStatus, min_months: int = 4, total_months: int = 24) -> bool:
    """True iff a mover spent at least ``min_months`` in both home locations."""
    if status.status != MOVER:
        raise ValueError("min_stay_ok is defined for movers only")
    m = status.move_month or 0
    return m >= min_months and (total_months - m) >= min_months


def _grouped_modal(
    keys_a: np.ndarray,
    keys_b: np.ndarray,
    values: np.ndarray,
    tie_rng: "_TieBreaker",
    value_names: Sequence[str],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Modal ``values`` per (a, b) group; -1 encodes the unknown category.

    Returns (group_a, group_b, modal_value) arrays, one row per group.
    The fast path never loops in Python; only tied groups do.
    """
    if keys_a.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    order = np.lexsort((values, keys_b, keys_a))
    a, b, v = keys_a[order], keys_b[order], values[order]
    new_row = np.ones(a.size, dtype=bool)
    new_row[1:] = (a[1:] != a[:-1]) | (b[1:] != b[:-1]) | (v[1:] != v[:-1])
    starts = np.flatnonzero(new_row)
    counts = np.diff(np.append(starts, a.size))
    ra, rb, rv = a[starts], b[starts], v[starts]

    grp_new = np.ones(starts.size, dtype=bool)
    grp_new[1:] = (ra[1:] != ra[:-1]) | (rb[1:] != rb[:-1])
    grp_id = np.cumsum(grp_new) - 1
    n_groups = int(grp_id[-1]) + 1
    grp_max = np.zeros(n_groups, dtype=counts.dtype)
    np.maximum.at(grp_max, grp_id, counts)
    is_top = counts == grp_max[grp_id]
    top_per_group = np.zeros(n_groups, dtype=np.int64)
    np.add.at(top_per_group, grp_id, is_top.astype(np.int64))

    grp_starts = np.flatnonzero(grp_new)
    out_a = ra[grp_starts]
    out_b = rb[grp_starts]
    out_v = np.empty(n_groups, dtype=np.int64)
    unique_top = top_per_group == 1
    first_top = np.full(n_groups, -1, dtype=np.int64)
    top_rows = np.flatnonzero(is_top)
    # Last write wins; for unique-top groups there is exactly one row anyway.
    first_top[grp_id[top_rows]] = top_rows
    out_v[unique_top] = rv[first_top[unique_top]]

    tie_groups = np.flatnonzero(~unique_top)
    if tie_groups.size:
        tg = grp_id[top_rows]
        # Candidate order matches modal_value: unknown first, then by name.
        def sort_key(code: int) -> tuple[bool, str]:
            return (code >= 0, value_names[code] if code >= 0 else "")

        for g in tie_groups:
            lo = np.searchsorted(tg, g, side="left")
            hi = np.searchsorted(tg, g, side="right")
            cands = sorted((int(rv[r]) for r in top_rows[lo:hi]), key=sort_key)
            rng = tie_rng.make(int(out_a[g]), int(out_b[g]))
            out_v[g] = cands[rng.randrange(len(cands))]
    return out_a, out_b, out_v


class _TieBreaker:
    def __init__(self, seed: int, label: str, users: Sequence[str]) -> None:
        self.seed = seed
        self.label = label
        self.users = users

    def make(self, user_code: int, context: int) -> random.Random:
        return random.Random(
            derive_seed(self.seed, self.label, self.users[user_code], context)
        )


def compute_trajectories(
    dataset: Dataset,
    seed: int,
    weekdays: Sequence[int] = WEEKDAYS_MON_FRI,
    night_only: tuple[int, int] | None = None,
) -> dict[str, HomeTrajectory]:
    """Infer the per-user monthly home-province vector for every observed user.

    ``night_only`` optionally restricts events to hours [start, end) (wrapping
    midnight) before inference; the default uses all-day activity.
    """
    n_months = dataset.window.n_months
    mask = dataset.direction == DIR_OUT
    if night_only is not None:
        hour = ((dataset.ts % 86400) // 3600).astype(np.int64)
        start, end = night_only
        in_night = (hour >= start) | (hour < end) if start > end else (hour >= start) & (hour < end)
        mask = mask & in_night
    rows = np.flatnonzero(mask)
    users_arr = dataset.origin[rows].astype(np.int64)
    days = dataset.day[rows]
    tower = dataset.tower[rows]
    prov = np.where(tower >= 0, dataset.tower_province[np.maximum(tower, 0)], -1).astype(
        np.int64
    )

    d_user, d_day, d_prov = _grouped_modal(
        users_arr, days, prov, _TieBreaker(seed, "daily", dataset.users),
        dataset.province_names,
    )
    wd = np.isin((d_day + 3) % 7, np.asarray(list(weekdays)))
    d_user, d_day, d_prov = d_user[wd], d_day[wd], d_prov[wd]
    d_month = (
        d_day.astype("datetime64[D]").astype("datetime64[M]").astype(np.int64)
        - ((dataset.window.year - 1970) * 12 + dataset.window.month - 1)
    )
    m_user, m_month, m_prov = _grouped_modal(
        d_user, d_month, d_prov, _TieBreaker(seed, "monthly", dataset.users),
        dataset.province_names,
    )

    grid = np.full((len(dataset.users), n_months), -1, dtype=np.int64)
    valid = (m_month >= 0) & (m_month < n_months)
    grid[m_user[valid], m_month[valid]] = m_prov[valid]

    observed = np.zeros(len(dataset.users), dtype=bool)
    observed[dataset.origin] = True
    observed[dataset.peer] = True
    names = dataset.province_names
    out: dict[str, HomeTrajectory] = {}
    for u in np.flatnonzero(observed):
        months_t = tuple(names[p] if p >= 0 else None for p in grid[u])
        out[dataset.users[u]] = HomeTrajectory(dataset.users[u], months_t)
    return out


def classify_all(trajectories: Mapping[str, HomeTrajectory]) -> dict[str, MoverStatus]:
    return {user: classify_trajectory(t.months) for user, t in trajectories.items()}


def compute_city_homes(
    dataset: Dataset,
    requests: Sequence[tuple[str, int, str]],
    seed: int,
    weekdays: Sequence[int] = WEEKDAYS_MON_FRI,
) -> dict[tuple[str, int], CityHome]:
    """City-level home for each requested (user, 0-based month, home_province).

    Runs the daily/monthly modal procedure on city codes. When the winning
    city lies outside the month's home province, the modal city is recounted
    over that month's records restricted to the home province and the result
    is flagged ``province_constrained`` (months with no in-province records
    resolve to an unknown city).
    """
    if not requests:
        return {}
    wanted_users = {dataset.user_index[u] for u, _, _ in requests if u in dataset.user_index}
    mask = (dataset.direction == DIR_OUT) & np.isin(
        dataset.origin, np.fromiter(wanted_users, dtype=np.int64, count=len(wanted_users))
    )
    rows = np.flatnonzero(mask)
    users_arr = dataset.origin[rows].astype(np.int64)
    days = dataset.day[rows]
    months = dataset.month[rows].astype(np.int64)
    tower = dataset.tower[rows]
    city = np.where(tower >= 0, dataset.tower_city[np.maximum(tower, 0)], -1).astype(np.int64)

    d_user, d_day, d_city = _grouped_modal(
        users_arr, days, city, _TieBreaker(seed, "daily-city", dataset.users),
        dataset.city_names,
    )
    wd = np.isin((d_day + 3) % 7, np.asarray(list(weekdays)))
    d_user, d_day, d_city = d_user[wd], d_day[wd], d_city[wd]
    d_month = (
        d_day.astype("datetime64[D]").astype("datetime64[M]").astype(np.int64)
        - ((dataset.window.year - 1970) * 12 + dataset.window.month - 1)
    )
    m_user, m_month, m_city = _grouped_modal(
        d_user, d_month, d_city, _TieBreaker(seed, "monthly-city", dataset.users),
        dataset.city_names,
    )
    monthly: dict[tuple[int, int], int] = {
        (int(u), int(mo)): int(c) for u, mo, c in zip(m_user, m_month, m_city)
    }

    prov_index = {p: i for i, p in enumerate(dataset.province_names)}
    out: dict[tuple[str, int], CityHome] = {}
    for user, month, home_prov in requests:
        u = dataset.user_index.get(user, -1)
        home_p = prov_index.get(home_prov, -1)
        winner = monthly.get((u, month), -1)
        if (
            winner >= 0
            and home_p >= 0
            and int(dataset.city_province[winner]) == home_p
        ):
            out[(user, month)] = CityHome(user, month, dataset.city_names[winner], False)
            continue
        # Constrained recount over the month's records inside the home province.
        sel = (
            (users_arr == u)
            & (months == month)
            & (city >= 0)
        )
        cities = city[sel]
        cities = cities[dataset.city_province[cities] == home_p] if home_p >= 0 else cities[:0]
        if cities.size == 0:
            out[(user, month)] = CityHome(user, month, None, True)
            continue
        values = [dataset.city_names[c] for c in cities]
        rng = random.Random(derive_seed(seed, "city-constrained", user, month))
        out[(user, month)] = CityHome(user, month, modal_value(values, rng), True)
    return out


def trajectory_rows(trajectories: Mapping[str, HomeTrajectory]) -> list[list[str]]:
    """Rows for the ``user_id, m01..m24`` trajectory table."""
    rows = []
    for user in sorted(trajectories):
        months = trajectories[user].months
        rows.append([user] + [m if m is not None else "" for m in months])
    return rows


def status_rows(statuses: Mapping[str, MoverStatus]) -> list[list[str]]:
    """Rows for the ``user_id, status, from, to, m`` table."""
    rows = []
    for user in sorted(statuses):
        s = statuses[user]
        rows.append(
            [
                user,
                s.status,
                s.province_from or "",
                s.province_to or "",
                str(s.move_month) if s.move_month is not None else "",
            ]
        )
    return rows
