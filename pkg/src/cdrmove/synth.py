"""Seeded synthetic CDR generator with ground truth for every pipeline stage.

Event counts per pair-month are Poisson with a controllable rate process:
a per-pair lognormal base rate, a smooth AR(1) lognormal drift, and a sharp
rise/decay regime multiplier that switches exactly at the true moving month
boundary. Every user places one weekday anchor SMS per month so that, with
noise off, trajectories are fully known and activity filters always pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._rand import derive_seed
from .config import ConfigError as _ConfigError
from .homes import MOVER, MoverStatus
from .records import MonthWindow
from .ties import StrongPair

RISE = "rise"
DECAY = "decay"


class ConfigError(_ConfigError):
    """Raised for infeasible synthetic configurations."""


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 400
    mover_fraction: float = 0.013
    months: int = 24
    window_start: tuple[int, int] = (2008, 1)
    n_provinces: int = 6
    cities_per_province: int = 2
    towers_per_city: int = 2
    age_range: tuple[int, int] = (18, 80)
    unknown_demographics_fraction: float = 0.0
    bg_call_rate: float = 3.0
    bg_sms_rate: float = 1.0
    planted_ties_per_mover: int = 1
    control_ties: int = 0
    pair_rate_median: float = 12.0
    pair_rate_sigma: float = 0.35
    regime_delta: float = 0.5
    rise_prob: float = 0.5
    rate_drift_phi: float = 0.9
    rate_drift_sigma: float = 0.2
    direction_split_range: tuple[float, float] = (0.35, 0.65)
    silent_month_prob: float = 0.0
    travel_noise_prob: float = 0.0
    mirror_legs: bool = True
    move_month_range: tuple[int, int] = (5, 20)
    seed: int = 0


@dataclass
class GroundTruth:
    users: dict[str, dict]
    pairs: list[dict]
    control_pairs: list[dict]
    config: dict = field(default_factory=dict)

    def movers(self) -> dict[str, dict]:
        return {u: info for u, info in self.users.items() if info["status"] == MOVER}


def _layout(config: SynthConfig):
    """Provinces on a coarse grid, cities jittered inside, towers inside cities."""
    provinces = []
    cities = []  # (name, province, lat, lon)
    towers = []  # (name, lat, lon, province, city)
    side = int(math.ceil(math.sqrt(config.n_provinces)))
    for p in range(config.n_provinces):
        pname = f"P{p + 1:02d}"
        provinces.append(pname)
        base_lat = 38.0 + 2.2 * (p // side)
        base_lon = 2.2 * (p % side)
        for c in range(config.cities_per_province):
            cname = f"{pname}C{c + 1}"
            lat = base_lat + 0.35 * c
            lon = base_lon + 0.25 * (c % 2)
            cities.append((cname, pname, lat, lon))
            for t in range(config.towers_per_city):
                towers.append(
                    (
                        f"T_{cname}_{t + 1}",
                        lat + 0.01 * t,
                        lon + 0.008 * ((t % 3) - 1),
                        pname,
                        cname,
                    )
                )
    if not towers:
        raise ConfigError("layout produced no towers")
    return provinces, cities, towers


def sample_month_counts(rng: np.random.Generator, rates: np.ndarray) -> np.ndarray:
    """Poisson event counts for a vector of monthly rates."""
    return rng.poisson(np.maximum(rates, 0.0))


def _drift(rng: np.random.Generator, months: int, phi: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) log-rate drift with marginal standard deviation sigma."""
    if sigma <= 0.0:
        return np.zeros(months)
    eta = np.empty(months)
    eta[0] = rng.normal(0.0, sigma)
    innovation_sd = sigma * math.sqrt(max(1.0 - phi * phi, 0.0))
    for t in range(1, months):
        eta[t] = phi * eta[t - 1] + rng.normal(0.0, innovation_sd)
    return eta


class _EventBuffer:
    COLUMNS = ("origin", "peer", "kind", "ts", "direction", "tower")
    DTYPES = (np.int32, np.int32, np.int8, np.int64, np.int8, np.int32)

    def __init__(self) -> None:
        self.blocks: dict[str, list[np.ndarray]] = {c: [] for c in self.COLUMNS}

    def add(self, origin, peer, kind, ts, direction, tower) -> None:
        ts = np.asarray(ts, dtype=np.int64)
        n = ts.size
        if n == 0:
            return
        values = (origin, peer, kind, ts, direction, tower)
        for name, dtype, value in zip(self.COLUMNS, self.DTYPES, values):
            if np.isscalar(value):
                self.blocks[name].append(np.full(n, value, dtype=dtype))
            else:
                self.blocks[name].append(np.asarray(value, dtype=dtype))

    def concat(self) -> dict[str, np.ndarray]:
        out = {}
        for name, dtype in zip(self.COLUMNS, self.DTYPES):
            blocks = self.blocks[name]
            out[name] = (
                np.concatenate(blocks) if blocks else np.zeros(0, dtype=dtype)
            )
        return out


class _World:
    """Role assignment, homes, and vectorized tower lookup for the emitters."""

    def __init__(self, config: SynthConfig):
        self.config = config
        self.window = MonthWindow(*config.window_start, config.months)
        self.provinces, self.cities, self.towers = _layout(config)
        self.all_cities = [name for name, *_ in self.cities]
        self.city_index = {name: i for i, name in enumerate(self.all_cities)}
        self.city_province = {name: prov for name, prov, _, _ in self.cities}
        pools: dict[str, list[int]] = {}
        for idx, (_, _, _, _, city) in enumerate(self.towers):
            pools.setdefault(city, []).append(idx)
        self.city_tower_matrix = np.array(
            [pools[name] for name in self.all_cities], dtype=np.int64
        )
        self.province_cities: dict[str, list[str]] = {}
        for cname, pname, _, _ in self.cities:
            self.province_cities.setdefault(pname, []).append(cname)

        c = config
        self.users = [f"U{i + 1:06d}" for i in range(c.n_users)]
        n_movers = int(round(c.n_users * c.mover_fraction))
        need = n_movers * (1 + c.planted_ties_per_mover) + c.control_ties * 2
        if need > c.n_users:
            raise ConfigError(
                f"{c.n_users} users cannot host {n_movers} movers with planted ties "
                f"plus {c.control_ties} control pairs"
            )
        order = list(range(c.n_users))
        rng = np.random.default_rng(derive_seed(c.seed, "roles"))
        rng.shuffle(order)
        cursor = 0
        self.mover_idx = sorted(order[cursor : cursor + n_movers])
        cursor += n_movers
        self.mover_alters: dict[int, list[int]] = {}
        for ego in self.mover_idx:
            self.mover_alters[ego] = order[cursor : cursor + c.planted_ties_per_mover]
            cursor += c.planted_ties_per_mover
        self.control_idx = sorted(order[cursor : cursor + c.control_ties])
        cursor += c.control_ties
        self.control_alters: dict[int, list[int]] = {}
        for ego in self.control_idx:
            self.control_alters[ego] = order[cursor : cursor + 1]
            cursor += 1

        self.partners: dict[int, set[int]] = {i: set() for i in range(c.n_users)}
        for ego, alters in list(self.mover_alters.items()) + list(
            self.control_alters.items()
        ):
            for alter in alters:
                self.partners[ego].add(alter)
                self.partners[alter].add(ego)

        movers = set(self.mover_idx)
        self.pre_city = np.empty(c.n_users, dtype=np.int64)
        self.post_city = np.empty(c.n_users, dtype=np.int64)
        self.move_m = np.zeros(c.n_users, dtype=np.int64)  # 0 = non-mover
        for i in range(c.n_users):
            rng_u = np.random.default_rng(derive_seed(c.seed, "home", self.users[i]))
            if i in movers:
                p_from, p_to = rng_u.choice(len(self.provinces), size=2, replace=False)
                m = int(rng_u.integers(c.move_month_range[0], c.move_month_range[1] + 1))
                self.pre_city[i] = self.city_index[
                    self._pick_city(rng_u, self.provinces[p_from])
                ]
                self.post_city[i] = self.city_index[
                    self._pick_city(rng_u, self.provinces[p_to])
                ]
                self.move_m[i] = m
            else:
                prov = self.provinces[int(rng_u.integers(len(self.provinces)))]
                city = self.city_index[self._pick_city(rng_u, prov)]
                self.pre_city[i] = city
                self.post_city[i] = city

        self.silent = np.zeros((c.n_users, c.months), dtype=bool)
        if c.silent_month_prob > 0.0:
            for i in range(c.n_users):
                rng_s = np.random.default_rng(derive_seed(c.seed, "silent", self.users[i]))
                self.silent[i] = rng_s.uniform(size=c.months) < c.silent_month_prob

        starts = np.array(
            [int(self.window.month_start(mo).timestamp()) for mo in range(c.months + 1)],
            dtype=np.int64,
        )
        self.month_start = starts[:-1]
        self.month_span = np.diff(starts)
        anchor_days = []
        for mo in range(c.months):
            day = int(self.month_start[mo]) // 86400
            while (day + 3) % 7 >= 5:  # advance to the first weekday
                day += 1
            anchor_days.append(day)
        self.anchor_day = np.array(anchor_days, dtype=np.int64)

    def _pick_city(self, rng: np.random.Generator, province: str) -> str:
        options = self.province_cities[province]
        return options[int(rng.integers(len(options)))]

    def city_codes(self, users_vec: np.ndarray, months_vec: np.ndarray) -> np.ndarray:
        pre = months_vec < self.move_m[users_vec]
        return np.where(pre, self.pre_city[users_vec], self.post_city[users_vec])

    def towers_for(
        self, rng: np.random.Generator, users_vec: np.ndarray, months_vec: np.ndarray
    ) -> np.ndarray:
        """Tower per event, sampled within each user's current home city."""
        cities = self.city_codes(users_vec, months_vec)
        n = cities.size
        if self.config.travel_noise_prob > 0.0 and n:
            noisy = rng.uniform(size=n) < self.config.travel_noise_prob
            random_city = rng.integers(len(self.all_cities), size=n)
            cities = np.where(noisy, random_city, cities)
        picks = rng.integers(self.city_tower_matrix.shape[1], size=n)
        return self.city_tower_matrix[cities, picks]

    def uniform_ts(self, rng: np.random.Generator, months_vec: np.ndarray) -> np.ndarray:
        offsets = (rng.random(months_vec.size) * self.month_span[months_vec]).astype(
            np.int64
        )
        return self.month_start[months_vec] + offsets

    def province_of_city(self, code: int) -> str:
        return self.city_province[self.all_cities[code]]


def _emit_direction(
    world: _World,
    buffer: _EventBuffer,
    rng: np.random.Generator,
    caller: int,
    callee: int,
    counts: np.ndarray,
    kind: int,
) -> None:
    """All calls caller -> callee for one pair, every month at once."""
    months_rep = np.repeat(np.arange(world.config.months), counts)
    if months_rep.size == 0:
        return
    ts = world.uniform_ts(rng, months_rep)
    caller_vec = np.full(months_rep.size, caller, dtype=np.int64)
    buffer.add(caller, callee, kind, ts, 0, world.towers_for(rng, caller_vec, months_rep))
    if world.config.mirror_legs:
        callee_vec = np.full(months_rep.size, callee, dtype=np.int64)
        buffer.add(
            callee, caller, kind, ts, 1, world.towers_for(rng, callee_vec, months_rep)
        )


def _pair_events(
    world: _World,
    buffer: _EventBuffer,
    ego: int,
    alter: int,
    move_month: int,
    regime_mult: float,
) -> dict:
    c = world.config
    rng = np.random.default_rng(
        derive_seed(c.seed, "pair", world.users[ego], world.users[alter])
    )
    lam = c.pair_rate_median * math.exp(rng.normal(0.0, c.pair_rate_sigma))
    drift = _drift(rng, c.months, c.rate_drift_phi, c.rate_drift_sigma)
    p_dir = rng.uniform(*c.direction_split_range)
    mult = np.ones(c.months)
    if move_month > 0:
        mult[move_month:] = regime_mult
    rates = lam * mult * np.exp(drift)
    counts = sample_month_counts(rng, rates)
    forward = rng.binomial(counts, p_dir)
    backward = counts - forward
    forward[world.silent[ego]] = 0
    backward[world.silent[alter]] = 0
    _emit_direction(world, buffer, rng, ego, alter, forward, 0)
    _emit_direction(world, buffer, rng, alter, ego, backward, 0)
    return {
        "base_rate": lam,
        "p_dir": float(p_dir),
        "pre_rate": lam,
        "post_rate": lam * regime_mult,
    }


def _background_events(world: _World, buffer: _EventBuffer, user: int) -> None:
    """Anchor SMS plus Poisson background calls and SMS to random peers."""
    c = world.config
    rng = np.random.default_rng(derive_seed(c.seed, "bg", world.users[user]))
    partners = world.partners[user]
    candidates = np.array(
        [i for i in range(c.n_users) if i != user and i not in partners],
        dtype=np.int64,
    )
    active = ~world.silent[user]
    months_active = np.flatnonzero(active)

    anchor_ts = (
        world.anchor_day[months_active] * 86400
        + rng.integers(8 * 3600, 18 * 3600, size=months_active.size)
    )
    anchor_peers = candidates[rng.integers(len(candidates), size=months_active.size)]
    n_calls = rng.poisson(c.bg_call_rate, size=c.months)
    n_sms = rng.poisson(c.bg_sms_rate, size=c.months)
    n_calls[~active] = 0
    n_sms[~active] = 0

    for kind, counts, extra_ts, extra_peers, extra_months in (
        (1, n_sms, anchor_ts, anchor_peers, months_active),
        (0, n_calls, None, None, None),
    ):
        months_rep = np.repeat(np.arange(c.months), counts)
        ts = world.uniform_ts(rng, months_rep)
        peers = candidates[rng.integers(len(candidates), size=months_rep.size)]
        if extra_ts is not None:
            months_rep = np.concatenate([extra_months, months_rep])
            ts = np.concatenate([extra_ts, ts])
            peers = np.concatenate([extra_peers, peers])
        if months_rep.size == 0:
            continue
        user_vec = np.full(months_rep.size, user, dtype=np.int64)
        buffer.add(
            user, peers, kind, ts, 0, world.towers_for(rng, user_vec, months_rep)
        )
        if c.mirror_legs:
            buffer.add(
                peers, user, kind, ts, 1, world.towers_for(rng, peers, months_rep)
            )


def generate(config: SynthConfig, out_dir: str | Path) -> GroundTruth:
    """Write cdr.csv, demographics.csv, towers.csv, and ground_truth.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = _World(config)
    c = config

    truth_users: dict[str, dict] = {}
    for i, name in enumerate(world.users):
        if world.move_m[i] > 0:
            truth_users[name] = {
                "status": "mover",
                "from": world.province_of_city(int(world.pre_city[i])),
                "to": world.province_of_city(int(world.post_city[i])),
                "m": int(world.move_m[i]),
                "city_from": world.all_cities[int(world.pre_city[i])],
                "city_to": world.all_cities[int(world.post_city[i])],
            }
        else:
            truth_users[name] = {
                "status": "non_mover",
                "province": world.province_of_city(int(world.pre_city[i])),
                "city": world.all_cities[int(world.pre_city[i])],
            }

    buffer = _EventBuffer()
    truth_pairs: list[dict] = []
    for ego in world.mover_idx:
        m = int(world.move_m[ego])
        rng_r = np.random.default_rng(derive_seed(c.seed, "regime", world.users[ego]))
        for alter in world.mover_alters[ego]:
            regime = RISE if rng_r.uniform() < c.rise_prob else DECAY
            mult = 1.0 + c.regime_delta if regime == RISE else 1.0 - c.regime_delta
            info = _pair_events(world, buffer, ego, alter, m, mult)
            truth_pairs.append(
                {
                    "ego": world.users[ego],
                    "alter": world.users[alter],
                    "m": m,
                    "regime": regime,
                    **info,
                }
            )
    truth_controls: list[dict] = []
    for ego in world.control_idx:
        for alter in world.control_alters[ego]:
            info = _pair_events(world, buffer, ego, alter, 0, 1.0)
            truth_controls.append(
                {"ego": world.users[ego], "alter": world.users[alter], **info}
            )
    for user in range(c.n_users):
        _background_events(world, buffer, user)

    cols = buffer.concat()
    order = np.lexsort(
        (cols["direction"], cols["kind"], cols["peer"], cols["origin"], cols["ts"])
    )
    for key in cols:
        cols[key] = cols[key][order]

    _write_cdr(out / "cdr.csv", world, cols)
    _write_demographics(out / "demographics.csv", world)
    _write_towers(out / "towers.csv", world)
    truth = GroundTruth(
        users=truth_users,
        pairs=truth_pairs,
        control_pairs=truth_controls,
        config=asdict(config),
    )
    with open(out / "ground_truth.json", "w", encoding="utf-8") as handle:
        json.dump(
            {
                "users": truth.users,
                "pairs": truth.pairs,
                "control_pairs": truth.control_pairs,
                "config": truth.config,
            },
            handle,
            sort_keys=True,
            separators=(",", ":"),
        )
    return truth


def load_ground_truth(path: str | Path) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    return GroundTruth(
        users=data["users"],
        pairs=data["pairs"],
        control_pairs=data["control_pairs"],
        config=data.get("config", {}),
    )


def _write_cdr(path: Path, world: _World, cols: Mapping[str, np.ndarray]) -> None:
    kind_names = np.array(["call", "sms"])
    dir_names = np.array(["out", "in"])
    users = np.array(world.users)
    tower_names = np.array([t[0] for t in world.towers])
    n = len(cols["ts"])
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("origin;peer;kind;timestamp;direction;tower\n")
        chunk = 200_000
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            stamps = np.datetime_as_string(
                cols["ts"][lo:hi].astype("datetime64[s]"), unit="s"
            )
            rows = zip(
                users[cols["origin"][lo:hi]],
                users[cols["peer"][lo:hi]],
                kind_names[cols["kind"][lo:hi]],
                stamps,
                dir_names[cols["direction"][lo:hi]],
                tower_names[cols["tower"][lo:hi]],
            )
            handle.write("\n".join(";".join(r) for r in rows))
            if hi > lo:
                handle.write("\n")


def _write_demographics(path: Path, world: _World) -> None:
    c = world.config
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("user_id,age,gender\n")
        for name in world.users:
            rng = np.random.default_rng(derive_seed(c.seed, "demog", name))
            if rng.uniform() < c.unknown_demographics_fraction:
                handle.write(f"{name},,\n")
                continue
            age = int(rng.integers(c.age_range[0], c.age_range[1] + 1))
            gender = "F" if rng.uniform() < 0.5 else "M"
            handle.write(f"{name},{age},{gender}\n")


def _write_towers(path: Path, world: _World) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("tower_id,lat,lon,province,city\n")
        for name, lat, lon, province, city in world.towers:
            handle.write(f"{name},{lat!r},{lon!r},{province},{city}\n")


def emit_month_histogram(truth: GroundTruth) -> dict[int, int]:
    """Histogram of true moving months over all ground-truth movers."""
    hist: dict[int, int] = {}
    for info in truth.movers().values():
        hist[info["m"]] = hist.get(info["m"], 0) + 1
    return hist


def score_pipeline(
    truth: GroundTruth,
    statuses: Mapping[str, MoverStatus] | None = None,
    recovered_pairs: Sequence[StrongPair] | None = None,
    pair_directions: Mapping[tuple[str, str], str] | None = None,
    pair_counts: Mapping[tuple[str, str], tuple[float, float]] | None = None,
) -> dict:
    """Oracle report comparing pipeline outputs with the ground truth.

    ``pair_directions`` maps (ego, alter) to a predicted rise/decay label;
    ``pair_counts`` maps (ego, alter) to (pre_mean, post_mean) call counts for
    the log-log regression slope check.
    """
    report: dict = {}
    movers_true = truth.movers()
    if statuses is not None:
        detected = {u for u, s in statuses.items() if s.status == MOVER}
        true_set = set(movers_true)
        tp = len(detected & true_set)
        report["mover_precision"] = tp / len(detected) if detected else float("nan")
        report["mover_recall"] = tp / len(true_set) if true_set else float("nan")
        exact = sum(
            1
            for u in detected & true_set
            if statuses[u].move_month == movers_true[u]["m"]
        )
        report["month_exact_fraction"] = exact / tp if tp else float("nan")
        report["n_detected_movers"] = len(detected)
        report["n_true_movers"] = len(true_set)
    if recovered_pairs is not None:
        planted = {(p["ego"], p["alter"]) for p in truth.pairs}
        got = {(p.ego, p.alter) for p in recovered_pairs}
        report["planted_pair_recovery"] = (
            len(planted & got) / len(planted) if planted else float("nan")
        )
        report["n_planted_pairs"] = len(planted)
        report["n_recovered_pairs"] = len(got)
    if pair_directions is not None:
        regimes = {(p["ego"], p["alter"]): p["regime"] for p in truth.pairs}
        overlap = [key for key in pair_directions if key in regimes]
        if overlap:
            hits = sum(1 for key in overlap if pair_directions[key] == regimes[key])
            report["cluster_regime_accuracy"] = hits / len(overlap)
            report["n_cluster_scored"] = len(overlap)
    if pair_counts is not None:
        planted_keys = {(p["ego"], p["alter"]) for p in truth.pairs}
        xs, ys = [], []
        for key, (pre, post) in pair_counts.items():
            if key in planted_keys and pre > 0 and post > 0:
                xs.append(math.log(pre))
                ys.append(math.log(post))
        if len(xs) >= 3:
            x = np.asarray(xs)
            y = np.asarray(ys)
            slope = float(
                ((x - x.mean()) * (y - y.mean())).sum() / ((x - x.mean()) ** 2).sum()
            )
            report["log_log_slope"] = slope
    return report
