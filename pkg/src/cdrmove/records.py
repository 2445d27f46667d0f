"""CDR event tables, registries, and geodesic utilities.

Events are stored columnar (numpy arrays plus string vocabularies) so that
month-scale aggregations stay fast on multi-million-row inputs, while
:class:`CdrRecord` offers a per-row view for inspection and tests.
"""

from __future__ import annotations

import csv
import json
import math
from array import array
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0

KIND_CALL = 0
KIND_SMS = 1
DIR_OUT = 0
DIR_IN = 1

_KIND_NAMES = {"call": KIND_CALL, "sms": KIND_SMS}
_DIR_NAMES = {"out": DIR_OUT, "outgoing": DIR_OUT, "in": DIR_IN, "incoming": DIR_IN}
_KIND_LABELS = ("call", "sms")
_DIR_LABELS = ("out", "in")

CDR_FIELDS = ("origin", "peer", "kind", "timestamp", "direction", "tower")


class CdrError(Exception):
    """Base error for CDR ingestion problems."""


class SchemaMismatchError(CdrError):
    """Raised when a file obviously does not match the declared schema."""


class RegistryError(CdrError):
    """Raised for malformed tower-registry or demographics files."""


@dataclass(frozen=True)
class CdrRecord:
    """One call or SMS event as seen from one subscriber's log."""

    origin_user: str
    peer_user: str
    kind: str  # "call" | "sms"
    timestamp: datetime
    direction: str  # "out" | "in"
    tower: str | None


@dataclass(frozen=True)
class UserProfile:
    user: str
    age: int | None  # None = unknown; if known, 0 < age < 120
    gender: str | None  # "F" | "M" | None


@dataclass(frozen=True)
class TowerRecord:
    tower: str
    latitude: float
    longitude: float
    province: str | None
    city: str | None


@dataclass(frozen=True)
class MonthWindow:
    """Observation window: ``n_months`` calendar months starting at (year, month)."""

    year: int
    month: int
    n_months: int = 24

    def month_start(self, index: int) -> datetime:
        """Start of 0-based month ``index``, as a UTC datetime."""
        total = (self.year * 12 + self.month - 1) + index
        return datetime(total // 12, total % 12 + 1, 1, tzinfo=timezone.utc)

    @property
    def start_epoch(self) -> int:
        return int(self.month_start(0).timestamp())

    @property
    def end_epoch(self) -> int:
        return int(self.month_start(self.n_months).timestamp())

    def month_index(self, ts: datetime) -> int:
        """0-based month index of a timestamp; may fall outside [0, n_months)."""
        return (ts.year * 12 + ts.month - 1) - (self.year * 12 + self.month - 1)


@dataclass
class CdrSchema:
    """Column layout of a delimiter-separated CDR file (header row required)."""

    delimiter: str = ";"
    columns: dict[str, str] = field(
        default_factory=lambda: {name: name for name in CDR_FIELDS}
    )

    def resolve_indices(self, header: Sequence[str]) -> dict[str, int]:
        indices: dict[str, int] = {}
        for fld in CDR_FIELDS:
            col = self.columns.get(fld, fld)
            if col not in header:
                raise SchemaMismatchError(
                    f"column {col!r} (field {fld!r}) missing from header {list(header)}"
                )
            indices[fld] = header.index(col)
        return indices


class CdrFragment:
    """Append-only buffers for parsed CDR rows, merged at dataset assembly."""

    def __init__(self) -> None:
        self.origin: list[str] = []
        self.peer: list[str] = []
        self.kind = array("b")
        self.ts = array("q")
        self.direction = array("b")
        self.tower: list[str | None] = []
        self.n_malformed = 0
        self.n_parsed = 0

    def append(
        self,
        origin: str,
        peer: str,
        kind: int,
        ts: int,
        direction: int,
        tower: str | None,
    ) -> None:
        self.origin.append(origin)
        self.peer.append(peer)
        self.kind.append(kind)
        self.ts.append(ts)
        self.direction.append(direction)
        self.tower.append(tower)
        self.n_parsed += 1


def _parse_timestamp(text: str) -> int:
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_cdr_file(path: str | Path, schema: CdrSchema, window: MonthWindow) -> CdrFragment:
    """Parse one CDR file into a fragment, counting and skipping malformed rows.

    A row is malformed if a required field is missing or unparseable, if the
    two parties coincide, or if the timestamp falls outside the observation
    window. More than 50% malformed rows raises :class:`SchemaMismatchError`.
    """
    frag = CdrFragment()
    lo, hi = window.start_epoch, window.end_epoch
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatchError(f"{path}: empty file") from None
        idx = schema.resolve_indices(header)
        i_o, i_p = idx["origin"], idx["peer"]
        i_k, i_t = idx["kind"], idx["timestamp"]
        i_d, i_w = idx["direction"], idx["tower"]
        for row in reader:
            if not row:
                continue
            try:
                origin = row[i_o].strip()
                peer = row[i_p].strip()
                kind = _KIND_NAMES[row[i_k].strip().lower()]
                ts = _parse_timestamp(row[i_t].strip())
                direction = _DIR_NAMES[row[i_d].strip().lower()]
                tower_text = row[i_w].strip() if i_w < len(row) else ""
            except (IndexError, KeyError, ValueError):
                frag.n_malformed += 1
                continue
            if not origin or not peer or origin == peer or not (lo <= ts < hi):
                frag.n_malformed += 1
                continue
            frag.append(origin, peer, kind, ts, direction, tower_text or None)
    total = frag.n_parsed + frag.n_malformed
    if total > 0 and frag.n_malformed * 2 > total:
        raise SchemaMismatchError(
            f"{path}: {frag.n_malformed} of {total} rows malformed; "
            "check delimiter and column mapping"
        )
    return frag


def load_towers(path: str | Path) -> dict[str, TowerRecord]:
    """Load the tower registry (``tower_id,lat,lon,province,city``, comma-separated).

    Empty province/city cells mean unknown. A city without a province violates
    the registry invariant, so the city is demoted to unknown as well.
    """
    towers: dict[str, TowerRecord] = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["tower_id", "lat", "lon"]:
            raise RegistryError(f"{path}: expected header tower_id,lat,lon,province,city")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                tower = row[0].strip()
                lat = float(row[1])
                lon = float(row[2])
            except (IndexError, ValueError) as exc:
                raise RegistryError(f"{path}:{lineno}: bad tower row {row!r}") from exc
            if not tower or abs(lat) > 90.0 or abs(lon) > 180.0:
                raise RegistryError(f"{path}:{lineno}: invalid tower id or coordinates")
            province = row[3].strip() if len(row) > 3 and row[3].strip() else None
            city = row[4].strip() if len(row) > 4 and row[4].strip() else None
            if city is not None and province is None:
                city = None
            towers[tower] = TowerRecord(tower, lat, lon, province, city)
    return towers


def load_demographics(path: str | Path) -> dict[str, UserProfile]:
    """Load ``user_id,age,gender`` with empty cells meaning unknown.

    Ages outside (0, 120) and genders other than F/M are treated as unknown.
    """
    profiles: dict[str, UserProfile] = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or header[0].strip() != "user_id":
            raise RegistryError(f"{path}: expected header user_id,age,gender")
        for row in reader:
            if not row or not row[0].strip():
                continue
            user = row[0].strip()
            age: int | None = None
            if len(row) > 1 and row[1].strip():
                try:
                    age = int(row[1])
                except ValueError:
                    age = None
                else:
                    if not 0 < age < 120:
                        age = None
            gender = row[2].strip().upper() if len(row) > 2 and row[2].strip() else ""
            profiles[user] = UserProfile(user, age, gender if gender in ("F", "M") else None)
    return profiles


class Dataset:
    """Assembled, timestamp-sorted event table with registries attached.

    Columns (parallel arrays over records):
      origin, peer  int32 indices into ``users``
      kind          uint8 (0 call, 1 sms)
      ts            int64 epoch seconds (UTC)
      direction     uint8 (0 out, 1 in)
      tower         int32 index into ``tower_names``; -1 = absent

    Derived per record: ``month`` (0-based window month), ``day`` (days since
    epoch), ``weekday`` (Mon=0). Tower-level admin codes live in
    ``tower_province`` / ``tower_city`` (indices into the province/city
    vocabularies, -1 = unknown).
    """

    def __init__(
        self,
        users: list[str],
        origin: np.ndarray,
        peer: np.ndarray,
        kind: np.ndarray,
        ts: np.ndarray,
        direction: np.ndarray,
        tower: np.ndarray,
        tower_names: list[str],
        towers: dict[str, TowerRecord],
        profiles: dict[str, UserProfile],
        window: MonthWindow,
        n_malformed: int = 0,
    ) -> None:
        self.users = users
        self.user_index = {u: i for i, u in enumerate(users)}
        self.origin = origin
        self.peer = peer
        self.kind = kind
        self.ts = ts
        self.direction = direction
        self.tower = tower
        self.tower_names = tower_names
        self.towers = towers
        self.profiles = profiles
        self.window = window
        self.n_malformed = n_malformed
        self._build_derived()

    def _build_derived(self) -> None:
        ts64 = self.ts.astype("datetime64[s]")
        months = ts64.astype("datetime64[M]").astype(np.int64)
        start = (self.window.year - 1970) * 12 + (self.window.month - 1)
        self.month = (months - start).astype(np.int16)
        self.day = ts64.astype("datetime64[D]").astype(np.int64)
        self.weekday = ((self.day + 3) % 7).astype(np.uint8)  # 1970-01-01 is a Thursday

        provinces: list[str] = []
        cities: list[str] = []
        prov_index: dict[str, int] = {}
        city_index: dict[str, int] = {}
        n_towers = len(self.tower_names)
        self.tower_province = np.full(n_towers, -1, dtype=np.int32)
        self.tower_city = np.full(n_towers, -1, dtype=np.int32)
        self.tower_lat = np.full(n_towers, np.nan)
        self.tower_lon = np.full(n_towers, np.nan)
        city_prov: dict[int, int] = {}
        for t_idx, name in enumerate(self.tower_names):
            rec = self.towers.get(name)
            if rec is None:
                continue
            self.tower_lat[t_idx] = rec.latitude
            self.tower_lon[t_idx] = rec.longitude
            if rec.province is not None:
                p = prov_index.setdefault(rec.province, len(provinces))
                if p == len(provinces):
                    provinces.append(rec.province)
                self.tower_province[t_idx] = p
                if rec.city is not None:
                    c = city_index.setdefault(rec.city, len(cities))
                    if c == len(cities):
                        cities.append(rec.city)
                    self.tower_city[t_idx] = c
                    prev = city_prov.setdefault(c, p)
                    if prev != p:
                        raise RegistryError(
                            f"city {rec.city!r} mapped to two provinces "
                            f"({provinces[prev]!r}, {rec.province!r})"
                        )
        self.province_names = provinces
        self.city_names = cities
        self.city_province = np.array(
            [city_prov[c] for c in range(len(cities))], dtype=np.int32
        )

    def __len__(self) -> int:
        return len(self.ts)

    def record(self, i: int) -> CdrRecord:
        t = int(self.tower[i])
        return CdrRecord(
            origin_user=self.users[self.origin[i]],
            peer_user=self.users[self.peer[i]],
            kind=_KIND_LABELS[self.kind[i]],
            timestamp=datetime.fromtimestamp(int(self.ts[i]), tz=timezone.utc),
            direction=_DIR_LABELS[self.direction[i]],
            tower=self.tower_names[t] if t >= 0 else None,
        )

    def iter_records(self) -> Iterator[CdrRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def replace_rows(self, keep: np.ndarray) -> "Dataset":
        """New dataset with the given row selection; registries are shared."""
        return Dataset(
            users=self.users,
            origin=self.origin[keep],
            peer=self.peer[keep],
            kind=self.kind[keep],
            ts=self.ts[keep],
            direction=self.direction[keep],
            tower=self.tower[keep],
            tower_names=self.tower_names,
            towers=self.towers,
            profiles=self.profiles,
            window=self.window,
            n_malformed=self.n_malformed,
        )


def assemble_dataset(
    fragments: Sequence[CdrFragment],
    profiles: Mapping[str, UserProfile],
    towers: Mapping[str, TowerRecord],
    window: MonthWindow,
) -> Dataset:
    """Merge fragments into one timestamp-sorted dataset (stable order on ties)."""
    users: list[str] = []
    user_index: dict[str, int] = {}
    tower_names: list[str] = []
    tower_index: dict[str, int] = {}

    def user_code(name: str) -> int:
        code = user_index.setdefault(name, len(users))
        if code == len(users):
            users.append(name)
        return code

    def tower_code(name: str | None) -> int:
        if name is None:
            return -1
        code = tower_index.setdefault(name, len(tower_names))
        if code == len(tower_names):
            tower_names.append(name)
        return code

    n = sum(f.n_parsed for f in fragments)
    origin = np.empty(n, dtype=np.int32)
    peer = np.empty(n, dtype=np.int32)
    kind = np.empty(n, dtype=np.uint8)
    ts = np.empty(n, dtype=np.int64)
    direction = np.empty(n, dtype=np.uint8)
    tower = np.empty(n, dtype=np.int32)
    pos = 0
    for frag in fragments:
        for j in range(frag.n_parsed):
            origin[pos] = user_code(frag.origin[j])
            peer[pos] = user_code(frag.peer[j])
            tower[pos] = tower_code(frag.tower[j])
            pos += 1
        kind[pos - frag.n_parsed : pos] = frag.kind
        ts[pos - frag.n_parsed : pos] = frag.ts
        direction[pos - frag.n_parsed : pos] = frag.direction

    order = np.argsort(ts, kind="stable")
    return Dataset(
        users=users,
        origin=origin[order],
        peer=peer[order],
        kind=kind[order],
        ts=ts[order],
        direction=direction[order],
        tower=tower[order],
        tower_names=tower_names,
        towers=dict(towers),
        profiles=dict(profiles),
        window=window,
        n_malformed=sum(f.n_malformed for f in fragments),
    )


def deduplicate_events(dataset: Dataset, tolerance_s: float = 1.0) -> Dataset:
    """Collapse double-logged call legs into single events.

    A call between two subscribers can appear once per party: an outgoing leg
    at the caller and a mirrored incoming leg at the callee, stamped within
    clock tolerance of each other. Incoming records are suppressed whenever a
    matching outgoing record (same unordered pair, same kind, opposite
    orientation) exists within ``tolerance_s``; the surviving outgoing record
    carries the caller's tower. Suppression depends only on the outgoing rows,
    which are always retained, so the operation is idempotent.
    """
    n = len(dataset)
    if n == 0:
        return dataset.replace_rows(np.zeros(0, dtype=np.int64))
    lo = np.minimum(dataset.origin, dataset.peer).astype(np.int64)
    hi = np.maximum(dataset.origin, dataset.peer).astype(np.int64)
    # Caller of the underlying call: origin for outgoing legs, peer for incoming.
    caller = np.where(dataset.direction == DIR_OUT, dataset.origin, dataset.peer)
    order = np.lexsort((dataset.ts, caller, dataset.kind, hi, lo))
    s_lo, s_hi = lo[order], hi[order]
    s_kind = dataset.kind[order]
    s_caller = caller[order]
    s_ts = dataset.ts[order]
    s_dir = dataset.direction[order]

    boundary = np.ones(n, dtype=bool)
    boundary[1:] = (
        (s_lo[1:] != s_lo[:-1])
        | (s_hi[1:] != s_hi[:-1])
        | (s_kind[1:] != s_kind[:-1])
        | (s_caller[1:] != s_caller[:-1])
    )
    group = np.cumsum(boundary) - 1

    idx = np.arange(n)
    prev_out = np.maximum.accumulate(np.where(s_dir == DIR_OUT, idx, -1))
    rev_prev = np.maximum.accumulate(np.where(s_dir[::-1] == DIR_OUT, idx, -1))
    next_out = np.where(rev_prev[::-1] >= 0, (n - 1) - rev_prev[::-1], -1)

    tol = int(math.floor(tolerance_s))
    drop = np.zeros(n, dtype=bool)
    inc = np.flatnonzero(s_dir == DIR_IN)
    if inc.size:
        p = prev_out[inc]
        ok_p = p >= 0
        sub = np.flatnonzero(ok_p)
        ok_p[sub] = (group[p[sub]] == group[inc[sub]]) & (
            s_ts[inc[sub]] - s_ts[p[sub]] <= tol
        )
        nx = next_out[inc]
        ok_n = nx >= 0
        sub = np.flatnonzero(ok_n)
        ok_n[sub] = (group[nx[sub]] == group[inc[sub]]) & (
            s_ts[nx[sub]] - s_ts[inc[sub]] <= tol
        )
        drop[inc] = ok_p | ok_n

    keep_sorted = order[~drop]
    keep_sorted.sort()  # restore original timestamp-sorted row order
    return dataset.replace_rows(keep_sorted)


def resolve_location(
    towers: Mapping[str, TowerRecord], tower: str | None
) -> tuple[str | None, str | None]:
    """Map a tower id to ``(province, city)``; unknown/absent towers give (None, None)."""
    if tower is None:
        return (None, None)
    rec = towers.get(tower)
    if rec is None or rec.province is None:
        return (None, None)
    return (rec.province, rec.city)


def great_circle_km(
    p: tuple[float, float], q: tuple[float, float], radius_km: float = EARTH_RADIUS_KM
) -> float:
    """Haversine distance in kilometers between two (lat, lon) points in degrees."""
    lat1, lon1 = math.radians(p[0]), math.radians(p[1])
    lat2, lon2 = math.radians(q[0]), math.radians(q[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * radius_km * math.asin(min(1.0, math.sqrt(a)))


def write_cdr_csv(dataset: Dataset, path: str | Path, schema: CdrSchema | None = None) -> None:
    """Serialize the event table back to the CDR file format."""
    schema = schema or CdrSchema()
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter=schema.delimiter)
        writer.writerow([schema.columns.get(f, f) for f in CDR_FIELDS])
        for i in range(len(dataset)):
            t = int(dataset.tower[i])
            stamp = datetime.fromtimestamp(int(dataset.ts[i]), tz=timezone.utc)
            writer.writerow(
                [
                    dataset.users[dataset.origin[i]],
                    dataset.users[dataset.peer[i]],
                    _KIND_LABELS[dataset.kind[i]],
                    stamp.strftime("%Y-%m-%dT%H:%M:%S"),
                    _DIR_LABELS[dataset.direction[i]],
                    dataset.tower_names[t] if t >= 0 else "",
                ]
            )


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Persist the dataset as deterministic .npy columns plus JSON registries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("origin", "peer", "kind", "ts", "direction", "tower"):
        np.save(out / f"{name}.npy", getattr(dataset, name))
    meta = {
        "users": dataset.users,
        "tower_names": dataset.tower_names,
        "window": [dataset.window.year, dataset.window.month, dataset.window.n_months],
        "n_malformed": dataset.n_malformed,
        "profiles": {
            u: [p.age, p.gender] for u, p in sorted(dataset.profiles.items())
        },
        "towers": {
            t: [r.latitude, r.longitude, r.province, r.city]
            for t, r in sorted(dataset.towers.items())
        },
    }
    with open(out / "dataset.json", "w", encoding="utf-8") as handle:
        json.dump(meta, handle, sort_keys=True, separators=(",", ":"))


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    with open(src / "dataset.json", "r", encoding="utf-8") as handle:
        meta = json.load(handle)
    cols = {
        name: np.load(src / f"{name}.npy")
        for name in ("origin", "peer", "kind", "ts", "direction", "tower")
    }
    profiles = {
        u: UserProfile(u, age, gender) for u, (age, gender) in meta["profiles"].items()
    }
    towers = {
        t: TowerRecord(t, lat, lon, prov, city)
        for t, (lat, lon, prov, city) in meta["towers"].items()
    }
    year, month, n_months = meta["window"]
    return Dataset(
        users=list(meta["users"]),
        tower_names=list(meta["tower_names"]),
        towers=towers,
        profiles=profiles,
        window=MonthWindow(year, month, n_months),
        n_malformed=int(meta["n_malformed"]),
        **cols,
    )
