"""Stage orchestration with content-hash caching and a reproducibility manifest.

Each stage writes its artifacts under ``<out>/<stage>/`` and records a
fingerprint in ``manifest.json``. A stage is skipped when its fingerprint
(code version, relevant config sections, upstream fingerprints, external
input hashes) matches the recorded one and all outputs still exist. Wall
clock and cache-hit notes go to ``timings.json``, which is the only
non-deterministic artifact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from ._rand import derive_seed
from .clustering import (
    cross_method_agreement,
    kmeans,
    label_agreement,
    make_control,
    select_k,
    truncation_analysis,
    ward_labels,
)
from .config import parse_window_start
from .features import (
    CLASSIFICATION_TARGETS,
    DEFAULT_FEATURES,
    FeatureAssembler,
    FeatureRow,
    TransformSpec,
    build_design,
    predictor_correlations,
)
from .homes import (
    MOVER,
    NON_MOVER,
    MoverStatus,
    classify_all,
    compute_trajectories,
    status_rows,
    trajectory_rows,
)
from .metrics import (
    bayes_accuracy_upper_bound,
    evaluate_classifier,
    evaluate_regression,
    permutation_importance,
)
from .models import fit_classifier, fit_regression
from .records import (
    CdrSchema,
    MonthWindow,
    assemble_dataset,
    deduplicate_events,
    load_dataset,
    load_demographics,
    load_towers,
    parse_cdr_file,
    save_dataset,
)
from .series import PairSeriesBuilder, matrix_rows, month_correlation_matrix, summarize
from .synth import SynthConfig, generate, load_ground_truth, score_pipeline
from .ties import (
    MonthlyCallIndex,
    PairFilterConfig,
    StrongPair,
    find_strong_pairs,
    pair_rows,
    split_by_ego,
)

STAGES = (
    "synth",
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
)

DEPENDENCIES: dict[str, tuple[str, ...]] = {
    "synth": (),
    "ingest": (),
    "homes": ("ingest",),
    "movers": ("homes",),
    "ties": ("ingest", "movers"),
    "series": ("ingest", "ties"),
    "cluster": ("series",),
    "control": ("ingest", "movers", "ties"),
    "features": ("ingest", "ties", "series"),
    "train": ("features",),
    "evaluate": ("train", "features"),
    "report": (
        "movers",
        "ties",
        "series",
        "cluster",
        "control",
        "features",
        "evaluate",
    ),
}

_STAGE_CONFIG: dict[str, tuple[str, ...]] = {
    "synth": ("synth", "window_start", "months", "seed"),
    "ingest": ("inputs", "ingest", "window_start", "months"),
    "homes": ("homes", "seed"),
    "movers": (),
    "ties": ("ties", "seed"),
    "series": ("series", "ties"),
    "cluster": ("cluster", "seed"),
    "control": ("control", "cluster", "ties", "series", "seed"),
    "features": ("features", "seed"),
    "train": ("models", "features", "seed"),
    "evaluate": ("models", "features", "seed"),
    "report": (),
}

AGE_BINS = ((18, 29), (30, 44), (45, 59), (60, 200))


class PipelineError(RuntimeError):
    pass


class DependencyError(PipelineError):
    pass


class StaleArtifactError(DependencyError):
    pass


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        v = float(value)  # np.float64 subclasses float but reprs differently
        return "" if math.isnan(v) else repr(v)
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, [])
        return header, [row for row in reader]


def _sanitize(value):
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return _sanitize(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(_sanitize(payload), handle, sort_keys=True, indent=1)
        handle.write("\n")


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _parse_float(cell: str) -> float:
    return float(cell) if cell != "" else float("nan")


def _corr_block_gap(path: Path) -> float | None:
    """Mean within-block minus mean cross-block Spearman correlation.

    Blocks are the pre-move months (t < 0) and post-move months (t > 0);
    the diagonal and the moving month itself are excluded.
    """
    header, rows = read_csv(path)
    if len(header) < 2 or not rows:
        return None
    t_axis = [int(v) for v in header[1:]]
    matrix = np.array([[_parse_float(c) for c in row[1:]] for row in rows])
    within, cross = [], []
    for i, s in enumerate(t_axis):
        for j, t in enumerate(t_axis):
            if i == j or s == 0 or t == 0:
                continue
            value = matrix[i, j]
            if math.isnan(value):
                continue
            if (s < 0) == (t < 0):
                within.append(value)
            else:
                cross.append(value)
    if not within or not cross:
        return None
    return float(np.mean(within) - np.mean(cross))


class Runner:
    """Executes pipeline stages against one output directory."""

    def __init__(self, config: Mapping, out_dir: str | Path | None = None, threads: int = 1):
        self.config = dict(config)
        self.out = Path(out_dir or self.config["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = max(1, int(threads))
        self.manifest_path = self.out / "manifest.json"
        self.timings_path = self.out / "timings.json"
        if self.manifest_path.exists():
            with open(self.manifest_path, "r", encoding="utf-8") as handle:
                self.manifest = json.load(handle)
        else:
            self.manifest = {
                "code_version": __version__,
                "config": self._config_snapshot(),
                "stages": {},
            }
        if self.timings_path.exists():
            with open(self.timings_path, "r", encoding="utf-8") as handle:
                self.timings = json.load(handle)
        else:
            self.timings = {"stages": {}}
        self.timings["output_dir"] = str(self.out)
        self._mem: dict[str, Any] = {}

    # ------------------------------------------------------------ plumbing

    def _config_snapshot(self) -> dict:
        # The output directory is where the run lives, not what it computes;
        # leaving it out keeps manifests byte-identical across locations.
        return _sanitize({k: v for k, v in self.config.items() if k != "output_dir"})

    @property
    def window(self) -> MonthWindow:
        year, month = parse_window_start(self.config["window_start"])
        return MonthWindow(year, month, int(self.config["months"]))

    def stage_dir(self, stage: str) -> Path:
        path = self.out / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _external_inputs(self, stage: str) -> dict[str, str]:
        # Keyed by role, not path, so runs in different directories with the
        # same content produce identical fingerprints.
        if stage == "ingest":
            paths = self._input_paths()
            hashes = {
                f"cdr[{i}]": _hash_file(Path(p)) for i, p in enumerate(paths["cdr"])
            }
            hashes["demographics"] = _hash_file(Path(paths["demographics"]))
            hashes["towers"] = _hash_file(Path(paths["towers"]))
            return hashes
        return {}

    def _input_paths(self) -> dict:
        if "synth" in self.manifest["stages"]:
            synth_dir = self.stage_dir("synth")
            return {
                "cdr": [synth_dir / "cdr.csv"],
                "demographics": synth_dir / "demographics.csv",
                "towers": synth_dir / "towers.csv",
            }
        inputs = self.config["inputs"]
        return {
            "cdr": [Path(p) for p in inputs["cdr"]],
            "demographics": Path(inputs["demographics"]),
            "towers": Path(inputs["towers"]),
        }

    def _fingerprint(self, stage: str) -> str:
        payload = {
            "code": __version__,
            "stage": stage,
            "config": {key: _sanitize(self.config[key]) for key in _STAGE_CONFIG[stage]},
            "deps": {
                dep: self.manifest["stages"][dep]["fingerprint"]
                for dep in DEPENDENCIES[stage]
                if dep in self.manifest["stages"]
            },
            "files": self._external_inputs(stage),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _check_dependencies(self, stage: str) -> None:
        for dep in DEPENDENCIES[stage]:
            entry = self.manifest["stages"].get(dep)
            if entry is None:
                raise DependencyError(f"stage {stage!r} needs {dep!r}: run stage {dep} first")
            if entry["fingerprint"] != self._fingerprint(dep):
                raise StaleArtifactError(
                    f"artifacts of stage {dep!r} are stale for the current config; "
                    f"run stage {dep} again"
                )
            for rel in entry["outputs"]:
                if not (self.out / rel).exists():
                    raise DependencyError(
                        f"artifact {rel} of stage {dep!r} is missing: run stage {dep} first"
                    )

    def _record(self, stage: str, fingerprint: str, outputs: Sequence[Path],
                rows: Mapping[str, int], notes: Mapping | None, seconds: float) -> None:
        rel_outputs = {}
        for path in outputs:
            rel = str(path.relative_to(self.out))
            rel_outputs[rel] = _hash_file(path)
        self.manifest["stages"][stage] = {
            "fingerprint": fingerprint,
            "outputs": rel_outputs,
            "rows": dict(rows),
            "seed": self.config["seed"],
            "notes": _sanitize(notes or {}),
        }
        self.manifest["config"] = self._config_snapshot()
        self.manifest["code_version"] = __version__
        write_json(self.manifest_path, self.manifest)
        self.timings["stages"][stage] = {
            "seconds": seconds,
            "threads": self.threads,
            "cache_hit": False,
        }
        write_json(self.timings_path, self.timings)

    def run(self, stage: str) -> list[str]:
        """Run one stage (or "all"); returns the stages actually executed."""
        if stage == "all":
            executed = []
            for name in STAGES:
                executed.extend(self.run(name))
            return executed
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        self._check_dependencies(stage)
        fingerprint = self._fingerprint(stage)
        entry = self.manifest["stages"].get(stage)
        if entry is not None and entry["fingerprint"] == fingerprint:
            if all((self.out / rel).exists() for rel in entry["outputs"]):
                self.timings["stages"][stage] = {
                    "seconds": 0.0,
                    "threads": self.threads,
                    "cache_hit": True,
                }
                write_json(self.timings_path, self.timings)
                return []
        started = time.monotonic()
        outputs, rows, notes = getattr(self, f"_stage_{stage}")()
        self._record(stage, fingerprint, outputs, rows, notes, time.monotonic() - started)
        return [stage]

    # ------------------------------------------------------------ data access

    def _get(self, key: str, loader) -> Any:
        if key not in self._mem:
            self._mem[key] = loader()
        return self._mem[key]

    def dataset(self):
        return self._get("dataset", lambda: load_dataset(self.stage_dir("ingest") / "dataset"))

    def statuses(self) -> dict[str, MoverStatus]:
        def load() -> dict[str, MoverStatus]:
            _, rows = read_csv(self.stage_dir("movers") / "statuses.csv")
            out: dict[str, MoverStatus] = {}
            for user, status, p_from, p_to, m in rows:
                if status == MOVER:
                    out[user] = MoverStatus.mover(p_from, p_to, int(m))
                elif status == NON_MOVER:
                    out[user] = MoverStatus.non_mover(p_from)
                else:
                    out[user] = MoverStatus.unknown()
            return out

        return self._get("statuses", load)

    def pairs(self) -> list[StrongPair]:
        def load() -> list[StrongPair]:
            statuses = self.statuses()
            _, rows = read_csv(self.stage_dir("ties") / "pairs.csv")
            return [
                StrongPair(r[0], r[1], int(r[2]), statuses[r[0]], statuses[r[1]])
                for r in rows
            ]

        return self._get("pairs", load)

    def split(self) -> dict[str, str]:
        def load() -> dict[str, str]:
            with open(self.stage_dir("ties") / "split.json", "r", encoding="utf-8") as handle:
                return json.load(handle)

        return self._get("split", load)

    def series(self):
        def load():
            from .series import PairSeries

            pairs = {(p.ego, p.alter): p for p in self.pairs()}
            _, rows = read_csv(self.stage_dir("series") / "series.csv")
            grouped: dict[tuple[str, str], list[list[str]]] = {}
            order: list[tuple[str, str]] = []
            for row in rows:
                key = (row[0], row[1])
                if key not in grouped:
                    grouped[key] = []
                    order.append(key)
                grouped[key].append(row)
            out = []
            for key in order:
                chunk = sorted(grouped[key], key=lambda r: int(r[2]))
                out.append(
                    PairSeries(
                        pair=pairs[key],
                        t_axis=tuple(int(r[2]) for r in chunk),
                        count=np.array([int(r[3]) for r in chunk], dtype=np.int64),
                        fraction=np.array([_parse_float(r[4]) for r in chunk]),
                        reciprocity=np.array([_parse_float(r[5]) for r in chunk]),
                        fraction_defined=np.array([r[6] == "1" for r in chunk]),
                    )
                )
            return out

        return self._get("series_list", load)

    def summaries(self):
        def load():
            from .series import PrePostSummary

            _, rows = read_csv(self.stage_dir("series") / "summaries.csv")
            return [
                PrePostSummary(
                    pre_count=float(r[3]),
                    post_count=float(r[4]),
                    pre_frac=float(r[5]),
                    post_frac=float(r[6]),
                    pre_recip=float(r[7]),
                    direction_count=r[8],
                    direction_frac=r[9],
                )
                for r in rows
            ]

        return self._get("summaries", load)

    def feature_rows(self) -> list[FeatureRow]:
        def load() -> list[FeatureRow]:
            header, rows = read_csv(self.stage_dir("features") / "features.csv")
            idx = {name: i for i, name in enumerate(header)}
            out = []
            for r in rows:
                out.append(
                    FeatureRow(
                        ego=r[idx["ego"]],
                        alter=r[idx["alter"]],
                        m=int(r[idx["m"]]),
                        count_pre=float(r[idx["count_pre"]]),
                        frac_pre=float(r[idx["frac_pre"]]),
                        age_ego=float(r[idx["age_ego"]]),
                        age_diff=float(r[idx["age_diff"]]),
                        gender_ego=r[idx["gender_ego"]],
                        gender_diff=r[idx["gender_diff"]],
                        distance_move=float(r[idx["distance_move"]]),
                        distance_ea_pre=float(r[idx["distance_ea_pre"]]),
                        direction_move=r[idx["direction_move"]],
                        recip_pre=float(r[idx["recip_pre"]]),
                        count_post=float(r[idx["count_post"]]),
                        frac_post=float(r[idx["frac_post"]]),
                        decay_count=r[idx["decay_count"]] == "1",
                        decay_frac=r[idx["decay_frac"]] == "1",
                        abs_dist_change=float(r[idx["abs_dist_change"]]),
                        distance_ea_post=float(r[idx["distance_ea_post"]]),
                        direction_tie=r[idx["direction_tie"]] == "1",
                    )
                )
            return out

        return self._get("feature_rows", load)

    def _pair_filter_config(self) -> PairFilterConfig:
        t = self.config["ties"]
        return PairFilterConfig(
            window_pre=int(t["window_pre"]),
            window_post=int(t["window_post"]),
            top_k=int(t["top_k"]),
            persistence_months=int(t["persistence_months"]),
            min_stay=int(t["min_stay"]),
            ranking=t["ranking"],
            activity=t["activity"],
        )

    # ------------------------------------------------------------ stages

    def _stage_synth(self):
        synth_conf = dict(self.config["synth"])
        for key in ("age_range", "direction_split_range", "move_month_range"):
            synth_conf[key] = tuple(synth_conf[key])
        config = SynthConfig(
            months=int(self.config["months"]),
            window_start=parse_window_start(self.config["window_start"]),
            seed=int(self.config["seed"]),
            **synth_conf,
        )
        out_dir = self.stage_dir("synth")
        truth = generate(config, out_dir)
        outputs = [
            out_dir / "cdr.csv",
            out_dir / "demographics.csv",
            out_dir / "towers.csv",
            out_dir / "ground_truth.json",
        ]
        rows = {
            "users": config.n_users,
            "true_movers": len(truth.movers()),
            "planted_pairs": len(truth.pairs),
            "control_pairs": len(truth.control_pairs),
        }
        return outputs, rows, {}

    def _stage_ingest(self):
        paths = self._input_paths()
        ing = self.config["ingest"]
        schema = CdrSchema(delimiter=ing["delimiter"], columns=dict(ing["columns"]))
        window = self.window
        fragments = [parse_cdr_file(Path(p), schema, window) for p in paths["cdr"]]
        profiles = load_demographics(paths["demographics"])
        towers = load_towers(paths["towers"])
        dataset = assemble_dataset(fragments, profiles, towers, window)
        raw_rows = len(dataset)
        if ing["dedup"]:
            dataset = deduplicate_events(dataset, float(ing["dedup_tolerance_s"]))
        out_dir = self.stage_dir("ingest")
        save_dataset(dataset, out_dir / "dataset")
        stats = {
            "raw_records": raw_rows,
            "records": len(dataset),
            "suppressed_legs": raw_rows - len(dataset),
            "malformed": dataset.n_malformed,
            "users": len(dataset.users),
            "dedup": bool(ing["dedup"]),
        }
        write_json(out_dir / "ingest_stats.json", stats)
        self._mem["dataset"] = dataset
        outputs = [out_dir / "ingest_stats.json"] + sorted(
            (out_dir / "dataset").glob("*")
        )
        return outputs, {"records": len(dataset)}, stats

    def _stage_homes(self):
        conf = self.config["homes"]
        night = conf["night_only"]
        trajectories = compute_trajectories(
            self.dataset(),
            seed=int(self.config["seed"]),
            weekdays=tuple(conf["weekdays"]),
            night_only=tuple(night) if night else None,
        )
        self._mem["trajectories"] = trajectories
        out_dir = self.stage_dir("homes")
        path = out_dir / "trajectories.csv"
        months = self.window.n_months
        write_csv(
            path,
            ["user_id"] + [f"m{i + 1:02d}" for i in range(months)],
            trajectory_rows(trajectories),
        )
        return [path], {"users": len(trajectories)}, {}

    def _stage_movers(self):
        trajectories = self._get(
            "trajectories",
            lambda: self._load_trajectories(),
        )
        statuses = classify_all(trajectories)
        self._mem["statuses"] = statuses
        out_dir = self.stage_dir("movers")
        path = out_dir / "statuses.csv"
        write_csv(path, ["user_id", "status", "from", "to", "m"], status_rows(statuses))
        hist: dict[int, int] = {}
        for s in statuses.values():
            if s.status == MOVER and s.move_month is not None:
                hist[s.move_month] = hist.get(s.move_month, 0) + 1
        hist_path = out_dir / "month_histogram.csv"
        write_csv(hist_path, ["m", "count"], [[m, hist[m]] for m in sorted(hist)])
        counts = {
            "movers": sum(1 for s in statuses.values() if s.status == MOVER),
            "non_movers": sum(1 for s in statuses.values() if s.status == NON_MOVER),
            "unknown": sum(1 for s in statuses.values() if s.status == "unknown"),
        }
        return [path, hist_path], counts, counts

    def _load_trajectories(self):
        from .homes import HomeTrajectory

        _, rows = read_csv(self.stage_dir("homes") / "trajectories.csv")
        return {
            r[0]: HomeTrajectory(r[0], tuple(v if v else None for v in r[1:]))
            for r in rows
        }

    def _stage_ties(self):
        dataset = self.dataset()
        index = MonthlyCallIndex(dataset)
        self._mem["call_index"] = index
        config = self._pair_filter_config()
        pairs, exclusions = find_strong_pairs(index, self.statuses(), config)
        split: dict[str, str] = {}
        if len({p.ego for p in pairs}) >= 2:
            train, test = split_by_ego(
                pairs, float(self.config["ties"]["train_fraction"]), int(self.config["seed"])
            )
            split = {p.ego: "train" for p in train}
            split.update({p.ego: "test" for p in test})
        out_dir = self.stage_dir("ties")
        pairs_path = out_dir / "pairs.csv"
        write_csv(
            pairs_path,
            ["ego", "alter", "m", "ego_age", "ego_gender", "alter_age",
             "alter_gender", "from", "to", "split"],
            pair_rows(pairs, dataset.profiles, split),
        )
        excl_path = out_dir / "exclusions.csv"
        write_csv(
            excl_path,
            ["ego", "alter", "m", "reason"],
            [[e.ego, e.alter, e.m, e.reason] for e in exclusions],
        )
        split_path = out_dir / "split.json"
        write_json(split_path, split)
        self._mem["pairs"] = pairs
        self._mem["split"] = split
        rows = {
            "pairs": len(pairs),
            "unique_egos": len({p.ego for p in pairs}),
            "unique_alters": len({p.alter for p in pairs}),
            "exclusions": len(exclusions),
        }
        return [pairs_path, excl_path, split_path], rows, rows

    def _stage_series(self):
        ties_conf = self.config["ties"]
        builder = PairSeriesBuilder(
            self.dataset(),
            self.pairs(),
            window_pre=int(ties_conf["window_pre"]),
            window_post=int(ties_conf["window_post"]),
        )
        series = builder.build_all(self.pairs())
        include_t0 = self.config["series"]["include_t0"]
        summaries = [summarize(s, include_t0) for s in series]
        self._mem["series_list"] = series
        self._mem["summaries"] = summaries
        out_dir = self.stage_dir("series")
        series_path = out_dir / "series.csv"
        rows = []
        for s in series:
            for i, t in enumerate(s.t_axis):
                rows.append(
                    [
                        s.pair.ego,
                        s.pair.alter,
                        t,
                        int(s.count[i]),
                        float(s.fraction[i]),
                        float(s.reciprocity[i]),
                        1 if s.fraction_defined[i] else 0,
                    ]
                )
        write_csv(
            series_path,
            ["ego", "alter", "t", "count", "fraction", "reciprocity", "fraction_defined"],
            rows,
        )
        summary_path = out_dir / "summaries.csv"
        write_csv(
            summary_path,
            ["ego", "alter", "m", "pre_count", "post_count", "pre_frac",
             "post_frac", "pre_recip", "direction_count", "direction_frac"],
            [
                [p.ego, p.alter, p.m, s.pre_count, s.post_count, s.pre_frac,
                 s.post_frac, s.pre_recip, s.direction_count, s.direction_frac]
                for p, s in zip(self.pairs(), summaries)
            ],
        )
        outputs = [series_path, summary_path]
        t_axis = series[0].t_axis if series else tuple(range(-4, 5))
        for quantity in ("count", "fraction"):
            path = out_dir / f"corr_{quantity}.csv"
            if len(series) >= 3:
                matrix = month_correlation_matrix(series, quantity)
                with open(path, "w", encoding="utf-8", newline="") as handle:
                    writer = csv.writer(handle)
                    for row in matrix_rows(matrix, t_axis):
                        writer.writerow(row)
            else:
                with open(path, "w", encoding="utf-8") as handle:
                    handle.write("t\n")
            outputs.append(path)
        return outputs, {"series": len(series)}, {}

    def _cluster_block(self, series, quantity: str, seed_tag: str):
        """Shared clustering for the mover and control sets: truncation windows,
        prototypes, crossings; returns the full-window clustering."""
        conf = self.config["cluster"]
        windows = [tuple(w) for w in conf["truncation_windows"]]
        t_axis = series[0].t_axis
        full = (min(t_axis), max(t_axis))
        if full not in windows:
            windows = [full] + windows
        raw = np.stack([getattr(s, quantity) for s in series]).astype(float)
        results = truncation_analysis(
            raw,
            t_axis,
            windows,
            k=2,
            restarts=int(conf["restarts"]),
            max_iter=int(conf["max_iter"]),
            tol=float(conf["tol"]),
            seed=derive_seed(int(self.config["seed"]), seed_tag, quantity),
        )
        proto_rows = []
        crossing_rows = []
        for res in results:
            for c in range(res.prototypes.shape[0]):
                for t, value in zip(res.t_axis, res.prototypes[c]):
                    proto_rows.append(
                        [quantity, res.window[0], res.window[1], c, t, float(value)]
                    )
                crossing_rows.append(
                    [quantity, res.window[0], res.window[1], c, res.crossings[c]]
                )
        return results, proto_rows, crossing_rows

    def _stage_cluster(self):
        series = self.series()
        out_dir = self.stage_dir("cluster")
        if not series:
            # Degenerate inputs (for example zero movers) exit cleanly with
            # empty artifacts so downstream stages and reports still run.
            paths = []
            for name, header in (
                ("clusters.csv", ["ego", "alter", "label_count", "label_fraction"]),
                ("quality.csv", ["quantity", "k", "silhouette", "davies_bouldin",
                                 "jaccard_mean", "jaccard_per_cluster", "chosen"]),
                ("prototypes.csv", ["quantity", "window_lo", "window_hi",
                                    "cluster", "t", "value"]),
                ("crossings.csv", ["quantity", "window_lo", "window_hi",
                                   "cluster", "crossing"]),
            ):
                write_csv(out_dir / name, header, [])
                paths.append(out_dir / name)
            write_json(out_dir / "agreement.json", {})
            paths.append(out_dir / "agreement.json")
            return paths, {"clustered": 0}, {"empty": True}
        conf = self.config["cluster"]
        out_dir = self.stage_dir("cluster")
        summaries = self.summaries()
        quality_rows = []
        cluster_labels: dict[str, dict[tuple[str, str], int]] = {}
        agreement_payload: dict[str, Any] = {}
        proto_all: list = []
        crossing_all: list = []
        k_lo, k_hi = conf["k_range"]
        for quantity in ("count", "fraction"):
            results, proto_rows, crossing_rows = self._cluster_block(
                series, quantity, "cluster"
            )
            proto_all.extend(proto_rows)
            crossing_all.extend(crossing_rows)
            full = results[0]
            Z = np.stack(
                [s for s in self._standardized_rows(series, quantity, full.row_indices)]
            )
            seed = derive_seed(int(self.config["seed"]), "select-k", quantity)
            k_star, qualities = select_k(
                Z,
                k_range=range(int(k_lo), int(k_hi) + 1),
                n_bootstrap=int(conf["bootstrap"]),
                restarts=int(conf["restarts"]),
                max_iter=int(conf["max_iter"]),
                tol=float(conf["tol"]),
                seed=seed,
            )
            for q in qualities:
                quality_rows.append(
                    [
                        quantity,
                        q.k,
                        q.silhouette,
                        q.davies_bouldin,
                        q.jaccard_mean,
                        ";".join(repr(float(v)) for v in q.jaccard),
                        1 if q.k == k_star else 0,
                    ]
                )
            model = kmeans(
                Z,
                2,
                restarts=int(conf["restarts"]),
                max_iter=int(conf["max_iter"]),
                tol=float(conf["tol"]),
                seed=derive_seed(int(self.config["seed"]), "final-k2", quantity),
            )
            directions = [
                getattr(summaries[i], f"direction_{'count' if quantity == 'count' else 'frac'}")
                for i in full.row_indices
            ]
            agreement = label_agreement(model, full.t_axis, directions)
            labels = {}
            for row_pos, series_idx in enumerate(full.row_indices):
                pair = series[series_idx].pair
                labels[(pair.ego, pair.alter)] = int(model.labels[row_pos])
            cluster_labels[quantity] = labels
            agreement_payload[quantity] = {
                "k_star": k_star,
                "agreement": agreement.fraction,
                "cluster_directions": list(agreement.cluster_directions),
                "flagged": agreement.flagged,
                "n": agreement.n,
                "n_constant_excluded": full.n_constant_excluded,
            }
            if conf["ward_check"]:
                ward = ward_labels(Z, 2)
                agreement_payload[quantity]["ward_agreement"] = cross_method_agreement(
                    model.labels, ward
                )
        clusters_path = out_dir / "clusters.csv"
        rows = []
        for s in series:
            key = (s.pair.ego, s.pair.alter)
            rows.append(
                [
                    key[0],
                    key[1],
                    cluster_labels["count"].get(key, ""),
                    cluster_labels["fraction"].get(key, ""),
                ]
            )
        write_csv(clusters_path, ["ego", "alter", "label_count", "label_fraction"], rows)
        quality_path = out_dir / "quality.csv"
        write_csv(
            quality_path,
            ["quantity", "k", "silhouette", "davies_bouldin", "jaccard_mean",
             "jaccard_per_cluster", "chosen"],
            quality_rows,
        )
        proto_path = out_dir / "prototypes.csv"
        write_csv(
            proto_path,
            ["quantity", "window_lo", "window_hi", "cluster", "t", "value"],
            proto_all,
        )
        crossings_path = out_dir / "crossings.csv"
        write_csv(
            crossings_path,
            ["quantity", "window_lo", "window_hi", "cluster", "crossing"],
            crossing_all,
        )
        agreement_path = out_dir / "agreement.json"
        write_json(agreement_path, agreement_payload)
        outputs = [clusters_path, quality_path, proto_path, crossings_path, agreement_path]
        notes = {q: agreement_payload[q]["k_star"] for q in agreement_payload}
        return outputs, {"clustered": len(series)}, {"k_star": notes}

    @staticmethod
    def _standardized_rows(series, quantity: str, row_indices):
        from .series import standardize

        raw = [getattr(series[i], quantity) for i in row_indices]
        return [standardize(values).values for values in raw]

    def _stage_control(self):
        from .clustering import ControlSet

        index = self._get("call_index", lambda: MonthlyCallIndex(self.dataset()))
        pairs = self.pairs()
        hist: dict[int, int] = {}
        for p in pairs:
            hist[p.m] = hist.get(p.m, 0) + 1
        size = self.config["control"]["size"] or len(pairs)
        if hist and size > 0:
            control = make_control(
                index,
                self.statuses(),
                hist,
                int(size),
                seed=int(self.config["seed"]),
                config=self._pair_filter_config(),
            )
        else:
            # No movers means no dummy-month distribution to sample from.
            control = ControlSet([], int(size), 0)
        out_dir = self.stage_dir("control")
        pairs_path = out_dir / "control_pairs.csv"
        write_csv(
            pairs_path,
            ["ego", "alter", "dummy_m"],
            [[p.ego, p.alter, p.m] for p in control.pairs],
        )
        outputs = [pairs_path]
        rows = {"control_pairs": len(control.pairs), "shortfall": control.shortfall}
        notes: dict[str, Any] = dict(rows)
        if control.pairs:
            ties_conf = self.config["ties"]
            builder = PairSeriesBuilder(
                self.dataset(),
                control.pairs,
                window_pre=int(ties_conf["window_pre"]),
                window_post=int(ties_conf["window_post"]),
            )
            c_series = builder.build_all(control.pairs)
            series_path = out_dir / "control_series.csv"
            body = []
            for s in c_series:
                for i, t in enumerate(s.t_axis):
                    body.append(
                        [s.pair.ego, s.pair.alter, t, int(s.count[i]),
                         float(s.fraction[i]), float(s.reciprocity[i]),
                         1 if s.fraction_defined[i] else 0]
                    )
            write_csv(
                series_path,
                ["ego", "alter", "t", "count", "fraction", "reciprocity",
                 "fraction_defined"],
                body,
            )
            outputs.append(series_path)
            t_axis = c_series[0].t_axis
            for quantity in ("count", "fraction"):
                path = out_dir / f"control_corr_{quantity}.csv"
                if len(c_series) >= 3:
                    matrix = month_correlation_matrix(c_series, quantity)
                    with open(path, "w", encoding="utf-8", newline="") as handle:
                        writer = csv.writer(handle)
                        for row in matrix_rows(matrix, t_axis):
                            writer.writerow(row)
                else:
                    with open(path, "w", encoding="utf-8") as handle:
                        handle.write("t\n")
                outputs.append(path)
            proto_all, crossing_all = [], []
            for quantity in ("count", "fraction"):
                _, proto_rows, crossing_rows = self._cluster_block(
                    c_series, quantity, "control-cluster"
                )
                proto_all.extend(proto_rows)
                crossing_all.extend(crossing_rows)
            proto_path = out_dir / "control_prototypes.csv"
            write_csv(
                proto_path,
                ["quantity", "window_lo", "window_hi", "cluster", "t", "value"],
                proto_all,
            )
            crossings_path = out_dir / "control_crossings.csv"
            write_csv(
                crossings_path,
                ["quantity", "window_lo", "window_hi", "cluster", "crossing"],
                crossing_all,
            )
            outputs.extend([proto_path, crossings_path])
        return outputs, rows, notes

    def _stage_features(self):
        assembler = FeatureAssembler(self.dataset(), seed=int(self.config["seed"]))
        rows, dropped = assembler.assemble(self.pairs(), self.summaries())
        self._mem["feature_rows"] = rows
        out_dir = self.stage_dir("features")
        split = self.split()
        features_path = out_dir / "features.csv"
        header = [
            "ego", "alter", "m", "count_pre", "frac_pre", "age_ego", "age_diff",
            "gender_ego", "gender_diff", "distance_move", "distance_ea_pre",
            "direction_move", "recip_pre", "count_post", "frac_post",
            "decay_count", "decay_frac", "abs_dist_change", "distance_ea_post",
            "direction_tie", "split",
        ]
        body = []
        for r in rows:
            body.append(
                [
                    r.ego, r.alter, r.m, r.count_pre, r.frac_pre, r.age_ego,
                    r.age_diff, r.gender_ego, r.gender_diff, r.distance_move,
                    r.distance_ea_pre, r.direction_move, r.recip_pre,
                    r.count_post, r.frac_post,
                    1 if r.decay_count else 0,
                    1 if r.decay_frac else 0,
                    r.abs_dist_change,
                    r.distance_ea_post,
                    1 if r.direction_tie else 0,
                    split.get(r.ego, ""),
                ]
            )
        write_csv(features_path, header, body)
        dropped_path = out_dir / "dropped.csv"
        write_csv(dropped_path, ["ego", "alter", "reason"], dropped)
        corr_path = out_dir / "predictor_correlations.csv"
        table = predictor_correlations(rows) if len(rows) >= 3 else [[
            "feature_a", "feature_b", "pearson", "spearman", "point_biserial"]]
        with open(corr_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            for row in table:
                writer.writerow(row)
        counts = {"features": len(rows), "dropped": len(dropped)}
        return [features_path, dropped_path, corr_path], counts, counts

    def _tasks(self) -> dict[str, dict]:
        models = self.config["models"]
        return {
            "count": {
                "target": "count_post",
                "target_transform": models["count_target_transform"],
                "kinds": list(models["regression_kinds"]),
                "kind_family": "regression",
            },
            "fraction": {
                "target": "frac_post",
                "target_transform": models["fraction_target_transform"],
                "kinds": list(models["regression_kinds"]),
                "kind_family": "regression",
            },
            "decay_count": {
                "target": "decay_count",
                "target_transform": "none",
                "kinds": list(models["classification_kinds"]),
                "kind_family": "classification",
            },
            "decay_frac": {
                "target": "decay_frac",
                "target_transform": "none",
                "kinds": list(models["classification_kinds"]),
                "kind_family": "classification",
            },
        }

    def _design_for(self, task: dict, feature_list: Sequence[str]):
        rows = self.feature_rows()
        split = self.split()
        train_rows = [r for r in rows if split.get(r.ego) == "train"]
        test_rows = [r for r in rows if split.get(r.ego) == "test"]
        conf = self.config["features"]
        spec = TransformSpec(
            transforms=dict(conf["transforms"]),
            zero_count_km=float(conf["zero_count_km"]),
            zero_fraction=float(conf["zero_fraction"]),
        )
        return build_design(
            train_rows,
            test_rows,
            feature_list,
            spec,
            task["target"],
            task["target_transform"] if task["target"] not in CLASSIFICATION_TARGETS else "none",
        )

    def _stage_train(self):
        models_conf = self.config["models"]
        grids = models_conf["grids"]
        results: dict[str, Any] = {}
        seed = int(self.config["seed"])
        for task_name, task in self._tasks().items():
            results[task_name] = {}
            for set_name, feature_list in models_conf["feature_sets"].items():
                features = list(feature_list or DEFAULT_FEATURES)
                design = self._design_for(task, features)
                if design.X_train.shape[0] < int(models_conf["cv_folds"]):
                    results[task_name][set_name] = {"error": "too few training rows"}
                    continue
                results[task_name][set_name] = {}
                for kind in task["kinds"]:
                    grid = grids.get(kind)
                    fit_seed = derive_seed(seed, "train", task_name, set_name, kind)
                    try:
                        if task["kind_family"] == "regression":
                            fit = fit_regression(
                                kind, design.X_train, design.y_train,
                                grid=grid, cv_folds=int(models_conf["cv_folds"]),
                                seed=fit_seed,
                            )
                        else:
                            fit = fit_classifier(
                                kind, design.X_train, design.y_train.astype(int),
                                grid=grid, cv_folds=int(models_conf["cv_folds"]),
                                seed=fit_seed,
                            )
                    except ValueError as exc:
                        results[task_name][set_name][kind] = {"error": str(exc)}
                        continue
                    results[task_name][set_name][kind] = {
                        "params": fit.params,
                        "cv_metric": fit.cv_metric,
                        "cv_table": fit.cv_table,
                        "seed": fit_seed,
                        "n_train": int(design.X_train.shape[0]),
                    }
        out_dir = self.stage_dir("train")
        path = out_dir / "cv_results.json"
        write_json(path, results)
        return [path], {"tasks": len(results)}, {}

    def _stage_evaluate(self):
        with open(self.stage_dir("train") / "cv_results.json", "r", encoding="utf-8") as handle:
            cv_results = json.load(handle)
        models_conf = self.config["models"]
        seed = int(self.config["seed"])
        report: dict[str, Any] = {}
        importance_rows: list[list] = []
        for task_name, task in self._tasks().items():
            report[task_name] = {}
            best_key = None
            best_metric = -np.inf
            best_payload = None
            for set_name, kinds in cv_results.get(task_name, {}).items():
                if "error" in kinds:
                    report[task_name][set_name] = dict(kinds)
                    continue
                features = list(
                    models_conf["feature_sets"].get(set_name) or DEFAULT_FEATURES
                )
                design = self._design_for(task, features)
                report[task_name][set_name] = {}
                for kind, info in kinds.items():
                    if "error" in info:
                        report[task_name][set_name][kind] = dict(info)
                        continue
                    fit_seed = info["seed"]
                    params = info["params"]
                    grid = {key: [value] for key, value in params.items()}
                    if task["kind_family"] == "regression":
                        fit = fit_regression(
                            kind, design.X_train, design.y_train,
                            grid=grid or {}, cv_folds=int(models_conf["cv_folds"]),
                            seed=fit_seed,
                        )
                        evaluation = evaluate_regression(
                            fit.model, design.X_test, design.y_test_original,
                            design.back_transform,
                        )
                        metrics = {"mse": evaluation.mse, "r2": evaluation.r2}
                        primary = evaluation.r2 if evaluation.r2 is not None else -np.inf
                    else:
                        fit = fit_classifier(
                            kind, design.X_train, design.y_train.astype(int),
                            grid=grid or {}, cv_folds=int(models_conf["cv_folds"]),
                            seed=fit_seed,
                        )
                        evaluation = evaluate_classifier(
                            fit.model, design.X_test, design.y_test.astype(int)
                        )
                        metrics = {
                            "accuracy": evaluation.accuracy,
                            "average_recall": evaluation.average_recall,
                            "recall": {str(k): v for k, v in evaluation.recall.items()},
                            "precision": {str(k): v for k, v in evaluation.precision.items()},
                        }
                        primary = (
                            evaluation.average_recall
                            if evaluation.average_recall is not None
                            else -np.inf
                        )
                    entry = {
                        "params": params,
                        "metrics": metrics,
                        "n_train": int(design.X_train.shape[0]),
                        "n_test": int(design.X_test.shape[0]),
                        "seed": fit_seed,
                    }
                    report[task_name][set_name][kind] = entry
                    if primary > best_metric:
                        best_metric = primary
                        best_key = (set_name, kind)
                        best_payload = (fit, design)
            if best_key is not None and best_payload is not None:
                fit, design = best_payload
                metric = "r2" if task["kind_family"] == "regression" else "average_recall"
                y_for_metric = (
                    design.y_test_original
                    if task["kind_family"] == "regression"
                    else design.y_test.astype(int)
                )
                importances = permutation_importance(
                    fit.model,
                    design.X_test,
                    y_for_metric,
                    metric,
                    design.groups,
                    n_perm=int(models_conf["n_perm"]),
                    seed=derive_seed(seed, "perm", task_name),
                    back_transform=design.back_transform,
                )
                for feature, value in importances.items():
                    importance_rows.append(
                        [task_name, best_key[0], best_key[1], metric, feature, value]
                    )
                report[task_name]["best"] = {
                    "feature_set": best_key[0],
                    "kind": best_key[1],
                    "metric": metric,
                    "value": None if best_metric == -np.inf else float(best_metric),
                }
            if task["kind_family"] == "classification":
                design = self._design_for(task, list(DEFAULT_FEATURES))
                X_all = np.vstack([design.X_train, design.X_test])
                y_all = np.concatenate(
                    [design.y_train, design.y_test]
                ).astype(int)
                if len(np.unique(y_all)) == 2 and X_all.shape[0] >= 2:
                    report[task_name]["bayes_accuracy_upper_bound"] = (
                        bayes_accuracy_upper_bound(X_all, y_all)
                    )
        out_dir = self.stage_dir("evaluate")
        report_path = out_dir / "model_report.json"
        write_json(report_path, report)
        imp_path = out_dir / "perm_importance.csv"
        write_csv(
            imp_path,
            ["task", "feature_set", "model", "metric", "feature", "importance"],
            importance_rows,
        )
        return [report_path, imp_path], {"tasks": len(report)}, {}

    # ------------------------------------------------------------ report

    @staticmethod
    def _histogram(values: Sequence[float], width: float) -> list[list]:
        rows = []
        if values:
            top = max(values)
            edges = np.arange(0.0, top + width, width)
            counts, _ = np.histogram(values, bins=np.append(edges, edges[-1] + width))
            for lo, count in zip(edges, counts):
                rows.append([lo, lo + width, int(count)])
        return rows

    @staticmethod
    def _age_bin(age: float) -> str:
        for lo, hi in AGE_BINS:
            if lo <= age <= hi:
                return f"{lo}-{hi if hi < 200 else 'plus'}"
        return "under-18"

    def _stage_report(self):
        out_dir = self.stage_dir("report")
        metrics: dict[str, Any] = {}
        manifest_stages = self.manifest["stages"]
        metrics["population"] = manifest_stages["movers"]["rows"]
        metrics["pairs"] = manifest_stages["ties"]["rows"]

        header, feat_rows = read_csv(self.stage_dir("features") / "features.csv")
        idx = {name: i for i, name in enumerate(header)}
        move_d = [float(r[idx["distance_move"]]) for r in feat_rows]
        ea_pre = [float(r[idx["distance_ea_pre"]]) for r in feat_rows]
        ea_post = [float(r[idx["distance_ea_post"]]) for r in feat_rows]
        outputs = []
        hist_specs = [
            ("move_distance_hist.csv", move_d, 25.0),
            ("ea_pre_distance_hist.csv", ea_pre, 25.0),
            ("ea_post_distance_hist.csv", ea_post, 25.0),
        ]
        for name, values, width in hist_specs:
            path = out_dir / name
            write_csv(path, ["km_lo", "km_hi", "count"], self._histogram(values, width))
            outputs.append(path)
        if move_d:
            metrics["median_move_distance_km"] = float(np.median(move_d))
            metrics["median_ea_pre_distance_km"] = float(np.median(ea_pre))
            metrics["median_ea_post_distance_km"] = float(np.median(ea_post))

        month_rows: dict[tuple[int, str], int] = {}
        for r in feat_rows:
            key = (int(r[idx["m"]]), self._age_bin(float(r[idx["age_ego"]])))
            month_rows[key] = month_rows.get(key, 0) + 1
        path = out_dir / "month_histogram_by_age.csv"
        write_csv(
            path,
            ["m", "age_group", "count"],
            [[m, group, count] for (m, group), count in sorted(month_rows.items())],
        )
        outputs.append(path)

        _, pair_table = read_csv(self.stage_dir("ties") / "pairs.csv")
        pyramid: dict[tuple[str, str, str], int] = {}
        for row in pair_table:
            for role, age_col, gender_col in (("ego", 3, 4), ("alter", 5, 6)):
                if row[age_col] == "":
                    continue
                key = (role, self._age_bin(float(row[age_col])), row[gender_col])
                pyramid[key] = pyramid.get(key, 0) + 1
        path = out_dir / "population_pyramid.csv"
        write_csv(
            path,
            ["role", "age_group", "gender", "count"],
            [[*key, count] for key, count in sorted(pyramid.items())],
        )
        outputs.append(path)

        gaps: dict[str, Any] = {}
        for label, stage, prefix in (
            ("mover", "series", "corr"),
            ("control", "control", "control_corr"),
        ):
            for quantity in ("count", "fraction"):
                path = self.stage_dir(stage) / f"{prefix}_{quantity}.csv"
                if path.exists():
                    gap = _corr_block_gap(path)
                    if gap is not None:
                        gaps[f"{label}_{quantity}"] = gap
        metrics["corr_block_gap"] = gaps

        with open(self.stage_dir("cluster") / "agreement.json", "r", encoding="utf-8") as handle:
            metrics["cluster"] = json.load(handle)
        _, crossing_rows = read_csv(self.stage_dir("cluster") / "crossings.csv")
        metrics["crossings"] = [
            {"quantity": r[0], "window": [int(r[1]), int(r[2])], "cluster": int(r[3]),
             "crossing": None if r[4] == "" else float(r[4])}
            for r in crossing_rows
        ]
        control_crossings = self.stage_dir("control") / "control_crossings.csv"
        if control_crossings.exists():
            _, rows = read_csv(control_crossings)
            metrics["control_crossings"] = [
                {"quantity": r[0], "window": [int(r[1]), int(r[2])], "cluster": int(r[3]),
                 "crossing": None if r[4] == "" else float(r[4])}
                for r in rows
            ]
        metrics["control"] = manifest_stages["control"]["rows"]

        with open(self.stage_dir("evaluate") / "model_report.json", "r", encoding="utf-8") as handle:
            metrics["models"] = json.load(handle)

        truth_path = self.stage_dir("synth") / "ground_truth.json"
        if "synth" in manifest_stages and truth_path.exists():
            truth = load_ground_truth(truth_path)
            statuses = self.statuses()
            pairs = self.pairs()
            _, cluster_rows = read_csv(self.stage_dir("cluster") / "clusters.csv")
            directions_map = {}
            agreement = metrics["cluster"].get("count")
            if agreement:
                mapping = agreement["cluster_directions"]
                for row in cluster_rows:
                    if row[2] != "":
                        directions_map[(row[0], row[1])] = mapping[int(row[2])]
            _, summary_rows = read_csv(self.stage_dir("series") / "summaries.csv")
            pair_counts = {
                (r[0], r[1]): (float(r[3]), float(r[4])) for r in summary_rows
            }
            oracle = score_pipeline(
                truth,
                statuses=statuses,
                recovered_pairs=pairs,
                pair_directions=directions_map,
                pair_counts=pair_counts,
            )
            oracle_path = out_dir / "oracle_report.json"
            write_json(oracle_path, oracle)
            outputs.append(oracle_path)
            metrics["oracle"] = _sanitize(oracle)

        metrics_path = out_dir / "metrics.json"
        write_json(metrics_path, metrics)
        outputs.append(metrics_path)

        summary_path = out_dir / "summary.txt"
        lines = [
            "pipeline summary",
            "================",
            f"movers: {metrics['population'].get('movers', 0)}  "
            f"non-movers: {metrics['population'].get('non_movers', 0)}  "
            f"unknown: {metrics['population'].get('unknown', 0)}",
            f"strong pairs: {metrics['pairs'].get('pairs', 0)} "
            f"({metrics['pairs'].get('unique_egos', 0)} egos, "
            f"{metrics['pairs'].get('unique_alters', 0)} alters)",
        ]
        if "median_move_distance_km" in metrics:
            lines.append(
                f"median move distance: {metrics['median_move_distance_km']:.1f} km"
            )
        for quantity in ("count", "fraction"):
            block = metrics["cluster"].get(quantity)
            if block:
                lines.append(
                    f"{quantity}: k*={block['k_star']}, "
                    f"rise/decay agreement={block['agreement']:.3f}"
                )
        if "oracle" in metrics:
            oracle = metrics["oracle"]
            lines.append(
                "oracle: mover precision="
                f"{oracle.get('mover_precision')}, recall={oracle.get('mover_recall')}, "
                f"pair recovery={oracle.get('planted_pair_recovery')}"
            )
        with open(summary_path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")
        outputs.append(summary_path)
        return outputs, {"files": len(outputs)}, {}
