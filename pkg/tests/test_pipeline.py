"""Stage dependencies, caching, determinism, CLI exit codes."""

from __future__ import annotations

import filecmp
import json
from pathlib import Path

import pytest

from cdrmove.cli import main as cli_main
from cdrmove.config import ConfigError, load_config, validate
from cdrmove.pipeline import DependencyError, Runner, StaleArtifactError

FAST_OVERRIDES = {
    "seed": 7,
    "synth": {
        "n_users": 120,
        "mover_fraction": 0.08,
        "control_ties": 8,
        "bg_call_rate": 2.0,
    },
    "cluster": {"k_range": [2, 3], "bootstrap": 12, "restarts": 3},
    "models": {
        "regression_kinds": ["OLS", "Ridge"],
        "classification_kinds": ["LogRegL2"],
        "grids": {"Ridge": {"lam": [0.1, 1.0]}, "LogRegL2": {"lam": [1.0]}},
    },
}


def fast_config(out_dir):
    return load_config(None, {**FAST_OVERRIDES, "output_dir": str(out_dir)})


def run_all(out_dir, extra=None):
    overrides = {**FAST_OVERRIDES, "output_dir": str(out_dir)}
    if extra:
        for key, value in extra.items():
            if isinstance(value, dict):
                overrides[key] = {**overrides.get(key, {}), **value}
            else:
                overrides[key] = value
    runner = Runner(load_config(None, overrides))
    runner.run("all")
    return runner


def tree_files(root: Path):
    return sorted(
        p.relative_to(root) for p in root.rglob("*") if p.is_file()
    )


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            validate({"not_a_key": 1})
        with pytest.raises(ConfigError):
            validate({"ties": {"bogus": 2}})

    def test_defaults_validate(self):
        config = validate({})
        assert config["ties"]["top_k"] == 5

    def test_bad_window_start(self):
        with pytest.raises(ConfigError):
            validate({"window_start": "january"})


class TestStageMachinery:
    def test_missing_dependency_error(self, tmp_path):
        runner = Runner(fast_config(tmp_path))
        with pytest.raises(DependencyError, match="run stage"):
            runner.run("cluster")

    def test_rerun_is_cache_hit(self, tmp_path):
        runner = run_all(tmp_path)
        executed = runner.run("cluster")
        assert executed == []
        timings = json.loads((tmp_path / "timings.json").read_text())
        assert timings["stages"]["cluster"]["cache_hit"] is True

    def test_stale_artifact_error(self, tmp_path):
        run_all(tmp_path)
        # A changed ties config invalidates ties; running series must refuse.
        overrides = {
            **FAST_OVERRIDES,
            "output_dir": str(tmp_path),
            "ties": {"top_k": 3},
        }
        stale = Runner(load_config(None, overrides))
        with pytest.raises(StaleArtifactError):
            stale.run("series")
        # Rerunning the stale stage itself is allowed and repairs the chain.
        assert stale.run("ties") == ["ties"]
        assert stale.run("series") == ["series"]

    def test_full_run_emits_oracle_report(self, tmp_path):
        run_all(tmp_path)
        oracle = json.loads((tmp_path / "report" / "oracle_report.json").read_text())
        assert oracle["mover_precision"] == 1.0
        assert oracle["mover_recall"] == 1.0

    def test_zero_movers_clean_exit(self, tmp_path):
        # All users stay put: empty downstream tables, no stage may crash.
        runner = run_all(
            tmp_path,
            extra={"synth": {"mover_fraction": 0.0, "control_ties": 6}},
        )
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["stages"]["movers"]["rows"]["movers"] == 0
        assert manifest["stages"]["ties"]["rows"]["pairs"] == 0
        assert manifest["stages"]["cluster"]["rows"]["clustered"] == 0
        assert (tmp_path / "report" / "summary.txt").exists()

    def test_manifest_covers_stages(self, tmp_path):
        run_all(tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        for stage in ("synth", "ingest", "movers", "ties", "cluster", "report"):
            assert stage in manifest["stages"]
            for rel, digest in manifest["stages"][stage]["outputs"].items():
                assert (tmp_path / rel).exists()
                assert len(digest) == 64
        # Status classes partition the observed population.
        movers = manifest["stages"]["movers"]["rows"]
        assert (
            movers["movers"] + movers["non_movers"] + movers["unknown"]
            == manifest["stages"]["ingest"]["notes"]["users"]
        )


class TestDeterminism:
    def test_two_runs_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_all(a)
        run_all(b, extra=None)
        files_a = [p for p in tree_files(a) if p.name != "timings.json"]
        files_b = [p for p in tree_files(b) if p.name != "timings.json"]
        assert files_a == files_b
        for rel in files_a:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel

    def test_threads_flag_does_not_change_results(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        Runner(fast_config(a), threads=1).run("all")
        Runner(fast_config(b), threads=8).run("all")
        for rel in [p for p in tree_files(a) if p.name != "timings.json"]:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel


class TestCli:
    def test_default_config_prints_json(self, capsys):
        assert cli_main(["default-config"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert "synth" in payload

    def test_bad_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"nope": 1}')
        assert cli_main(["run", "synth", "--config", str(bad)]) == 2

    def test_invalid_json_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert cli_main(["run", "synth", "--config", str(bad)]) == 2

    def test_missing_dependency_exit_3(self, tmp_path):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps({"output_dir": str(tmp_path / "out")}))
        assert cli_main(["run", "homes", "--config", str(cfg)]) == 3

    def test_run_synth_then_cache_hit(self, tmp_path, capsys):
        cfg = tmp_path / "config.json"
        cfg.write_text(
            json.dumps(
                {
                    "output_dir": str(tmp_path / "out"),
                    "synth": {"n_users": 40, "mover_fraction": 0.05, "control_ties": 4},
                }
            )
        )
        assert cli_main(["run", "synth", "--config", str(cfg)]) == 0
        capsys.readouterr()
        assert cli_main(["run", "synth", "--config", str(cfg)]) == 0
        assert "cache hit" in capsys.readouterr().out
