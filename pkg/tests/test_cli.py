"""End-to-end tests of the command line interface."""

import json
import re
from pathlib import Path

import numpy as np
import pytest

from probseg.cli import ConfigError, RunConfig, main, parse_config_file
from probseg.model import ValidationError
from probseg.runio import load_run, save_run
from probseg.simulator import NoiseConfig, generate_scene, simulate_samples
from probseg.runio import RunMeta


SIM = ["simulate", "--width", "32", "--height", "32", "--objects", "1",
       "--classes", "2", "--passes", "4", "--seed", "5"]


def _simulate(run_dir, extra=()):
    rc = main(SIM + list(extra) + ["-o", str(run_dir)])
    assert rc == 0
    return run_dir


class TestConfigFile:
    def test_parses_keys_comments_and_blanks(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            "# tuning\n"
            "\n"
            "fusion.iou_threshold = 0.4\n"
            "simulate.passes = 6\n"
            "metrics.fbw_alpha = raw\n"
        )
        values = parse_config_file(cfg)
        assert values == {
            "fusion.iou_threshold": 0.4,
            "simulate.passes": 6,
            "metrics.fbw_alpha": "raw",
        }

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("fusion.bogus = 1\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(cfg)

    def test_bad_value_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("simulate.passes = many\n")
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_file(cfg)

    def test_missing_equals_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("simulate.passes 6\n")
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_config_file(cfg)

    def test_defaults_without_config(self):
        cfg = RunConfig.load(None, {})
        assert cfg.passes == 24
        assert cfg.fusion.min_detections == 2
        assert cfg.metrics.ace_bins == 10

    def test_missing_config_file(self):
        with pytest.raises(ConfigError, match="config file not found"):
            RunConfig.load("/nonexistent/path.cfg", {})

    def test_flags_beat_config_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("simulate.passes = 6\nfusion.iou_threshold = 0.4\n")
        run = RunConfig.load(str(cfg), {"simulate.passes": 9})
        assert run.passes == 9
        assert run.fusion.iou_threshold == 0.4

    def test_none_overrides_are_skipped(self, tmp_path):
        run = RunConfig.load(None, {"simulate.passes": None})
        assert run.passes == 24

    def test_env_var_supplies_config(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("simulate.passes = 7\n")
        monkeypatch.setenv("PROBSEG_CONFIG", str(cfg))
        run = RunConfig.load(None, {})
        assert run.passes == 7


class TestSimulateCommand:
    def test_writes_complete_run(self, tmp_path):
        run = _simulate(tmp_path / "run")
        for name in ("manifest.json", "ground_truth.json", "provenance.json"):
            assert (run / name).is_file()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["num_passes"] == 4
        assert len(manifest["pass_files"]) == 4
        meta, samples, scene = load_run(run)
        assert len(samples) == 4
        assert scene is not None and len(scene.instances) == 1

    def test_zero_passes_is_config_error(self, tmp_path, capsys):
        rc = main(["simulate", "--passes", "0", "-o", str(tmp_path / "r")])
        assert rc == 2
        assert "M must be >= 1" in capsys.readouterr().err

    def test_summary_line(self, tmp_path, capsys):
        _simulate(tmp_path / "run")
        out = capsys.readouterr().out
        assert re.search(r"1 objects, M=4", out)

    def test_deterministic_across_invocations(self, tmp_path):
        _simulate(tmp_path / "a")
        _simulate(tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()


class TestFuseCommand:
    def test_writes_observations(self, tmp_path):
        run = _simulate(tmp_path / "run")
        assert main(["fuse", str(run)]) == 0
        listing = json.loads((run / "observations.json").read_text())
        assert listing["count"] == 1
        rec = listing["observations"][0]
        assert rec["size"] == 4
        assert sorted(rec["files"]) == ["aleatoric", "epistemic", "heatmap", "mean"]
        for name in rec["files"].values():
            assert (run / name).is_file()
        # member references resolve into the stored passes
        meta, samples, _ = load_run(run)
        for p, k in rec["members"]:
            assert 0 <= p < len(samples)
            assert 0 <= k < len(samples[p].detections)

    def test_empty_fusion_warns_but_succeeds(self, tmp_path, capsys):
        run = _simulate(tmp_path / "run", extra=["--objects", "0"])
        rc = main(["fuse", str(run)])
        captured = capsys.readouterr()
        assert rc == 0
        assert "no observations survived fusion" in captured.err
        listing = json.loads((run / "observations.json").read_text())
        assert listing["count"] == 0

    def test_missing_run_dir(self, tmp_path, capsys):
        rc = main(["fuse", str(tmp_path / "nope")])
        assert rc == 2
        assert "no manifest.json" in capsys.readouterr().err

    def test_fusion_flags_are_applied(self, tmp_path):
        run = _simulate(tmp_path / "run")
        assert main(["fuse", str(run), "--min-detections", "5"]) == 0
        listing = json.loads((run / "observations.json").read_text())
        # 4 passes of an identical object cannot reach 5 members
        assert listing["count"] == 0
        assert listing["fusion"]["min_detections"] == 5


class TestEvalCommand:
    def test_writes_report(self, tmp_path):
        run = _simulate(tmp_path / "run")
        assert main(["eval", str(run)]) == 0
        report = json.loads((run / "report.json").read_text())
        assert report["passes"] == 4
        assert report["counts"] == {"tp": 1, "fp": 0, "fn": 0}
        np.testing.assert_allclose(report["pmq"], 1.0, atol=1e-9)
        assert (run / "sparsification.csv").is_file()
        header = (run / "sparsification.csv").read_text().splitlines()[0]
        assert header == "fraction,brier,oracle_brier"

    def test_requires_ground_truth(self, tmp_path, capsys):
        scene = generate_scene(32, 32, 1, 2, seed=5)
        sim = simulate_samples(scene, 4, NoiseConfig(seed=5), class_count=2)
        meta = RunMeta("x", 32, 32, ("background", "class_1", "class_2"))
        save_run(meta, list(sim.samples), None, tmp_path / "run")
        rc = main(["eval", str(tmp_path / "run")])
        assert rc == 2
        assert "ground truth required" in capsys.readouterr().err

    def test_sweep_writes_per_m_reports(self, tmp_path):
        run = _simulate(tmp_path / "run")
        assert main(["eval", str(run), "--sweep"]) == 0
        written = sorted(p.name for p in run.glob("report_m*.json"))
        assert written == ["report_m1.json", "report_m2.json", "report_m4.json"]
        for name in written:
            payload = json.loads((run / name).read_text())
            assert payload["passes"] == int(name[len("report_m"):-len(".json")])
        assert (run / "sparsification_m4.csv").is_file()

    def test_metric_flags(self, tmp_path):
        run = _simulate(tmp_path / "run")
        assert main(["eval", str(run), "--ace-bins", "5", "--fbw-alpha", "raw"]) == 0
        report = json.loads((run / "report.json").read_text())
        assert len(report["ace_bins"]) == 5


class TestRenderCommand:
    def test_requires_fused_observations(self, tmp_path, capsys):
        run = _simulate(tmp_path / "run")
        rc = main(["render", str(run), "--which", "mean"])
        assert rc == 2
        assert "run 'fuse' first" in capsys.readouterr().err

    def test_renders_pgm_files(self, tmp_path):
        run = _simulate(tmp_path / "run")
        main(["fuse", str(run)])
        for which in ("mean", "heatmap", "aleatoric", "epistemic"):
            assert main(["render", str(run), "--which", which]) == 0
            assert (run / f"obs_000_{which}.pgm").is_file()

    def test_gray_levels_scale_with_grid(self, tmp_path):
        from probseg.runio import read_grid_file

        run = _simulate(tmp_path / "run")
        main(["fuse", str(run)])
        main(["render", str(run), "--which", "mean"])
        meta, _, _ = load_run(run)
        grid = read_grid_file(run / "obs_000_mean.bin", meta).astype(np.float64)
        raw = (run / "obs_000_mean.pgm").read_bytes()
        m = re.match(rb"P5\n(\d+) (\d+)\n255\n", raw)
        w, h = int(m.group(1)), int(m.group(2))
        assert (w, h) == (32, 32)
        payload = np.frombuffer(raw[m.end():], dtype=np.uint8).reshape(h, w)
        expected = np.clip(np.rint(255.0 * grid), 0, 255).astype(np.uint8)
        np.testing.assert_array_equal(payload, expected)

    def test_variance_gray_scale(self, tmp_path):
        """Variance grids map 0.25 (the maximum possible) to white."""
        from probseg.cli import VARIANCE_GRAY_SCALE

        assert VARIANCE_GRAY_SCALE == 0.25
        run = _simulate(tmp_path / "run", extra=["--pixel-flip-prob", "0.2"])
        assert main(["fuse", str(run)]) == 0
        assert main(["render", str(run), "--which", "epistemic"]) == 0
        from probseg.runio import read_grid_file

        meta, _, _ = load_run(run)
        grid = read_grid_file(run / "obs_000_epistemic.bin", meta).astype(np.float64)
        raw = (run / "obs_000_epistemic.pgm").read_bytes()
        m = re.match(rb"P5\n(\d+) (\d+)\n255\n", raw)
        payload = np.frombuffer(raw[m.end():], dtype=np.uint8).reshape(32, 32)
        expected = np.clip(np.rint(255.0 * grid / 0.25), 0, 255).astype(np.uint8)
        np.testing.assert_array_equal(payload, expected)


class TestExitCodes:
    def test_validation_errors_exit_two(self, tmp_path, capsys):
        rc = main(["simulate", "--width", "4", "--height", "4",
                   "--objects", "1", "-o", str(tmp_path / "r")])
        assert rc == 2
        assert "could not fit" in capsys.readouterr().err

    def test_unknown_config_key_exits_two(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("nope = 1\n")
        rc = main(SIM + ["--config", str(cfg), "-o", str(tmp_path / "r")])
        assert rc == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_config_file_drives_simulation(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("simulate.passes = 2\nsimulate.objects = 1\n"
                       "simulate.width = 32\nsimulate.height = 32\n"
                       "simulate.classes = 2\nsimulate.seed = 5\n")
        rc = main(["simulate", "--config", str(cfg), "-o", str(tmp_path / "r")])
        assert rc == 0
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["num_passes"] == 2
