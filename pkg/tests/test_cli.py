"""Command-line interface: resolution order, exit codes, artifacts."""

import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from nsfactory import cli
from nsfactory.factory import load_manifest, read_pfm, write_pfm


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    """A tiny exported plane fixture shared by the read-only tests."""
    out = tmp_path_factory.mktemp("fix")
    code = cli.run([
        "gen-fixture", "--name", "plane", "--out", str(out),
        "--baselines", "0.5", "--views", "2",
    ])
    assert code == 0
    return out


class TestResolution:
    def test_defaults_fill_unset_options(self, tmp_path, capsys):
        code = cli.run(["gen-fixture", "--out", str(tmp_path / "d"), "--views", "1"])
        assert code == 0
        resolved = json.loads((tmp_path / "d" / "resolved_config.json").read_text())
        assert resolved["name"] == "plane"
        assert resolved["baselines"] == [0.5]
        assert resolved["seed"] == 0

    def test_config_file_overrides_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"views": 1, "baselines": [0.25]}))
        out = tmp_path / "d"
        code = cli.run(["gen-fixture", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["views"] == 1
        assert resolved["baselines"] == [0.25]

    def test_flags_override_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"views": 3, "seed": 7}))
        out = tmp_path / "d"
        code = cli.run([
            "gen-fixture", "--config", str(cfg), "--out", str(out), "--views", "1",
        ])
        assert code == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["views"] == 1
        assert resolved["seed"] == 7

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        code = cli.run([
            "gen-fixture", "--config", str(cfg), "--out", str(tmp_path / "d"),
        ])
        assert code == 2

    def test_non_object_config_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        code = cli.run([
            "gen-fixture", "--config", str(cfg), "--out", str(tmp_path / "d"),
        ])
        assert code == 2

    def test_resolved_config_is_sorted_and_stamped(self, fixture_dir):
        text = (fixture_dir / "resolved_config.json").read_text()
        resolved = json.loads(text)
        assert resolved["command"] == "gen-fixture"
        keys = [line.split('"')[1] for line in text.splitlines() if line.startswith('  "')]
        assert keys == sorted(keys)


class TestExitCodes:
    def test_missing_required_option(self, capsys):
        assert cli.run(["optimize", "--out", "/tmp/unused"]) == 2

    def test_unknown_subcommand(self, capsys):
        assert cli.run(["frobnicate"]) == 2

    def test_no_subcommand(self, capsys):
        assert cli.run([]) == 2

    def test_missing_input_file_is_domain_error(self, tmp_path, capsys):
        code = cli.run([
            "eval", "--pred", str(tmp_path / "a.pfm"),
            "--gt", str(tmp_path / "b.pfm"), "--out", str(tmp_path / "o"),
        ])
        assert code == 1

    def test_record_out_of_range(self, fixture_dir, tmp_path, capsys):
        code = cli.run([
            "optimize", "--manifest", str(fixture_dir / "manifest.jsonl"),
            "--record", "99", "--out", str(tmp_path / "o"), "--steps", "1",
        ])
        assert code == 1

    def test_bad_baselines_text(self, tmp_path, capsys):
        code = cli.run([
            "gen-fixture", "--out", str(tmp_path / "o"), "--baselines", "a,b",
        ])
        assert code == 2


class TestThreads:
    def test_flag_sets_thread_count(self, capsys):
        before = torch.get_num_threads()
        try:
            assert cli.run(["--threads", "1", "selftest"]) == 0
            assert torch.get_num_threads() == 1
        finally:
            torch.set_num_threads(before)

    def test_env_variable_applies(self, monkeypatch, tmp_path, capsys):
        before = torch.get_num_threads()
        monkeypatch.setenv("NSF_THREADS", "1")
        try:
            code = cli.run(["gen-fixture", "--out", str(tmp_path / "o"), "--views", "1"])
            assert code == 0
            assert torch.get_num_threads() == 1
        finally:
            torch.set_num_threads(before)

    def test_invalid_env_is_usage_error(self, monkeypatch, capsys):
        monkeypatch.setenv("NSF_THREADS", "many")
        assert cli.run(["selftest"]) == 2

    def test_flag_beats_env(self, monkeypatch, capsys):
        before = torch.get_num_threads()
        monkeypatch.setenv("NSF_THREADS", "not-a-number")
        try:
            assert cli.run(["--threads", "1", "selftest"]) == 0
        finally:
            torch.set_num_threads(before)


class TestGenFixture:
    def test_layout_and_count(self, fixture_dir, capsys):
        manifest = load_manifest(fixture_dir / "manifest.jsonl")
        assert manifest.count == 2
        for record in manifest.records:
            for rel in record["paths"].values():
                assert (fixture_dir / rel).is_file()

    def test_stdout_reports_manifest(self, tmp_path, capsys):
        code = cli.run([
            "gen-fixture", "--out", str(tmp_path / "d"), "--views", "1",
        ])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("manifest=")
        assert lines[1] == "count=1"


class TestOptimizeEvalPlot:
    def test_optimize_writes_estimate_and_trace(self, fixture_dir, tmp_path, capsys):
        out = tmp_path / "opt"
        code = cli.run([
            "optimize", "--manifest", str(fixture_dir / "manifest.jsonl"),
            "--record", "0", "--out", str(out), "--steps", "5",
        ])
        assert code == 0
        disp = read_pfm(out / "disparity.pfm")
        assert disp.shape == (64, 64)
        trace = (out / "trace.csv").read_text().splitlines()
        assert trace[0] == "step,loss,bad2"
        assert len(trace) == 7  # header + steps 0..5

    def test_eval_writes_reports(self, fixture_dir, tmp_path, capsys):
        gt = fixture_dir / "plane" / "pose000_b0.5_64x64_disp.pfm"
        out = tmp_path / "ev"
        code = cli.run([
            "eval", "--pred", str(gt), "--gt", str(gt), "--out", str(out),
        ])
        assert code == 0
        assert (out / "report.txt").is_file()
        assert (out / "report.csv").is_file()
        table = capsys.readouterr().out
        assert "0.00" in table and "custom" in table

    def test_eval_known_dataset_tau_default(self, fixture_dir, tmp_path, capsys):
        gt = fixture_dir / "plane" / "pose000_b0.5_64x64_disp.pfm"
        out = tmp_path / "ev"
        code = cli.run([
            "eval", "--pred", str(gt), "--gt", str(gt), "--out", str(out),
            "--dataset-id", "kitti",
        ])
        assert code == 0
        csv_text = (out / "report.csv").read_text()
        assert ",3.0," in csv_text

    def test_eval_with_right_gt_adds_noc(self, fixture_dir, tmp_path, capsys):
        base = fixture_dir / "plane"
        gt = base / "pose000_b0.5_64x64_disp.pfm"
        out = tmp_path / "ev"
        code = cli.run([
            "eval", "--pred", str(gt), "--gt", str(gt),
            "--gt-right", str(gt), "--out", str(out),
        ])
        assert code == 0

    def test_plot_hist_recounts(self, fixture_dir, tmp_path, capsys):
        out = tmp_path / "hist"
        code = cli.run([
            "plot-hist", "--manifest", str(fixture_dir / "manifest.jsonl"),
            "--out", str(out),
        ])
        assert code == 0
        assert (out / "histogram.png").stat().st_size > 0
        rows = (out / "histogram.csv").read_text().splitlines()
        assert rows[0] == "bin_lo,count"
        counts = {int(r.split(",")[0]): int(r.split(",")[1]) for r in rows[1:]}
        manifest = load_manifest(fixture_dir / "manifest.jsonl")
        assert sum(counts.values()) == sum(manifest.histogram)
        assert counts[16] > 0  # plane at depth 2, b=0.5: disparity 16


class TestFitAndExport:
    def test_fit_then_export_round_trip(self, tmp_path, capsys):
        fit_out = tmp_path / "fit"
        code = cli.run([
            "fit-nerf", "--out", str(fit_out), "--fixture", "textured_cube",
            "--steps", "10", "--views", "3", "--res", "16",
            "--eval-every", "5", "--batch-rays", "128", "--samples-per-ray", "32",
        ])
        assert code == 0
        out_lines = dict(
            line.split("=", 1) for line in capsys.readouterr().out.strip().splitlines()
        )
        assert Path(out_lines["checkpoint"]).is_file()
        assert float(out_lines["holdout_psnr"]) > 0
        trace = (fit_out / "trace.csv").read_text().splitlines()
        assert len(trace) == 11  # header + 10 steps

        exp_out = tmp_path / "exp"
        code = cli.run([
            "export-dataset", "--checkpoint", str(fit_out / "checkpoint.nsfc"),
            "--fixture", "textured_cube", "--out", str(exp_out),
            "--views", "2", "--res", "16", "--baselines", "0.4",
            "--samples-per-ray", "64",
        ])
        assert code == 0
        manifest = load_manifest(exp_out / "manifest.jsonl")
        assert manifest.count == 2
        assert manifest.records[0]["baseline"] == 0.4


class TestSelftest:
    def test_all_checks_pass(self, capsys):
        assert cli.run(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "8/8 checks passed" in out
        assert "FAIL" not in out
