import json

import numpy as np
import pytest
from click.testing import CliRunner

from patchpurify import (
    PatchSpec,
    PurifyConfig,
    WorkloadSpec,
    gradient_background,
    load_png,
    purify,
    purify_plus,
    save_png,
)
from patchpurify.cli import EXIT_BACKEND, EXIT_CONFIG, EXIT_IO, main
from patchpurify.patchlab import run_case
from patchpurify.resolver import BicubicUpscaler


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def patched_png(tmp_path):
    wl = WorkloadSpec(images=1, patch=PatchSpec(sizes=(64,)), seed=0)
    _, _, adv, _ = wl.case(0)
    path = tmp_path / "adv.png"
    save_png(adv, path)
    return path


def workload_file(tmp_path, **overrides):
    doc = {
        "images": 2, "height": 96, "width": 96, "background": "gradient", "seed": 0,
        "patch": {"kind": "localized", "sizes": [32], "amplitude": 1.0},
    }
    doc.update(overrides)
    path = tmp_path / "workload.json"
    path.write_text(json.dumps(doc))
    return path


class TestPurifyCommand:
    def test_single_file(self, runner, patched_png, tmp_path):
        out = tmp_path / "out.png"
        result = runner.invoke(main, ["purify", "--in", str(patched_png), "--out", str(out),
                                      "--backend", "classical"])
        assert result.exit_code == 0, result.output
        assert out.is_file()

    def test_parity_with_library(self, runner, patched_png, tmp_path):
        out = tmp_path / "out.png"
        result = runner.invoke(main, ["purify", "--in", str(patched_png), "--out", str(out)])
        assert result.exit_code == 0
        direct = purify(load_png(patched_png), PurifyConfig(), BicubicUpscaler())
        ref = tmp_path / "ref.png"
        save_png(direct.image, ref)
        assert out.read_bytes() == ref.read_bytes()

    def test_invalid_lambda_exit_code(self, runner, patched_png, tmp_path):
        result = runner.invoke(main, ["purify", "--in", str(patched_png),
                                      "--out", str(tmp_path / "o.png"), "--lambda", "2.0"])
        assert result.exit_code == EXIT_CONFIG

    def test_enhance_constant_round_trip(self, runner, tmp_path):
        from patchpurify import ImageTensor
        src = tmp_path / "const.png"
        save_png(ImageTensor.constant(64, 64, 3, 0.4), src)
        out = tmp_path / "out.png"
        result = runner.invoke(main, ["purify", "--in", str(src), "--out", str(out), "--enhance"])
        assert result.exit_code == 0
        assert np.abs(load_png(out).data - load_png(src).data).max() <= 1e-6

    def test_missing_input_is_io_error(self, runner, tmp_path):
        result = runner.invoke(main, ["purify", "--in", str(tmp_path / "missing.png"),
                                      "--out", str(tmp_path / "o.png")])
        assert result.exit_code == EXIT_IO

    def test_neural_without_model_is_config_error(self, runner, patched_png, tmp_path):
        result = runner.invoke(main, ["purify", "--in", str(patched_png),
                                      "--out", str(tmp_path / "o.png"), "--backend", "neural"])
        assert result.exit_code == EXIT_CONFIG

    def test_bad_model_is_backend_error(self, runner, patched_png, tmp_path):
        result = runner.invoke(main, ["purify", "--in", str(patched_png),
                                      "--out", str(tmp_path / "o.png"),
                                      "--backend", "neural", "--model", str(tmp_path / "x.safetensors")])
        assert result.exit_code == EXIT_BACKEND

    def test_neural_backend_end_to_end(self, runner, artifact_dir, tmp_path, rng):
        src = tmp_path / "in.png"
        save_png(gradient_background(32, 32, rng), src)
        out = tmp_path / "out.png"
        result = runner.invoke(main, [
            "purify", "--in", str(src), "--out", str(out), "--backend", "neural",
            "--model", str(artifact_dir / "gen_x4.safetensors"),
            "--model", str(artifact_dir / "gen_x2.safetensors"),
            "--enhance", "--max-iters", "2",
        ])
        assert result.exit_code == 0, result.output
        assert out.is_file()

    def test_mask_and_trace_outputs(self, runner, patched_png, tmp_path):
        out = tmp_path / "out.png"
        mask = tmp_path / "mask.png"
        trace = tmp_path / "trace.json"
        result = runner.invoke(main, ["purify", "--in", str(patched_png), "--out", str(out),
                                      "--mask-out", str(mask), "--trace", str(trace)])
        assert result.exit_code == 0
        doc = json.loads(trace.read_text())
        assert set(doc) == {"iterations", "stop_reason", "total"}
        from patchpurify import load_mask_png
        direct = purify(load_png(patched_png), PurifyConfig(), BicubicUpscaler())
        assert (load_mask_png(mask).bits == direct.mask.bits).all()

    def test_directory_batch(self, runner, tmp_path, rng):
        src_dir = tmp_path / "in"
        src_dir.mkdir()
        for i in range(3):
            save_png(gradient_background(48, 48, rng), src_dir / f"img{i}.png")
        out_dir = tmp_path / "out"
        report = tmp_path / "report.json"
        result = runner.invoke(main, ["purify", "--in", str(src_dir), "--out", str(out_dir),
                                      "--report-out", str(report), "--report", "json"])
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out_dir.iterdir()) == ["img0.png", "img1.png", "img2.png"]
        doc = json.loads(report.read_text())
        assert doc["aggregate"]["images"] == 3
        assert doc["aggregate"]["failures"] == 0
        assert doc["aggregate"]["mean_ms"] > 0
        assert [r["input"] for r in doc["images"]] == sorted(str(p) for p in src_dir.iterdir())

    def test_empty_directory_is_io_error(self, runner, tmp_path):
        src_dir = tmp_path / "empty"
        src_dir.mkdir()
        result = runner.invoke(main, ["purify", "--in", str(src_dir),
                                      "--out", str(tmp_path / "out")])
        assert result.exit_code == EXIT_IO


class TestConfigFile:
    def test_file_supplies_flags(self, runner, patched_png, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lambda = 0.9\nmax-iters = 2\nenhance = true\n")
        out = tmp_path / "out.png"
        result = runner.invoke(main, ["purify", "--in", str(patched_png), "--out", str(out),
                                      "--config", str(cfg)])
        assert result.exit_code == 0
        direct = purify_plus(load_png(patched_png),
                             PurifyConfig(threshold=0.9, max_iters=2, enhance=True),
                             BicubicUpscaler())
        ref = tmp_path / "ref.png"
        save_png(direct.image, ref)
        assert out.read_bytes() == ref.read_bytes()

    def test_flag_overrides_file(self, runner, patched_png, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lambda = 0.9\n")
        out = tmp_path / "out.png"
        result = runner.invoke(main, ["purify", "--in", str(patched_png), "--out", str(out),
                                      "--config", str(cfg), "--lambda", "0.7"])
        assert result.exit_code == 0
        direct = purify(load_png(patched_png), PurifyConfig(threshold=0.7), BicubicUpscaler())
        ref = tmp_path / "ref.png"
        save_png(direct.image, ref)
        assert out.read_bytes() == ref.read_bytes()

    def test_malformed_file_is_config_error(self, runner, patched_png, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lambda 0.9\n")
        result = runner.invoke(main, ["purify", "--in", str(patched_png),
                                      "--out", str(tmp_path / "o.png"), "--config", str(cfg)])
        assert result.exit_code == EXIT_CONFIG


class TestEvaluateCommand:
    def test_report_matches_library(self, runner, tmp_path):
        wl_path = workload_file(tmp_path, images=1)
        report = tmp_path / "report.csv"
        result = runner.invoke(main, ["evaluate", "--workload", str(wl_path),
                                      "--report-out", str(report), "--report", "csv"])
        assert result.exit_code == 0, result.output
        lines = report.read_text().strip().splitlines()
        assert lines[0] == "input,size,seed,recall,false_rate,iterations,ms"
        row = lines[1].split(",")
        direct = run_case(WorkloadSpec.from_json_file(wl_path), 0, PurifyConfig(),
                          BicubicUpscaler())
        assert float(row[3]) == pytest.approx(direct.metrics.patch_recall)
        assert int(row[5]) == direct.metrics.iterations

    def test_missing_workload_is_config_error(self, runner, tmp_path):
        result = runner.invoke(main, ["evaluate", "--workload", str(tmp_path / "nope.json")])
        assert result.exit_code == EXIT_CONFIG
        result = runner.invoke(main, ["evaluate"])
        assert result.exit_code == EXIT_CONFIG

    def test_standard_workload_recall(self, runner, tmp_path):
        wl_path = workload_file(tmp_path, images=50, height=224, width=224,
                                patch={"kind": "localized", "sizes": [64], "amplitude": 1.0})
        report = tmp_path / "full.csv"
        result = runner.invoke(main, ["evaluate", "--workload", str(wl_path),
                                      "--report-out", str(report)])
        assert result.exit_code == 0, result.output
        rows = report.read_text().strip().splitlines()[1:]
        recalls = [float(r.split(",")[3]) for r in rows]
        assert len(recalls) == 50
        assert np.mean(recalls) >= 0.70

    def test_seed_override_changes_cases(self, runner, tmp_path):
        wl_path = workload_file(tmp_path, images=1)
        r1 = tmp_path / "r1.csv"
        r2 = tmp_path / "r2.csv"
        assert runner.invoke(main, ["evaluate", "--workload", str(wl_path), "--report-out",
                                    str(r1), "--seed", "0"]).exit_code == 0
        assert runner.invoke(main, ["evaluate", "--workload", str(wl_path), "--report-out",
                                    str(r2), "--seed", "123"]).exit_code == 0
        seed1 = r1.read_text().splitlines()[1].split(",")[2]
        seed2 = r2.read_text().splitlines()[1].split(",")[2]
        assert seed1 == "0" and seed2 == "123"


class TestSweepCommand:
    def test_single_point_sweep_matches_evaluate(self, runner, tmp_path):
        wl_path = workload_file(tmp_path)
        out = tmp_path / "sweep.csv"
        result = runner.invoke(main, ["sweep", "--workload", str(wl_path),
                                      "--lambdas", "0.7", "--report-out", str(out)])
        assert result.exit_code == 0, result.output
        row = out.read_text().strip().splitlines()[1].split(",")
        wl = WorkloadSpec.from_json_file(wl_path)
        direct = [run_case(wl, i, PurifyConfig(), BicubicUpscaler()) for i in range(wl.images)]
        mean_recall = float(np.mean([c.metrics.patch_recall for c in direct]))
        assert float(row[1]) == pytest.approx(mean_recall)

    def test_empty_grid_empty_table(self, runner, tmp_path):
        wl_path = workload_file(tmp_path)
        out = tmp_path / "sweep.csv"
        result = runner.invoke(main, ["sweep", "--workload", str(wl_path),
                                      "--lambdas", "", "--report-out", str(out)])
        assert result.exit_code == 0
        assert out.read_text() == ""

    def test_requires_exactly_one_grid(self, runner, tmp_path):
        wl_path = workload_file(tmp_path)
        assert runner.invoke(main, ["sweep", "--workload", str(wl_path)]).exit_code == EXIT_CONFIG
        assert runner.invoke(main, ["sweep", "--workload", str(wl_path), "--lambdas", "0.7",
                                    "--sizes", "16"]).exit_code == EXIT_CONFIG

    def test_lambda_grid_recall_declines_past_plateau(self, runner, tmp_path):
        wl_path = workload_file(tmp_path, images=8, height=224, width=224,
                                patch={"kind": "localized", "sizes": [64], "amplitude": 1.0})
        out = tmp_path / "grid.json"
        result = runner.invoke(main, ["sweep", "--workload", str(wl_path),
                                      "--lambdas", "0.35,0.45,0.55,0.65,0.75,0.85,0.95",
                                      "--report", "json", "--report-out", str(out)])
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text())
        tail = [r["recall"] for r in doc if r["lambda"] >= 0.55]
        assert all(a >= b - 1e-9 for a, b in zip(tail, tail[1:]))

    def test_size_sweep(self, runner, tmp_path):
        wl_path = workload_file(tmp_path)
        out = tmp_path / "sizes.json"
        result = runner.invoke(main, ["sweep", "--workload", str(wl_path),
                                      "--sizes", "0,16", "--report", "json",
                                      "--report-out", str(out)])
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text())
        assert [r["size"] for r in doc] == [0.0, 16.0]
        assert doc[0]["recall"] is None
