"""Command line behavior: artifacts, determinism, and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from hsidiff import cli, data, model, plots
from hsidiff.cli import RunConfig, load_run_config, main
from hsidiff.errors import ConfigError


def run_cli(*argv, capsys=None):
    code = main(list(argv))
    if capsys is not None:
        captured = capsys.readouterr()
        return code, captured.out, captured.err
    return code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthetic cube plus one finished training run, shared read-only."""
    ws = tmp_path_factory.mktemp("cli")
    cube_path = ws / "cube.hsi"
    assert (
        main(
            [
                "synth",
                "--classes", "3",
                "--width", "20",
                "--height", "12",
                "--bands", "12",
                "--sigma", "0.05",
                "--seed", "4",
                "--out", str(cube_path),
            ]
        )
        == 0
    )
    config = {
        "cube": str(cube_path),
        "out_dir": str(ws / "run"),
        "patch_size": 8,
        "pca_bands": 6,
        "token_spatial": 2,
        "d_embed": 16,
        "n_layers": 1,
        "n_heads": 2,
        "d_ff": 32,
        "epochs": 3,
        "batch_size": 32,
        "seed": 7,
        "timing": False,
    }
    config_path = ws / "run.json"
    config_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(config_path)]) == 0
    return {
        "dir": ws,
        "cube": cube_path,
        "config": config_path,
        "config_dict": config,
        "run": ws / "run",
    }


class TestRunConfig:
    def test_defaults_match_documented_settings(self):
        rc = RunConfig()
        assert (rc.patch_size, rc.pca_bands, rc.d_embed) == (12, 15, 64)
        assert (rc.n_layers, rc.n_heads, rc.d_ff) == (4, 8, 256)
        assert (rc.epochs, rc.batch_size) == (50, 56)
        assert (rc.lr, rc.decay, rc.l2_head) == (0.001, 1e-6, 0.01)
        assert (rc.train_frac, rc.val_frac, rc.test_frac) == (0.25, 0.25, 0.50)
        assert rc.dropout_rate == 0.1 and rc.ln_eps == 1e-3
        assert rc.attention_kind == "DMHSA" and rc.shuffle and rc.timing

    def test_unknown_key_rejected_by_name(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"learning_rate": 0.1}')
        with pytest.raises(ConfigError, match="learning_rate"):
            load_run_config(p)

    def test_wrong_type_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"epochs": "ten"}')
        with pytest.raises(ConfigError, match="epochs"):
            load_run_config(p)

    def test_bool_key_rejects_integer(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"shuffle": 1}')
        with pytest.raises(ConfigError, match="shuffle"):
            load_run_config(p)

    def test_int_accepted_for_float_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"lr": 1}')
        assert load_run_config(p).lr == 1.0

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"epochs": 9}')
        assert load_run_config(p, {"epochs": 2}).epochs == 2

    def test_none_overrides_are_skipped(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"epochs": 9}')
        assert load_run_config(p, {"epochs": None}).epochs == 9

    def test_non_object_json_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            load_run_config(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "absent.json")


class TestSynth:
    def test_writes_loadable_cube(self, tmp_path):
        out = tmp_path / "c.hsi"
        code = main(
            ["synth", "--classes", "4", "--width", "16", "--height", "8",
             "--bands", "10", "--sigma", "0.0", "--seed", "1", "--out", str(out)]
        )
        assert code == 0
        cube = data.load_cube(out)
        assert (cube.width, cube.height, cube.bands) == (16, 8, 10)
        assert cube.n_classes == 4

    def test_same_seed_same_bytes(self, tmp_path):
        args = ["synth", "--classes", "3", "--width", "12", "--height", "6",
                "--bands", "8", "--sigma", "0.2", "--seed", "5"]
        a, b = tmp_path / "a.hsi", tmp_path / "b.hsi"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        base = ["synth", "--classes", "3", "--width", "12", "--height", "6",
                "--bands", "8", "--sigma", "0.2"]
        a, b = tmp_path / "a.hsi", tmp_path / "b.hsi"
        assert main(base + ["--seed", "1", "--out", str(a)]) == 0
        assert main(base + ["--seed", "2", "--out", str(b)]) == 0
        assert a.read_bytes() != b.read_bytes()

    def test_single_class_is_usage_error(self, tmp_path, capsys):
        code = main(["synth", "--classes", "1", "--out", str(tmp_path / "x.hsi")])
        assert code == 1
        assert "at least 2 classes" in capsys.readouterr().err

    def test_missing_out_flag_is_usage_error(self, capsys):
        assert main(["synth", "--classes", "3"]) == 1
        assert "--out" in capsys.readouterr().err

    def test_module_entry_point(self, tmp_path):
        out = tmp_path / "c.hsi"
        proc = subprocess.run(
            [sys.executable, "-m", "hsidiff.cli", "synth", "--classes", "2",
             "--width", "8", "--height", "4", "--bands", "5", "--out", str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert out.exists()


class TestTrain:
    def test_artifacts_exist(self, workspace):
        run = workspace["run"]
        for name in ("history.csv", "report.json", "report.txt", "model.ckpt", "manifest.json"):
            assert (run / name).exists(), name
        assert (run / "figures" / "training_curves.png").exists()
        assert (run / "figures" / "confusion.png").exists()

    def test_history_has_one_row_per_epoch(self, workspace):
        lines = (workspace["run"] / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_oa,lr_t,seconds"
        assert len(lines) == 1 + workspace["config_dict"]["epochs"]

    def test_report_json_fields(self, workspace):
        report = json.loads((workspace["run"] / "report.json").read_text())
        assert set(report) == {"confusion", "per_class", "oa", "aa", "kappa", "wall_seconds"}
        assert report["wall_seconds"] == 0.0  # timing disabled
        n = len(report["confusion"])
        assert all(len(row) == n for row in report["confusion"])

    def test_manifest_records_config_and_results(self, workspace):
        manifest = json.loads((workspace["run"] / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 7
        assert manifest["derived"]["n_classes"] == 3
        assert manifest["derived"]["param_count"] > 0
        assert "model.ckpt" in manifest["artifacts"]
        assert 0.0 <= manifest["results"]["test_oa"] <= 1.0

    def test_checkpoint_carries_projection(self, workspace):
        ckpt = model.load_checkpoint(workspace["run"] / "model.ckpt")
        assert ckpt.extras["pca/mean"].shape == (12,)
        assert ckpt.extras["pca/components"].shape == (6, 12)

    def test_missing_cube_key_names_it(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"out_dir": str(tmp_path / "o"), "epochs": 1}))
        assert main(["train", "--config", str(p)]) == 1
        assert "'cube'" in capsys.readouterr().err

    def test_missing_out_dir_key_names_it(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"cube": "x.hsi", "epochs": 1}))
        assert main(["train", "--config", str(p)]) == 1
        assert "'out_dir'" in capsys.readouterr().err

    def test_absent_cube_file_is_data_error(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"cube": str(tmp_path / "no.hsi"), "out_dir": str(tmp_path / "o")}))
        assert main(["train", "--config", str(p)]) == 2
        assert "[load]" in capsys.readouterr().err

    def test_reruns_are_byte_identical(self, workspace, tmp_path):
        args = ["train", "--config", str(workspace["config"])]
        assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
        for name in ("history.csv", "report.json", "model.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        # and they reproduce the fixture run as well
        assert (tmp_path / "a" / "report.json").read_bytes() == (
            workspace["run"] / "report.json"
        ).read_bytes()

    def test_flag_overrides_config(self, workspace, tmp_path, capsys):
        code = main(
            ["train", "--config", str(workspace["config"]),
             "--out-dir", str(tmp_path / "o"), "--epochs", "1"]
        )
        assert code == 0
        lines = (tmp_path / "o" / "history.csv").read_text().splitlines()
        assert len(lines) == 2


class TestEval:
    def test_subset_test_reproduces_training_report(self, workspace, capsys):
        code, out, _ = run_cli(
            "eval",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(workspace["cube"]),
            "--subset", "test",
            "--config", str(workspace["config"]),
            "--no-timing",
            capsys=capsys,
        )
        assert code == 0
        train_report = (workspace["run"] / "report.txt").read_text()
        assert train_report in out

    def test_subset_without_config_is_usage_error(self, workspace, capsys):
        code, _, err = run_cli(
            "eval",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(workspace["cube"]),
            "--subset", "val",
            capsys=capsys,
        )
        assert code == 1
        assert "--config" in err

    def test_eval_all_covers_every_labeled_pixel(self, workspace, capsys):
        code, out, _ = run_cli(
            "eval",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(workspace["cube"]),
            capsys=capsys,
        )
        assert code == 0
        assert "240 samples" in out  # 20 x 12 fully labeled

    def test_out_dir_writes_report_files(self, workspace, tmp_path, capsys):
        out_dir = tmp_path / "evalout"
        code, _, _ = run_cli(
            "eval",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(workspace["cube"]),
            "--out-dir", str(out_dir),
            "--no-timing",
            capsys=capsys,
        )
        assert code == 0
        assert (out_dir / "report.json").exists()
        assert (out_dir / "report.txt").exists()
        assert (out_dir / "figures" / "confusion.png").exists()

    def test_band_mismatch_is_data_error(self, workspace, tmp_path, capsys):
        other = tmp_path / "wide.hsi"
        assert main(
            ["synth", "--classes", "3", "--width", "20", "--height", "12",
             "--bands", "9", "--out", str(other)]
        ) == 0
        code, _, err = run_cli(
            "eval",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(other),
            capsys=capsys,
        )
        assert code == 2
        assert "bands" in err

    def test_unlabeled_cube_is_undefined_metric(self, workspace, tmp_path, capsys):
        cube = data.load_cube(workspace["cube"])
        bare = data.HsiCube(raster=cube.raster, labels=np.zeros_like(cube.labels))
        path = tmp_path / "bare.hsi"
        data.save_cube(bare, path)
        code, _, err = run_cli(
            "eval",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(path),
            capsys=capsys,
        )
        assert code == 2
        assert "empty confusion matrix" in err

    def test_missing_checkpoint_is_file_error(self, workspace, capsys):
        code, _, err = run_cli(
            "eval",
            "--checkpoint", str(workspace["dir"] / "absent.ckpt"),
            "--cube", str(workspace["cube"]),
            capsys=capsys,
        )
        assert code == 2
        assert "[load]" in err


class TestMap:
    def test_ppm_dimensions_and_palette(self, workspace, tmp_path, capsys):
        out = tmp_path / "map.ppm"
        code, _, _ = run_cli(
            "map",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(workspace["cube"]),
            "--out", str(out),
            capsys=capsys,
        )
        assert code == 0
        rgb = plots.read_ppm(out)
        assert rgb.shape == (12, 20, 3)
        allowed = {tuple(c) for c in plots.class_palette(3)}
        seen = {tuple(px) for px in rgb.reshape(-1, 3)}
        assert seen <= allowed

    def test_map_is_deterministic(self, workspace, tmp_path):
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        args = [
            "map",
            "--checkpoint", str(workspace["run"] / "model.ckpt"),
            "--cube", str(workspace["cube"]),
        ]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestSweep:
    def _base_config(self, workspace, tmp_path, **extra):
        config = dict(workspace["config_dict"])
        config.update(out_dir=str(tmp_path / "sweep"), epochs=1, **extra)
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(config))
        return path, tmp_path / "sweep"

    def _rows(self, out_dir):
        import csv as csv_mod

        with open(out_dir / "sweep.csv", newline="") as fh:
            return list(csv_mod.DictReader(fh))

    def test_attention_axis_runs_both_variants(self, workspace, tmp_path, capsys):
        config, out_dir = self._base_config(workspace, tmp_path)
        code = main(["sweep", "--config", str(config), "--axis", "attention",
                     "--values", "DMHSA,MHSA"])
        capsys.readouterr()
        assert code == 0
        rows = self._rows(out_dir)
        assert [r["value"] for r in rows] == ["DMHSA", "MHSA"]
        for r in rows:
            assert r["error"] == ""
            assert 0.0 <= float(r["oa"]) <= 1.0
        assert (out_dir / "runs" / "attention-DMHSA" / "model.ckpt").exists()
        assert (out_dir / "sweep.png").exists()

    def test_patch_axis_records_token_counts(self, workspace, tmp_path, capsys):
        config, out_dir = self._base_config(workspace, tmp_path)
        code = main(["sweep", "--config", str(config), "--axis", "patch", "--values", "4,8"])
        capsys.readouterr()
        assert code == 0
        rows = self._rows(out_dir)
        assert [r["n_patches"] for r in rows] == ["4", "16"]

    def test_failed_value_recorded_and_sweep_continues(self, workspace, tmp_path, capsys):
        config, out_dir = self._base_config(workspace, tmp_path)
        # patch 5 is not divisible by the token extent 2, patch 4 is fine
        code = main(["sweep", "--config", str(config), "--axis", "patch", "--values", "5,4"])
        capsys.readouterr()
        assert code == 0
        rows = self._rows(out_dir)
        assert "ConfigError" in rows[0]["error"]
        assert rows[1]["error"] == "" and rows[1]["oa"] != ""

    def test_invalid_axis_lists_choices(self, workspace, tmp_path, capsys):
        config, _ = self._base_config(workspace, tmp_path)
        code = main(["sweep", "--config", str(config), "--axis", "bogus", "--values", "1"])
        err = capsys.readouterr().err
        assert code == 1
        for axis in ("patch", "layers", "heads", "attention", "train_frac"):
            assert axis in err

    def test_non_integer_values_for_integer_axis(self, workspace, tmp_path, capsys):
        config, _ = self._base_config(workspace, tmp_path)
        code = main(["sweep", "--config", str(config), "--axis", "layers", "--values", "one"])
        assert code == 1
        assert "integer" in capsys.readouterr().err


class TestSelftest:
    def test_selftest_passes(self, capsys):
        code, out, _ = run_cli("selftest", capsys=capsys)
        assert code == 0
        assert out.count("PASS") == 5
        assert "selftest passed" in out

    def test_injected_fault_names_the_op(self, capsys):
        code, out, err = run_cli("selftest", "--inject-fault", "matmul", capsys=capsys)
        assert code == 3
        assert "matmul" in out
        assert "FAIL" in out
        assert "selftest FAILED" in err

    def test_unknown_fault_op_is_config_error(self, capsys):
        code, _, err = run_cli("selftest", "--inject-fault", "frobnicate", capsys=capsys)
        assert code == 1
        assert "frobnicate" in err
