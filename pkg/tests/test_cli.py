"""Command-line surface: artifacts, determinism, exit codes, help text."""

import json

import pytest

from repkan.checkpoint import load_checkpoint
from repkan.cli import CONFIG_SCHEMA, build_parser, load_config, main
from repkan.data import mstd_read, normalize
from repkan.errors import ConfigurationError
from repkan.training import evaluate


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def gen(capsys, tmp_path, name="data.mstd", classes=4, per_class=6, size=8,
        channels=13, noise=0.05, seed=7):
    path = tmp_path / name
    code, out, _ = run(capsys, "gen-data", "--classes", str(classes),
                       "--per-class", str(per_class), "--channels", str(channels),
                       "--size", str(size), "--seed", str(seed),
                       "--noise", str(noise), "--out", str(path))
    assert code == 0
    return path, json.loads(out)


def train(capsys, tmp_path, data_path, name="model.ckpt", *extra,
          width=6):
    # width >= data channels whenever stage-1 edges are indexed by band
    ckpt = tmp_path / name
    args = ["train", "--data", str(data_path), "--out-checkpoint", str(ckpt),
            "--set", f"model.stage_widths={width}",
            "--set", "model.blocks_per_stage=1",
            "--set", "train.epochs=2", "--set", "train.batch_size=8",
            "--set", "train.warmup_epochs=1", *extra]
    code, out, err = run(capsys, *args)
    assert code == 0, err
    return ckpt, json.loads(out), err


class TestGenData:
    def test_deterministic_bytes_and_certificate(self, capsys, tmp_path):
        p1, meta1 = gen(capsys, tmp_path, "a.mstd", noise=0.0)
        p2, meta2 = gen(capsys, tmp_path, "b.mstd", noise=0.0)
        assert p1.read_bytes() == p2.read_bytes()
        assert meta1["certificate_oa"] == 1.0
        assert meta1["n"] == 24 == meta2["n"]

    def test_infeasible_class_count(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen-data", "--classes", "9",
                           "--out", str(tmp_path / "x.mstd"))
        assert code == 2
        assert "classes" in err


class TestTrainCommand:
    def test_writes_checkpoint_and_log(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, result, err = train(capsys, tmp_path, data)
        assert ckpt.exists()
        log = tmp_path / (ckpt.name + ".log.csv")
        assert log.exists()
        lines = log.read_text().strip().split("\n")
        assert len(lines) == 3  # header + 2 epochs
        assert result["epochs"] == 2
        assert "parameters:" in err

    def test_zero_epochs_empty_log(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data, "init.ckpt",
                           "--set", "train.epochs=0")
        log = tmp_path / (ckpt.name + ".log.csv")
        assert log.read_text().strip().split("\n") == [
            "epoch,lr,train_loss,val_oa,val_macro_p,val_macro_r,val_macro_f1"]
        assert load_checkpoint(ckpt).epoch == 0

    def test_grid_size_changes_only_spline_count_in_banner(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        banners = {}
        for g in (3, 5):
            _, _, err = train(capsys, tmp_path, data, f"g{g}.ckpt",
                              "--set", f"model.grid_size={g}")
            line = [l for l in err.split("\n") if l.startswith("parameters:")][0]
            banners[g] = line
        # spline parameter count per block is out*in*(G+k+2): 6*6*8 vs 6*6*10
        assert "spline=288" in banners[3]
        assert "spline=360" in banners[5]

    def test_unknown_config_key_exits_2(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        code, _, err = run(capsys, "train", "--data", str(data),
                           "--out-checkpoint", str(tmp_path / "x.ckpt"),
                           "--set", "train.lerning_rate=1")
        assert code == 2
        assert "lerning_rate" in err

    def test_config_file_parse_error_exits_2(self, capsys, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train\nepochs=2\n")
        data, _ = gen(capsys, tmp_path)
        code, _, err = run(capsys, "train", "--config", str(bad),
                           "--data", str(data),
                           "--out-checkpoint", str(tmp_path / "x.ckpt"))
        assert code == 2
        assert "line" in err  # configparser reports the offending line

    def test_missing_data_exits_3(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--data", str(tmp_path / "none.mstd"),
                         "--out-checkpoint", str(tmp_path / "x.ckpt"))
        assert code == 3


class TestEvalCommand:
    def test_metrics_json_schema_and_values(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data)
        code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt),
                           "--data", str(data))
        assert code == 0
        payload = json.loads(out)
        assert set(payload) == {"oa", "macro_precision", "macro_recall",
                                "macro_f1", "confusion"}
        loaded = load_checkpoint(ckpt)
        ds = normalize(mstd_read(data), loaded.norm_stats)
        report = evaluate(loaded.model, ds)
        assert abs(payload["oa"] - report.overall_accuracy) < 1e-12
        assert abs(payload["macro_f1"] - report.macro_f1) < 1e-12
        assert payload["confusion"] == report.confusion.tolist()


class TestFuseCommand:
    def test_fuse_reports_equivalence_and_param_delta(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data)
        fused = tmp_path / "fused.ckpt"
        code, out, err = run(capsys, "fuse", "--checkpoint", str(ckpt),
                             "--out", str(fused))
        assert code == 0, err
        payload = json.loads(out)
        assert payload["max_abs_deviation"] < 1e-8
        assert payload["param_reads_train"] == 10 * 6 * 6
        assert payload["param_reads_deploy"] == 9 * 6 * 6
        assert load_checkpoint(fused).model.mode == "deploy"

    def test_double_fuse_exits_5(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data)
        fused = tmp_path / "fused.ckpt"
        assert run(capsys, "fuse", "--checkpoint", str(ckpt), "--out", str(fused))[0] == 0
        code, _, err = run(capsys, "fuse", "--checkpoint", str(fused),
                           "--out", str(tmp_path / "twice.ckpt"))
        assert code == 5
        assert "state" in err


class TestExplainCommand:
    def test_outputs_and_rerun_identical(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data, width=16)
        out_dir = tmp_path / "explain"
        code, out, _ = run(capsys, "explain", "--checkpoint", str(ckpt),
                           "--data", str(data), "--out-dir", str(out_dir))
        assert code == 0
        files = json.loads(out)["files"]
        assert "energy_report.csv" in files
        assert any(f.startswith("curve_") for f in files)
        assert any(f.startswith("landscape_") for f in files)
        assert any(f.endswith(".pgm") for f in files)
        assert any(f.endswith(".f32") for f in files)
        snapshot = {f: (out_dir / f).read_bytes() for f in files}
        code, _, _ = run(capsys, "explain", "--checkpoint", str(ckpt),
                         "--data", str(data), "--out-dir", str(out_dir))
        assert code == 0
        for f, blob in snapshot.items():
            assert (out_dir / f).read_bytes() == blob

    def test_zero_spline_checkpoint_reports_zero_ratio(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data, "zs.ckpt", width=16)
        loaded = load_checkpoint(ckpt)
        for blocks in loaded.model.stages:
            for b in blocks:
                b.bank.coeffs.value[...] = 0.0
                b.bank.w_b.value[...] = 0.0
                b.bank.w_s.value[...] = 0.0
        from repkan.checkpoint import save_checkpoint
        save_checkpoint(loaded.model, ckpt, seed=loaded.seed, epoch=loaded.epoch,
                        class_names=loaded.class_names, norm_stats=loaded.norm_stats)
        out_dir = tmp_path / "explain_zero"
        code, _, _ = run(capsys, "explain", "--checkpoint", str(ckpt),
                         "--data", str(data), "--out-dir", str(out_dir))
        assert code == 0
        lines = (out_dir / "energy_report.csv").read_text().strip().split("\n")
        ratios = [float(line.split(",")[-1]) for line in lines[1:]]
        assert ratios and all(r == 0.0 for r in ratios)

    def test_curve_files_match_library(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data, width=16)
        out_dir = tmp_path / "explain2"
        code, out, _ = run(capsys, "explain", "--checkpoint", str(ckpt),
                           "--data", str(data), "--out-dir", str(out_dir),
                           "--bands", "7")
        assert code == 0
        from repkan.interpret import (curve_csv, sample_curve_with_distribution,
                                      select_expert_filters)
        loaded = load_checkpoint(ckpt)
        ds = normalize(mstd_read(data), loaded.norm_stats)
        experts, _ = select_expert_filters(loaded.model, ds, stage=1)
        expert = experts[0]
        expected = curve_csv(sample_curve_with_distribution(loaded.model, ds, 7, expert))
        name = f"curve_{expert.class_name}_{ds.band_names[7]}.csv"
        assert (out_dir / name).read_text() == expected


class TestDistillCommand:
    def test_table_shape_and_monotone_rows(self, capsys, tmp_path):
        data, _ = gen(capsys, tmp_path)
        ckpt, _, _ = train(capsys, tmp_path, data, width=16)
        out = tmp_path / "table.csv"
        code, payload, _ = run(capsys, "distill", "--checkpoint", str(ckpt),
                               "--data", str(data), "--out", str(out),
                               "--bands", "3,7")
        assert code == 0
        assert json.loads(payload)["rows"] == 4 * 2
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "class,band,r2_d1,r2_d2,r2_d3,equation,error"
        for line in lines[1:]:
            parts = line.split(",")
            r1, r2, r3 = float(parts[2]), float(parts[3]), float(parts[4])
            assert r1 <= r2 + 1e-12 and r2 <= r3 + 1e-12


class TestConfigAndHelp:
    def test_defaults_complete(self):
        config = load_config(None)
        for section, keys in CONFIG_SCHEMA.items():
            for key in keys:
                assert key in config[section]

    def test_file_values_and_overrides(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[train]\nepochs = 9\nlr = 1e-3\n")
        config = load_config(ini, overrides=("train.epochs=4",))
        assert config["train"]["epochs"] == 4  # CLI wins
        assert config["train"]["lr"] == 1e-3

    def test_unknown_section_rejected(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(ConfigurationError, match="optimizer"):
            load_config(ini)

    def test_every_config_key_documented_in_help(self):
        parser = build_parser()
        helps = []
        for cmd in ("train", "explain", "distill"):
            sub = next(a for a in parser._subparsers._group_actions[0].choices.items()
                       if a[0] == cmd)[1]
            helps.append(sub.format_help())
        blob = "\n".join(helps)
        for section, keys in CONFIG_SCHEMA.items():
            for key in keys:
                assert f"{section}.{key}" in blob, f"{section}.{key} missing from help"

    def test_gen_data_help_lists_defaults(self):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices["gen-data"]
        text = sub.format_help()
        for flag in ("--classes", "--per-class", "--channels", "--size",
                     "--seed", "--noise", "--out"):
            assert flag in text
        assert "default" in text

    def test_invalid_threads_env_exits_2(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("REPKAN_THREADS", "many")
        code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "x.mstd"))
        assert code == 2
        assert "REPKAN_THREADS" in err
