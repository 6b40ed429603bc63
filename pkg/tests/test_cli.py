"""CLI surface: subcommands, exit codes, and the file formats they emit."""

import json

import pytest

from flip.cli import main
from flip.data import generate_dataset
from flip.report import to_csv, tradeoff_report
from flip.errors import ConfigError, DataFormatError
from flip.trainer import TrainConfig, save_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    generate_dataset(192, 0, root / "train.flipds")
    generate_dataset(64, 1, root / "eval.flipds")
    cfg = TrainConfig(
        base_lr=2e-3, batch_size=64, warmup_samples=128, total_samples=64 * 4,
        mask_ratio=0.5, seed=0,
        train_data=str(root / "train.flipds"), eval_data=str(root / "eval.flipds"),
    )
    save_config(cfg, root / "config.txt")
    return root


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["flops", "--preset", "L-like", "--mask-ratio", "0.5", "--frob"]) == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == 1

    def test_gen_data_zero_n(self, tmp_path, capsys):
        assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "x.flipds")]) == 1

    def test_missing_data_file_is_data_error(self, tmp_path, capsys):
        assert main([
            "eval", "--ckpt", str(tmp_path / "none.ckpt"),
            "--data", str(tmp_path / "none.flipds"), "--task", "zero-shot",
        ]) == 2

    def test_gen_data_success(self, tmp_path):
        out = tmp_path / "g.flipds"
        assert main(["gen-data", "--n", "16", "--seed", "3", "--out", str(out)]) == 0
        assert out.exists()


class TestFlopsCommand:
    def test_reports_published_ratio(self, capsys):
        assert main(["flops", "--preset", "L-like", "--mask-ratio", "0.5"]) == 0
        decoded = json.loads(capsys.readouterr().out)
        assert abs(decoded["ratio_vs_unmasked"] - 0.52) < 0.01

    def test_runtime_under_a_second(self, capsys):
        import time

        start = time.monotonic()
        main(["flops", "--preset", "H-like", "--mask-ratio", "0.75"])
        assert time.monotonic() - start < 1.0


class TestTrainEvalRoundTrip:
    def test_train_then_eval_via_checkpoint(self, workspace, tmp_path, capsys):
        out_dir = tmp_path / "run"
        assert main(["train", "--config", str(workspace / "config.txt"),
                     "--out-dir", str(out_dir)]) == 0
        capsys.readouterr()
        ckpt = out_dir / "final.ckpt"
        assert ckpt.exists()
        assert (out_dir / "curve.csv").read_text().startswith("samples,metric,value")
        assert json.loads((out_dir / "flops.json").read_text())["total_flops"] > 0

        assert main(["eval", "--ckpt", str(ckpt), "--data",
                     str(workspace / "eval.flipds"), "--task", "zero-shot"]) == 0
        decoded = json.loads(capsys.readouterr().out.strip())
        assert decoded["metric"] == "zero_shot_acc"
        assert 0.0 <= decoded["value"] <= 1.0

    def test_eval_modes_emits_three_lines(self, workspace, tmp_path, capsys):
        out_dir = tmp_path / "run2"
        main(["train", "--config", str(workspace / "config.txt"), "--out-dir", str(out_dir)])
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(out_dir / "final.ckpt"), "--data",
                     str(workspace / "eval.flipds"), "--task", "modes",
                     "--mask-ratio", "0.5"]) == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert [l["mode"] for l in lines] == ["full", "masked", "ensemble"]

    def test_linear_probe_task(self, workspace, tmp_path, capsys):
        out_dir = tmp_path / "run_probe"
        main(["train", "--config", str(workspace / "config.txt"), "--out-dir", str(out_dir)])
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(out_dir / "final.ckpt"), "--data",
                     str(workspace / "eval.flipds"), "--task", "linear-probe"]) == 0
        decoded = json.loads(capsys.readouterr().out.strip())
        assert decoded["metric"] == "linear_probe_acc"
        assert 0.0 <= decoded["value"] <= 1.0

    def test_retrieval_task(self, workspace, tmp_path, capsys):
        out_dir = tmp_path / "run3"
        main(["train", "--config", str(workspace / "config.txt"), "--out-dir", str(out_dir)])
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(out_dir / "final.ckpt"), "--data",
                     str(workspace / "eval.flipds"), "--task", "retrieval",
                     "--k", "5"]) == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert len(lines) == 2
        assert all(0.0 <= l["value"] <= 1.0 for l in lines)


class TestReport:
    def test_empty_run_list_rejected(self):
        with pytest.raises(ConfigError):
            tradeoff_report([])

    def test_missing_curve_named(self, tmp_path):
        run = tmp_path / "ghost"
        run.mkdir()
        with pytest.raises(DataFormatError, match="ghost"):
            tradeoff_report([run])

    def test_rows_sorted_by_compute(self, tmp_path):
        for name, flops, rows in (
            ("big", 200, [(100, 0.3), (200, 0.5)]),
            ("small", 50, [(100, 0.2), (300, 0.4)]),
        ):
            d = tmp_path / name
            d.mkdir()
            (d / "flops.json").write_text(json.dumps({"total_flops": flops}))
            curve = "samples,metric,value\n" + "\n".join(
                f"{s},zero_shot_acc,{v}" for s, v in rows
            )
            (d / "curve.csv").write_text(curve + "\n")
        points = tradeoffs = tradeoff_report([tmp_path / "big", tmp_path / "small"])
        computes = [p.compute_flops for p in points]
        assert computes == sorted(computes)
        csv = to_csv(points)
        assert csv.splitlines()[0] == "run,samples,compute_flops,metric,value,wall_seconds"

    def test_masked_run_compute_follows_flop_model(self, tmp_path):
        from flip.encoders import preset
        from flip.flops import count_flops

        cfg = preset("tiny")
        samples = 6400
        for name, ratio in (("mask00", 0.0), ("mask50", 0.5)):
            d = tmp_path / name
            d.mkdir()
            (d / "flops.json").write_text(count_flops(cfg, ratio).to_json())
            (d / "curve.csv").write_text(
                f"samples,metric,value\n{samples},zero_shot_acc,0.5\n"
            )
        points = {p.run: p for p in tradeoff_report([tmp_path / "mask00", tmp_path / "mask50"])}
        observed = points["mask50"].compute_flops / points["mask00"].compute_flops
        expected = count_flops(cfg, 0.5).ratio_vs_unmasked
        assert observed == pytest.approx(expected, rel=1e-9)

    def test_cli_report(self, tmp_path, capsys):
        d = tmp_path / "r0"
        d.mkdir()
        (d / "flops.json").write_text(json.dumps({"total_flops": 10}))
        (d / "curve.csv").write_text("samples,metric,value\n64,zero_shot_acc,0.5\n")
        (d / "timing.csv").write_text("samples,seconds\n64,1.5\n")
        assert main(["report", "--runs", str(d)]) == 0
        out = capsys.readouterr().out
        assert "r0,64,640,zero_shot_acc,0.5,1.5" in out
