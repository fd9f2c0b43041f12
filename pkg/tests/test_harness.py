import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskprobe.errors import ConfigError
from maskprobe.harness.cli import main
from maskprobe.harness.config import SCHEMA, ExperimentConfig, parse_config_text
from maskprobe.harness.data import load_idx_dataset
from maskprobe.harness.experiments import ExperimentError, run_experiment
from maskprobe.harness.report import (
    ATTACK_COLUMNS,
    SCHEMA_VERSION,
    SWEEP_COLUMNS,
    ReportError,
    emit_report,
    envelope,
    format_cell,
    read_json_report,
    render_csv,
)

TINY = {
    "data.source": "synthetic-blobs",
    "data.classes": 3,
    "data.dim": 6,
    "data.separation": 3.0,
    "data.train_per_class": 30,
    "data.test_per_class": 10,
    "model.arch": "mlp",
    "model.hidden": [8],
    "model.method": "natural",
    "surrogate.arch": "mlp",
    "surrogate.method": "natural",
    "train.epochs": 2,
    "train.lr_decay_epochs": [],
    "train.epsilon": 0.5,
    "train.attack_iters": 2,
    "attack.epsilon": 0.5,
    "attack.iters": 3,
}


def tiny(tmp_path, **overrides):
    values = dict(TINY, output_dir=str(tmp_path / "out"))
    values.update(overrides)
    return ExperimentConfig.resolve(values)


def tiny_text(tmp_path, **overrides):
    return tiny(tmp_path, **overrides).to_text()


class TestConfigGrammar:
    def test_entries_comments_and_lists(self):
        text = """
        # a comment line
        experiment : str = diagnose   # trailing comment
        seed : int = 7
        attack.random_init : bool = yes
        sweep.deltas : floats = 0, 0.5 ,0.75
        model.hidden : ints =
        """
        v = parse_config_text(text)
        assert v == {"experiment": "diagnose", "seed": 7, "attack.random_init": True,
                     "sweep.deltas": [0.0, 0.5, 0.75], "model.hidden": []}

    @pytest.mark.parametrize("text, match", [
        ("nope : int = 1", "unknown key"),
        ("seed : float = 1", "declared float but must be int"),
        ("seed : int = 1\nseed : int = 2", "duplicate key"),
        ("seed = 1", "expected 'key : type = value'"),
        ("seed : int = one", "cannot read 'one' as int"),
        ("attack.random_init : bool = maybe", "as bool"),
    ])
    def test_rejections(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config_text(text)

    def test_error_names_line(self):
        with pytest.raises(ConfigError, match="cfg.txt:2"):
            parse_config_text("seed : int = 1\nbad line", "cfg.txt")

    def test_invalid_choice(self):
        with pytest.raises(ConfigError, match="attack.kind must be one of"):
            ExperimentConfig.resolve({"attack.kind": "deepfool"})

    def test_idx_paths_required(self):
        with pytest.raises(ConfigError, match="data.train_images is required"):
            ExperimentConfig.resolve({"data.source": "idx-files"})

    def test_missing_checkpoint_path(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            ExperimentConfig.resolve({"model.checkpoint": str(tmp_path / "absent.ckpt")})

    def test_invalid_training_values_surface_as_config_errors(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.resolve({"train.delta": 1.5})

    def test_step_defaults_to_quarter_epsilon(self):
        assert ExperimentConfig.resolve({"attack.epsilon": 0.2}).attack_config().step == pytest.approx(0.05)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), eps=st.floats(0.01, 1.0), deltas=st.lists(st.floats(0, 1), max_size=4),
           kind=st.sampled_from(["pgd", "gpga", "cw", "fgsm"]))
    def test_text_round_trip(self, seed, eps, deltas, kind):
        cfg = ExperimentConfig.resolve({"seed": seed, "attack.epsilon": eps, "sweep.deltas": deltas,
                                        "attack.kind": kind})
        assert ExperimentConfig.resolve(parse_config_text(cfg.to_text())) == cfg

    def test_every_schema_key_in_text(self):
        lines = ExperimentConfig.resolve().to_text().splitlines()
        assert [ln.split(" : ")[0] for ln in lines] == sorted(SCHEMA)


class TestReportFormat:
    def test_accuracy_four_decimals(self):
        assert format_cell("adv_acc", Fraction(1, 3)) == "0.3333"
        assert format_cell("clean_acc", Fraction(1)) == "1.0000"
        assert format_cell("gap", Fraction(-1, 8)) == "-0.1250"

    def test_stats_and_plain_values(self):
        assert format_cell("mean_grad_l1", 1234.56789) == "1234.57"
        assert format_cell("epsilon", 0.3) == "0.3"
        assert format_cell("iters", 20) == "20"
        assert format_cell("model_id", None) == ""

    def test_csv_header_and_rows(self):
        row = {c: 1 for c in ATTACK_COLUMNS}
        lines = render_csv([row, row], ATTACK_COLUMNS).splitlines()
        assert lines[0] == ",".join(ATTACK_COLUMNS)
        assert len(lines) == 3

    def test_missing_column(self):
        with pytest.raises(ReportError, match="missing columns"):
            render_csv([{"model_id": "m"}], ATTACK_COLUMNS)

    def test_json_round_trip(self, tmp_path):
        rep = envelope("attack", {"seed": 3}, {"rows": [{"adv_acc": 0.25}]})
        path = emit_report(rep, "json", tmp_path / "r.json")
        back = read_json_report(path)
        assert back == rep
        assert back["schema_version"] == SCHEMA_VERSION and back["complete"] is True

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ReportError):
            emit_report({}, "yaml", tmp_path / "r.yaml")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ReportError, match="cannot write"):
            emit_report({}, "json", blocker / "r.json")


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRecipes:
    def test_zero_iteration_attack_keeps_clean_accuracy(self, tmp_path):
        cfg = tiny(tmp_path, experiment="attack", **{"attack.iters": 0})
        run_experiment(cfg)
        (row,) = read_rows(cfg.output_dir / "attack.csv")
        assert row["adv_acc"] == row["clean_acc"]
        assert float(row["mean_feat_l1"]) == 0.0

    def test_attack_outputs(self, tmp_path):
        cfg = tiny(tmp_path, experiment="attack")
        rep = run_experiment(cfg)
        with open(cfg.output_dir / "attack.csv") as fh:
            assert fh.readline().strip() == ",".join(ATTACK_COLUMNS)
        (row,) = read_rows(cfg.output_dir / "attack.csv")
        assert row["attack"] == "pgd" and row["loss_kind"] == "ce" and row["iters"] == "3"
        assert len(row["adv_acc"].split(".")[1]) == 4
        assert rep["complete"] and read_json_report(cfg.output_dir / "report.json") == rep

    def test_train_recipe_writes_checkpoint_and_epochs(self, tmp_path):
        cfg = tiny(tmp_path, experiment="train")
        rep = run_experiment(cfg)
        assert (cfg.output_dir / "model.ckpt").exists()
        assert [r["epoch"] for r in read_rows(cfg.output_dir / "epochs.csv")] == ["1", "2"]
        assert rep["results"]["model_id"].startswith("natural-")

    def test_model_cache_is_reused(self, tmp_path):
        cfg = tiny(tmp_path, experiment="attack")
        run_experiment(cfg)
        ckpts = sorted(cfg.cache_dir.iterdir())
        stamp = [p.stat().st_mtime_ns for p in ckpts]
        run_experiment(cfg)
        assert [p.stat().st_mtime_ns for p in sorted(cfg.cache_dir.iterdir())] == stamp

    def test_sweep_one_row_per_cell(self, tmp_path):
        cfg = tiny(tmp_path, experiment="sweep-eta-delta", **{"sweep.methods": ["mask-at", "pgd-at"],
                                                               "sweep.etas": [2.0, 6.0],
                                                               "sweep.deltas": [0.0, 0.75]})
        rep = run_experiment(cfg)
        rows = read_rows(cfg.output_dir / "sweep.csv")
        cells = [(r["method"], float(r["eta"]), float(r["delta"])) for r in rows]
        assert cells == [("mask-at", 2.0, 0.0), ("mask-at", 2.0, 0.75), ("mask-at", 6.0, 0.0),
                         ("mask-at", 6.0, 0.75), ("pgd-at", 0.0, 0.0), ("pgd-at", 0.0, 0.75)]
        assert list(rows[0]) == list(SWEEP_COLUMNS)
        assert len(read_rows(cfg.output_dir / "attack.csv")) == 2 * len(rows)
        for r in rows:
            gap = Fraction(r["pgd_acc"]) - Fraction(r["gpga_acc"])
            assert abs(float(r["gap"]) - float(gap)) < 1e-4
            assert r["verdict"] == ("suspected-masking" if float(r["gap"]) > 0.1 else "no-masking")
        assert isinstance(rep["results"]["ordering_violations"], list)

    def test_diagnose(self, tmp_path):
        cfg = tiny(tmp_path, experiment="diagnose")
        rep = run_experiment(cfg)["results"]["report"]
        assert [r["attack"] for r in read_rows(cfg.output_dir / "attack.csv")] == ["pgd", "cw", "gpga"]
        assert rep["verdict"] in ("no-masking", "suspected-masking")

    def test_ablations(self, tmp_path):
        cfg = tiny(tmp_path / "s", experiment="ablate-surrogate", **{"ablate.surrogates": ["mlp-natural"]})
        run_experiment(cfg)
        assert [r["attack"] for r in read_rows(cfg.output_dir / "attack.csv")] == ["pgd", "gpga:mlp-natural"]
        cfg = tiny(tmp_path / "m", experiment="ablate-metric")
        run_experiment(cfg)
        assert [r["loss_kind"] for r in read_rows(cfg.output_dir / "attack.csv")] == \
            ["ce", "md-cosine", "md-neg-l1", "md-neg-l2"]

    def test_noisy_inference(self, tmp_path):
        cfg = tiny(tmp_path, experiment="noisy-inference")
        run_experiment(cfg)
        assert [r["attack"] for r in read_rows(cfg.output_dir / "attack.csv")] == ["pgd:noisy", "gpga:noisy"]

    def test_rerun_is_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            cfg = tiny(tmp_path / name, experiment="sweep-eta-delta",
                       **{"sweep.etas": [6.0], "sweep.deltas": [0.0, 0.75]})
            run_experiment(cfg)
            outs.append([(cfg.output_dir / f).read_bytes() for f in ("attack.csv", "sweep.csv")])
        assert outs[0] == outs[1]

    def test_failure_writes_incomplete_report(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        cfg = tiny(tmp_path, experiment="attack", **{"model.checkpoint": str(bad)})
        with pytest.raises(ExperimentError, match="attack"):
            run_experiment(cfg)
        rep = read_json_report(cfg.output_dir / "report.json")
        assert rep["complete"] is False and "Checkpoint" in rep["results"]["error"]

    def test_small_cnn_on_flat_data_fails_cleanly(self, tmp_path):
        cfg = tiny(tmp_path, experiment="train", **{"model.arch": "small-cnn"})
        with pytest.raises(ExperimentError, match="image-shaped"):
            run_experiment(cfg)


class TestCli:
    def test_success(self, tmp_path, capsys):
        conf = tmp_path / "c.txt"
        conf.write_text(tiny_text(tmp_path))
        assert main(["diagnose", "--config", str(conf), "--iters", "2"]) == 0
        out = capsys.readouterr().out
        assert "verdict" in out
        rep = read_json_report(tmp_path / "out" / "report.json")
        assert rep["experiment"] == "diagnose" and rep["config"]["attack.iters"] == 2

    def test_set_override(self, tmp_path):
        conf = tmp_path / "c.txt"
        conf.write_text(tiny_text(tmp_path))
        assert main(["attack", "--config", str(conf), "--set", "attack.kind=fgsm"]) == 0
        (row,) = read_rows(tmp_path / "out" / "attack.csv")
        assert row["attack"] == "fgsm" and row["iters"] == "1"

    @pytest.mark.parametrize("argv", [
        ["attack", "--bogus"],
        ["attack", "--epsilon", "lots"],
        ["attack", "--set", "nope=1"],
        ["attack", "--set", "seed"],
        ["attack", "--attack-kind", "deepfool"],
        ["fly"],
        [],
    ])
    def test_config_errors_exit_1(self, argv, capsys):
        assert main(argv) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_config_file_exit_1(self, tmp_path):
        assert main(["attack", "--config", str(tmp_path / "none.txt")]) == 1

    def test_runtime_failure_exit_2(self, tmp_path, capsys):
        conf = tmp_path / "c.txt"
        conf.write_text(tiny_text(tmp_path))
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"MPCKPT junk")
        assert main(["attack", "--config", str(conf), "--checkpoint", str(bad)]) == 2
        assert "failed" in capsys.readouterr().err
        assert json.loads((tmp_path / "out" / "report.json").read_text())["complete"] is False

    def test_gen_data(self, tmp_path):
        out = tmp_path / "glyphs"
        assert main(["gen-data", "--out", str(out), "--per-class", "3", "--test-per-class", "2"]) == 0
        train = load_idx_dataset(out / "train-images.idx", out / "train-labels.idx")
        test = load_idx_dataset(out / "test-images.idx", out / "test-labels.idx")
        assert len(train) == 30 and len(test) == 20
        assert train.images.shape[1:] == (1, 28, 28)
        np.testing.assert_array_equal(np.bincount(train.labels), np.full(10, 3))
