"""CLI tests: argument parsing, config-file merging, and each subcommand
run end-to-end at miniature scale through `main()`."""

import csv
import os

import numpy as np
import pytest

from reflseg import cli
from reflseg import episodes as ep


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    ep.generate_dataset(n_per_class=4, seed=31, out_dir=root)
    return str(root)


def run(argv):
    return cli.main(argv)


TINY_TRAIN = ["--epochs", "1", "--episodes-per-epoch", "2", "--batch", "1"]


class TestParsing:
    def test_missing_command_exits_2(self, capsys):
        assert run([]) == 2
        capsys.readouterr()

    def test_unknown_command_exits_2(self, capsys):
        assert run(["frobnicate"]) == 2
        capsys.readouterr()

    def test_bad_onoff_value(self, capsys):
        assert run(["train-meta", "--sri", "yes"]) == 2
        capsys.readouterr()

    def test_bad_fold(self, capsys):
        assert run(["eval", "--fold", "7"]) == 2
        capsys.readouterr()

    def test_runtime_error_exits_1(self, tmp_path, capsys):
        code = run(["eval", "--dataset-dir", str(tmp_path / "missing"),
                    "--out-dir", str(tmp_path / "out")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestConfigFile:
    def test_parse_flat_config(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("lr = 0.1  # comment\n\n# full line comment\nepochs=3\n"
                        "flip-augment = on\n")
        values = cli._parse_config_file(path)
        assert values == {"lr": "0.1", "epochs": "3", "flip_augment": "on"}

    def test_malformed_line_raises(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("just some words\n")
        with pytest.raises(ValueError):
            cli._parse_config_file(path)

    def test_config_sets_values(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 1\nepisodes_per_epoch = 2\nbatch = 1\n"
                       "sri = off\nqri = off\n")
        out = tmp_path / "out"
        assert run(["train-meta", "--config", str(cfg),
                    "--dataset-dir", dataset_dir, "--out-dir", str(out)]) == 0
        capsys.readouterr()
        echoed = (out / "effective_config.txt").read_text()
        assert "epochs = 1" in echoed
        assert "sri = False" in echoed

    def test_explicit_flag_beats_config(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 7\nepisodes_per_epoch = 2\nbatch = 1\n")
        out = tmp_path / "out"
        assert run(["train-meta", "--config", str(cfg), "--epochs", "1",
                    "--dataset-dir", dataset_dir, "--out-dir", str(out)]) == 0
        capsys.readouterr()
        assert "epochs = 1" in (out / "effective_config.txt").read_text()

    def test_unknown_key_rejected(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("warp_speed = 9\n")
        assert run(["train-meta", "--config", str(cfg),
                    "--dataset-dir", dataset_dir,
                    "--out-dir", str(tmp_path / "out")]) == 1
        assert "warp_speed" in capsys.readouterr().err


class TestGenData:
    def test_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert run(["gen-data", "--n-per-class", "2", "--seed", "5",
                    "--out-dir", str(out)]) == 0
        capsys.readouterr()
        manifest = ep.load_manifest(out)
        assert len(manifest.rows) == 40
        assert (out / "effective_config.txt").exists()


class TestTrainAndEval:
    def test_train_meta_then_eval(self, dataset_dir, tmp_path, capsys):
        train_out = tmp_path / "train"
        assert run(["train-meta", *TINY_TRAIN, "--dataset-dir", dataset_dir,
                    "--out-dir", str(train_out)]) == 0
        assert (train_out / "model.ckpt").exists()
        assert (train_out / "train_log.csv").exists()

        eval_out = tmp_path / "eval"
        assert run(["eval", "--dataset-dir", dataset_dir,
                    "--out-dir", str(eval_out),
                    "--ckpt", str(train_out / "model.ckpt"),
                    "--n-episodes-eval", "10"]) == 0
        printed = capsys.readouterr().out
        assert "mIoU" in printed
        with open(eval_out / "eval.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["fold", "shot", "seed", "miou", "fbiou", "class_ious"]
        assert len(rows) == 2
        assert 0.0 <= float(rows[1][3]) <= 100.0

    def test_eval_multi_seed(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        assert run(["eval", "--dataset-dir", dataset_dir, "--out-dir", str(out),
                    "--n-episodes-eval", "5", "--seeds", "2"]) == 0
        assert "range" in capsys.readouterr().out
        with open(out / "eval.csv") as f:
            assert len(list(csv.reader(f))) == 3

    def test_train_base_then_meta_with_base(self, dataset_dir, tmp_path, capsys):
        base_out = tmp_path / "base"
        assert run(["train-base", "--dataset-dir", dataset_dir,
                    "--out-dir", str(base_out)]) == 0
        assert (base_out / "base.ckpt").exists()
        meta_out = tmp_path / "meta"
        assert run(["train-meta", *TINY_TRAIN, "--base-learner", "on",
                    "--base-ckpt", str(base_out / "base.ckpt"),
                    "--dataset-dir", dataset_dir, "--out-dir", str(meta_out)]) == 0
        capsys.readouterr()

    def test_meta_with_base_but_no_ckpt_fails(self, dataset_dir, tmp_path, capsys):
        assert run(["train-meta", *TINY_TRAIN, "--base-learner", "on",
                    "--dataset-dir", dataset_dir,
                    "--out-dir", str(tmp_path / "out")]) == 1
        assert "base checkpoint" in capsys.readouterr().err


class TestAblate:
    def test_grid_csv(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "abl"
        assert run(["ablate", *TINY_TRAIN, "--fold", "0", "--seeds", "1",
                    "--n-episodes-eval", "5",
                    "--dataset-dir", dataset_dir, "--out-dir", str(out)]) == 0
        capsys.readouterr()
        with open(out / "ablation.csv") as f:
            rows = [r for r in csv.reader(f) if r]
        variants = {r[0] for r in rows[1:6]}
        assert variants == {"baseline", "sri_only", "qri_only", "full",
                            "baseline_aug"}
        # summary block repeats each variant with its mean
        assert rows[6] == ["variant", "mean_miou"]


class TestDemo:
    def test_writes_maps(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "demo"
        assert run(["demo", "--dataset-dir", dataset_dir,
                    "--out-dir", str(out)]) == 0
        capsys.readouterr()
        names = {"prior_original.pgm", "prior_reflection.pgm", "prior_fused.pgm",
                 "pred_original.pgm", "pred_reflection.pgm", "pred_fused.pgm",
                 "query_gt.pgm"}
        assert names <= set(os.listdir(out))
        gt = ep.read_pgm(out / "query_gt.pgm")
        assert gt.shape == (4, 4) or gt.shape == (64, 64)

    def test_single_view_demo_skips_reflection_maps(self, dataset_dir, tmp_path,
                                                    capsys):
        out = tmp_path / "demo"
        assert run(["demo", "--sri", "off", "--qri", "off",
                    "--dataset-dir", dataset_dir, "--out-dir", str(out)]) == 0
        capsys.readouterr()
        files = set(os.listdir(out))
        assert "pred_reflection.pgm" not in files
        assert "prior_reflection.pgm" not in files


class TestGradcheckCommand:
    def test_passes(self, tmp_path, capsys):
        assert run(["gradcheck", "--out-dir", str(tmp_path)]) == 0
        assert "gradcheck PASS" in capsys.readouterr().out
