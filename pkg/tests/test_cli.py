"""CLI contract tests: exit codes, output files, printed grammar, and
cross-command consistency, all run in-process through cli.main."""

import os
import re

import numpy as np
import pytest

from cardioseq import checkpoint as CK
from cardioseq import cli
from cardioseq import data as D
from cardioseq import model as M
from cardioseq import tensor as T


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small synthetic dataset + a one-epoch trained checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    assert cli.main(["synth", "--out", str(root / "data"), "--seed", "3",
                     "--ischemic", "7", "--non-ischemic", "5",
                     "--format", "r96a"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        "data.manifest = data/manifest.csv\n"
        "data.train_count = 8\n"
        "train.max_epochs = 1\n"
        "train.batch_size = 4\n"
        "model.seq_len = 64\n"
        "model.feat_dim = 32\n"
        "model.lstm_hidden = 8\n"
        f"out_dir = {root / 'run'}\n",
        encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return root


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestSynth:
    def test_counts_and_loadability(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path / "d"), "--seed", "8",
                         "--ischemic", "3", "--non-ischemic", "2"]) == 0
        entries = D.load_manifest(tmp_path / "d" / "manifest.csv")
        assert sum(e.label for e in entries) == 3
        assert sum(1 - e.label for e in entries) == 2
        for e in entries:
            s = D.load_image(e)
            assert s.pixels.shape == (96, 96, 3)

    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            cli.main(["synth", "--out", str(tmp_path / d), "--seed", "9",
                      "--ischemic", "2", "--non-ischemic", "2",
                      "--format", "r96a"])
        for name in os.listdir(tmp_path / "a"):
            assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)


class TestTrain:
    def test_outputs_exist(self, workspace):
        out = workspace / "run"
        for name in ("model.csq", "curves.csv", "metrics.txt",
                     "misclassified.csv"):
            assert (out / name).is_file()

    def test_unknown_key_exit_2_naming_key_and_line(self, workspace, tmp_path,
                                                    capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 1\ntrain.warmup = 5\n", encoding="utf-8")
        assert cli.main(["train", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "train.warmup" in err and "line 2" in err

    def test_missing_manifest_key_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "nomanifest.cfg"
        cfg.write_text("train.max_epochs = 1\n", encoding="utf-8")
        assert cli.main(["train", "--config", str(cfg)]) == 2
        assert "data.manifest" in capsys.readouterr().err

    def test_identical_invocations_bitwise_identical_outputs(self, workspace):
        cfg = workspace / "run.cfg"
        outs = []
        for tag in ("rep1", "rep2"):
            assert cli.main(["train", "--config", str(cfg),
                             "--out", str(workspace / tag)]) == 0
            outs.append(workspace / tag)
        for name in ("model.csq", "curves.csv", "metrics.txt",
                     "misclassified.csv"):
            assert read(outs[0] / name) == read(outs[1] / name), name

    def test_seed_flag_changes_results(self, workspace):
        cfg = workspace / "run.cfg"
        assert cli.main(["train", "--config", str(cfg), "--seed", "77",
                         "--out", str(workspace / "seeded")]) == 0
        assert read(workspace / "seeded" / "model.csq") != \
            read(workspace / "run" / "model.csq")

    def test_epoch_log_lines_printed(self, workspace, tmp_path, capsys):
        cfg = workspace / "run.cfg"
        assert cli.main(["train", "--config", str(cfg),
                         "--out", str(tmp_path / "log")]) == 0
        out = capsys.readouterr().out
        assert re.search(r"epoch 1/1 train_loss=\d+\.\d{4} "
                         r"train_acc=\d+\.\d{4} val_loss=", out)
        assert "split sha256=" in out


class TestEval:
    def test_eval_prints_and_writes(self, workspace, tmp_path, capsys):
        out = tmp_path / "evalout"
        rc = cli.main(["eval", "--checkpoint", str(workspace / "run" / "model.csq"),
                       "--manifest", str(workspace / "data" / "manifest.csv"),
                       "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert re.search(r"accuracy=\d+\.\d{2} sensitivity=", printed)
        m = re.search(r"TP=(\d+) FP=(\d+) FN=(\d+) TN=(\d+)", printed)
        assert m is not None
        tp, fp, fn, tn = (int(x) for x in m.groups())

        assert (out / "metrics.txt").is_file()
        mis = (out / "misclassified.csv").read_text().splitlines()
        assert mis[0] == "path,true_label,predicted_label,prob_ischemic"
        # cross-file consistency: every error is listed, everything else correct
        entries = D.load_manifest(workspace / "data" / "manifest.csv")
        assert len(mis) - 1 == fp + fn
        assert tp + fp + fn + tn == len(entries)

    def test_eval_wrong_image_size_exit_2(self, workspace, tmp_path, capsys):
        small = tmp_path / "small"
        small.mkdir()
        D.write_png(small / "img.png", np.zeros((32, 32, 3), dtype=np.uint8))
        (small / "m.csv").write_text("path,label\nimg.png,0\n", encoding="utf-8")
        rc = cli.main(["eval", "--checkpoint", str(workspace / "run" / "model.csq"),
                       "--manifest", str(small / "m.csv"),
                       "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "32x32" in capsys.readouterr().err

    def test_eval_missing_checkpoint_exit_2(self, workspace, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "no.csq"),
                         "--manifest", str(workspace / "data" / "manifest.csv"),
                         "--out", str(tmp_path)]) == 2


class TestPredict:
    def test_output_grammar_and_consistency(self, workspace, capsys):
        entries = D.load_manifest(workspace / "data" / "manifest.csv")
        image = entries[0].resolved
        rc = cli.main(["predict",
                       "--checkpoint", str(workspace / "run" / "model.csq"),
                       "--image", image])
        assert rc == 0
        line = capsys.readouterr().out.strip()
        m = re.fullmatch(r"label=([01]) prob_ischemic=(\S+)", line)
        assert m is not None
        # cross-command consistency with the library path
        ckpt = CK.load_checkpoint(workspace / "run" / "model.csq")
        sample = D.load_image(entries[0], ckpt.config.input_size)
        label, prob = M.predict(ckpt.params, ckpt.config, sample.pixels)
        assert int(m.group(1)) == label
        assert float(m.group(2)) == prob

    def test_wrong_size_image_exit_2(self, workspace, tmp_path, capsys):
        img = tmp_path / "tiny.png"
        D.write_png(img, np.zeros((48, 48, 3), dtype=np.uint8))
        rc = cli.main(["predict",
                       "--checkpoint", str(workspace / "run" / "model.csq"),
                       "--image", str(img)])
        assert rc == 2
        assert "48x48" in capsys.readouterr().err


class TestGradcheck:
    def test_passes_with_per_component_lines(self, capsys):
        assert cli.main(["gradcheck", "--module", "layers"]) == 0
        out = capsys.readouterr().out
        assert "dense: max_rel_error=" in out
        assert "self_attention_masked: max_rel_error=" in out
        assert "passed" in out

    def test_model_suite_covers_three_variants(self, capsys):
        assert cli.main(["gradcheck", "--module", "model"]) == 0
        out = capsys.readouterr().out
        for name in ("model_cnn_only", "model_cnn_lstm",
                     "model_cnn_bilstm_attn"):
            assert name in out

    def test_corrupted_backward_detected(self, monkeypatch, capsys):
        # negative control: skew the sigmoid derivative by 1%; every
        # sigmoid-bearing component must now fail and be named
        def bad_sigmoid(x):
            v = x.values
            y = 1.0 / (1.0 + np.exp(-v))

            def bwd(g):
                T._accum(x, g * y * (1.0 - y) * 1.01)

            return T._finish("sigmoid", y, (x,), bwd)

        monkeypatch.setattr(T, "sigmoid", bad_sigmoid)
        assert cli.main(["gradcheck", "--module", "layers"]) == 1
        captured = capsys.readouterr()
        assert "FAILED" in captured.err
        assert "lstm_cell" in captured.err

    def test_repeat_runs_report_identical_errors(self, capsys):
        cli.main(["gradcheck", "--module", "layers"])
        first = capsys.readouterr().out
        cli.main(["gradcheck", "--module", "layers"])
        second = capsys.readouterr().out
        assert first == second


class TestAblation:
    def test_three_rows_and_equal_split_hashes(self, workspace, tmp_path,
                                               capsys):
        cfg = tmp_path / "ab.cfg"
        cfg.write_text(
            f"data.manifest = {workspace / 'data' / 'manifest.csv'}\n"
            "data.train_count = 8\n"
            "train.max_epochs = 1\n"
            "train.batch_size = 4\n"
            "model.seq_len = 64\n"
            "model.feat_dim = 32\n"
            "model.lstm_hidden = 8\n"
            f"out_dir = {tmp_path / 'ab'}\n",
            encoding="utf-8")
        assert cli.main(["ablation", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        hashes = re.findall(r"split sha256=([0-9a-f]{64})", out)
        assert len(hashes) == 3 and len(set(hashes)) == 1
        table = (tmp_path / "ab" / "metrics.txt").read_text()
        for variant in ("cnn_only", "cnn_lstm", "cnn_bilstm_attn"):
            assert variant in table
            assert (tmp_path / "ab" / f"model_{variant}.csq").is_file()
        # every metric cell populated (model rows show three numeric columns)
        rows = [ln for ln in table.splitlines()
                if ln.startswith(("cnn_only", "cnn_lstm", "cnn_bilstm_attn"))]
        assert len(rows) == 3
        for row in rows:
            assert len(re.findall(r"\d+\.\d{2}|n/a", row)) == 3


class TestExportAugmented:
    def test_writes_copies_and_manifest(self, workspace, tmp_path):
        out = tmp_path / "aug"
        rc = cli.main(["export-augmented",
                       "--manifest", str(workspace / "data" / "manifest.csv"),
                       "--out", str(out), "--copies", "2", "--seed", "4",
                       "--format", "r96a"])
        assert rc == 0
        src = D.load_manifest(workspace / "data" / "manifest.csv")
        entries = D.load_manifest(out / "manifest.csv")
        assert len(entries) == 2 * len(src)
        for e in entries[:4]:
            assert D.load_image(e).pixels.shape == (96, 96, 3)
        # labels preserved per source image
        assert sum(e.label for e in entries) == 2 * sum(e.label for e in src)


class TestTopLevel:
    def test_no_command_exit_2(self, capsys):
        assert cli.main([]) == 2
        assert "usage" in capsys.readouterr().out.lower()

    def test_help_exit_0(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "gradcheck" in capsys.readouterr().out

    def test_train_help_documents_config_keys(self, capsys):
        assert cli.main(["train", "--help"]) == 0
        out = capsys.readouterr().out
        for key in ("train.learning_rate", "0.0001", "train.decay",
                    "0.000001", "train.l2_lambda", "0.01", "train.dropout",
                    "0.5", "data.train_count", "65", "model.attention_width",
                    "256"):
            assert key in out

    def test_missing_required_flag_exit_2(self, capsys):
        assert cli.main(["train"]) == 2

    def test_bad_subcommand_exit_2(self, capsys):
        assert cli.main(["frobnicate"]) == 2
