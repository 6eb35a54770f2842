import filecmp
import os

import numpy as np
import pytest

from seqvessel.cli import (ABLATE_CELLS, format_config, main, parse_config,
                           run_id)
from seqvessel.data import load_sequence, read_manifest
from seqvessel.network import NetworkConfig
from seqvessel.pgm import read_pgm
from seqvessel.training import TrainConfig

FAST_TRAIN = ["--stages", "2", "--base", "2", "--hw", "16", "--dropout", "0",
              "--epochs", "2", "--batch", "2", "--no-augment"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    path = str(root / "c")
    assert main(["synth", "--out", path, "--sequences", "8", "--hw", "16",
                 "--frames", "5", "--seed", "21"]) == 0
    return path


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs") / "r")
    assert main(["train", "--data", corpus, "--out", out, "--seed", "2",
                 *FAST_TRAIN]) == 0
    return out


class TestConfigRoundTrip:
    def test_round_trips_identically(self):
        net = NetworkConfig(stages=3, base_channels=4, input_hw=(32, 32),
                            dropout_rate=0.25, encoder="2d", attention=False)
        tr = TrainConfig(lr=0.005, epochs=17, seed=9, loss="ce", augment=False)
        text = format_config(net, tr)
        net2, tr2 = parse_config(text)
        assert net2 == net and tr2 == tr
        assert format_config(net2, tr2) == text

    def test_run_id_stable(self):
        text = format_config(NetworkConfig(input_hw=(64, 64)), TrainConfig())
        assert run_id(text) == run_id(text)
        assert len(run_id(text)) == 12


class TestUsage:
    def test_help_exits_zero_and_documents_defaults(self, capsys):
        assert main(["--help"]) == 0
        capsys.readouterr()
        for sub in ("synth", "train", "eval", "infer", "ablate", "gradcheck"):
            assert main([sub, "--help"]) == 0
            out = capsys.readouterr().out
            assert "--" in out and "default" in out

    def test_unknown_subcommand_exits_one(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag_exits_one(self):
        assert main(["synth", "--frobnicate"]) == 1

    def test_missing_required_flag_exits_one(self):
        assert main(["train"]) == 1

    def test_runtime_error_exits_two(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "o"), *FAST_TRAIN]) == 2
        assert "error" in capsys.readouterr().err


class TestSynth:
    def test_layout_and_split(self, corpus):
        entries = read_manifest(os.path.join(corpus, "manifest.txt"))
        assert len(entries) == 8
        splits = [s for _, s in entries]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (4, 2, 2)
        seq = load_sequence(os.path.join(corpus, entries[0][0]))
        assert len(seq.frames) == 5
        assert seq.frames[0].shape == (16, 16)
        assert seq.masks is not None

    def test_reproducible_tree(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert main(["synth", "--out", out, "--sequences", "3", "--hw", "16",
                         "--frames", "4", "--seed", "33"]) == 0
        cmp = filecmp.dircmp(a, b)
        assert not cmp.diff_files
        for sub in cmp.subdirs.values():
            assert not sub.diff_files


class TestTrain:
    def test_run_directory_layout(self, run_dir):
        assert os.path.exists(os.path.join(run_dir, "config.txt"))
        assert os.path.exists(os.path.join(run_dir, "history.csv"))
        assert os.path.exists(os.path.join(run_dir, "summary.txt"))
        assert os.path.exists(os.path.join(run_dir, "checkpoints", "final.ckpt"))

    def test_config_file_round_trips(self, run_dir):
        with open(os.path.join(run_dir, "config.txt")) as fh:
            text = fh.read()
        net, tr = parse_config(text)
        assert format_config(net, tr) == text
        assert net.stages == 2 and tr.epochs == 2

    def test_history_has_requested_epochs(self, run_dir):
        with open(os.path.join(run_dir, "history.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0].startswith("epoch,")
        assert len(lines) == 3

    def test_reruns_are_byte_identical(self, corpus, tmp_path):
        outs = [str(tmp_path / n) for n in ("r1", "r2")]
        for out in outs:
            assert main(["train", "--data", corpus, "--out", out, "--seed", "5",
                         *FAST_TRAIN]) == 0
        for name in ("config.txt", "history.csv", "summary.txt",
                     os.path.join("checkpoints", "final.ckpt")):
            a = os.path.join(outs[0], name)
            b = os.path.join(outs[1], name)
            assert filecmp.cmp(a, b, shallow=False), name


class TestEval:
    def test_metrics_csv_written(self, corpus, run_dir, tmp_path):
        out = str(tmp_path / "ev")
        assert main(["eval", "--checkpoint",
                     os.path.join(run_dir, "checkpoints", "final.ckpt"),
                     "--data", corpus, "--split", "test", "--out", out]) == 0
        with open(os.path.join(out, "metrics.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "sample_id,DR,P,F,GVE"
        assert len(lines) > 1


class TestInfer:
    def test_one_map_per_frame(self, corpus, run_dir, tmp_path):
        seq_dir = os.path.join(corpus, read_manifest(os.path.join(corpus, "manifest.txt"))[0][0])
        out = str(tmp_path / "inf")
        assert main(["infer", "--checkpoint",
                     os.path.join(run_dir, "checkpoints", "final.ckpt"),
                     "--data", seq_dir, "--out", out]) == 0
        masks = sorted(os.listdir(os.path.join(out, "masks")))
        assert sum(n.startswith("prob_") for n in masks) == 5
        assert sum(n.startswith("mask_") for n in masks) == 5

    def test_threshold_monotonicity_and_quantization(self, corpus, run_dir, tmp_path):
        seq_dir = os.path.join(corpus, read_manifest(os.path.join(corpus, "manifest.txt"))[0][0])
        counts = {}
        for thr in ("0.2", "0.8"):
            out = str(tmp_path / f"t{thr}")
            assert main(["infer", "--checkpoint",
                         os.path.join(run_dir, "checkpoints", "final.ckpt"),
                         "--data", seq_dir, "--out", out, "--threshold", thr,
                         "--raw"]) == 0
            total = 0
            for i in range(1, 6):
                total += int((read_pgm(os.path.join(out, "masks", f"mask_{i:04d}.pgm")) > 0).sum())
            counts[thr] = total
        assert counts["0.8"] <= counts["0.2"]
        # quantized probabilities match the full-precision dump within 1/255
        from seqvessel.checkpoint import load_tensors
        raw = load_tensors(os.path.join(str(tmp_path / "t0.2"), "probs.bin"))
        for i in range(1, 6):
            q = read_pgm(os.path.join(str(tmp_path / "t0.2"), "masks", f"prob_{i:04d}.pgm"))
            full = raw[f"prob.{i:04d}"]
            assert np.max(np.abs(q / 255.0 - full)) <= 0.5 / 255 + 1e-6


class TestAblateAndGradcheck:
    def test_gradcheck_single_target(self, capsys):
        assert main(["gradcheck", "--target", "relu", "--trials", "2"]) == 0
        assert "PASS relu" in capsys.readouterr().out

    def test_gradcheck_unknown_target(self):
        assert main(["gradcheck", "--target", "nope"]) == 2

    def test_ablate_two_cells(self, corpus, tmp_path, capsys):
        out = str(tmp_path / "abl")
        assert main(["ablate", "--data", corpus, "--out", out, "--seeds", "1",
                     "--cells", "3d:cab:dice,3d:nocab:dice", *FAST_TRAIN]) == 0
        with open(os.path.join(out, "ablation.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "cell,seed,F_mean,F_std"
        assert len(lines) == 3
        assert os.path.exists(os.path.join(out, "summary.txt"))

    def test_ablate_rejects_unknown_cell(self, corpus, tmp_path):
        assert main(["ablate", "--data", corpus, "--out", str(tmp_path / "x"),
                     "--cells", "4d:cab:dice"]) == 2

    def test_cell_grid_is_full_cross(self):
        assert len(ABLATE_CELLS) == 8


def test_workers_env_fallback(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("SEQVESSEL_WORKERS", "2")
    out = str(tmp_path / "envrun")
    assert main(["train", "--data", corpus, "--out", out, "--seed", "2",
                 *FAST_TRAIN]) == 0
    with open(os.path.join(out, "config.txt")) as fh:
        assert "workers=2" in fh.read()
