import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from arm_lab import cli
from arm_lab.arm import build_network, save_checkpoint
from arm_lab.cli import main
from arm_lab.data import load_dataset
from arm_lab.erosion import perception_map
from arm_lab.train import TrainConfig, build_arm_description, build_gap_description


def read_manifest(out_dir):
    with open(out_dir / "manifest.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data") / "corpus"
    code = main(
        ["synth", "--out", str(root), "--classes", "3", "--per-class", "10",
         "--extent", "16", "--seed", "5"]
    )
    assert code == 0
    return root


TRAIN_ARGS = [
    "--epochs", "2", "--batch-size", "16", "--widths", "4,8",
    "--seed", "1", "--sampler", "mrr", "--val-fraction", "0.25",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("cli-train") / "run"
    assert main(["train", "--data", str(corpus), "--out", str(out), *TRAIN_ARGS]) == 0
    return out


class TestParsing:
    def test_help_lists_exit_codes(self, capsys):
        assert main(["--help"]) == 0
        assert "exit codes" in capsys.readouterr().out

    def test_missing_required_argument(self):
        assert main(["perception"]) == 2

    def test_unknown_command(self):
        assert main(["mystery"]) == 2

    def test_entry_points_work(self):
        binary = shutil.which("arm-lab")
        assert binary is not None, "console script not installed"
        run = subprocess.run([binary, "--help"], capture_output=True, text=True)
        assert run.returncode == 0 and "usage" in run.stdout
        run = subprocess.run(
            [sys.executable, "-m", "arm_lab", "--help"], capture_output=True, text=True
        )
        assert run.returncode == 0 and "usage" in run.stdout


class TestPerception:
    def test_writes_counts_matching_library(self, tmp_path, capsys):
        out = tmp_path / "p"
        code = main(
            ["perception", "--height", "7", "--width", "7", "--kernel", "3",
             "--out", str(out)]
        )
        assert code == 0
        grid = np.loadtxt(out / "perception.csv", delimiter=",", dtype=int)
        assert np.array_equal(grid, perception_map(7, 7, 3, 1, 0).counts)
        assert grid[0, 0] == 1 and grid[3, 3] == 9
        assert (out / "perception.pgm").exists()
        manifest = read_manifest(out)
        assert manifest["checks"]["conserved"] is True
        assert "corner=1" in capsys.readouterr().out

    def test_oversized_kernel_is_geometry_error(self, tmp_path, capsys):
        code = main(
            ["perception", "--height", "7", "--width", "7", "--kernel", "9",
             "--out", str(tmp_path / "p")]
        )
        assert code == 3
        assert "arm-lab: error" in capsys.readouterr().err


class TestErosion:
    def test_two_layer_stack(self, tmp_path):
        out = tmp_path / "e"
        code = main(
            ["erosion", "--height", "8", "--width", "8",
             "--layers", "3,1,1;3,1,1", "--out", str(out)]
        )
        assert code == 0
        first = np.loadtxt(out / "erosion_L1.csv", delimiter=",")
        assert abs(first[0, 0] - 5.0 / 9.0) <= 1e-9
        assert (out / "erosion_L2.pgm").exists()
        manifest = read_manifest(out)
        assert manifest["checks"]["contamination_in_unit_interval"] is True
        peaks = manifest["results"]["per_layer_max_contamination"]
        assert len(peaks) == 2 and peaks[1] >= peaks[0]

    def test_malformed_layers(self, tmp_path):
        code = main(
            ["erosion", "--height", "8", "--width", "8", "--layers", "3,1",
             "--out", str(tmp_path / "e")]
        )
        assert code == 5


class TestSynth:
    def test_imbalanced_counts(self, tmp_path):
        out = tmp_path / "c"
        code = main(
            ["synth", "--out", str(out), "--classes", "3", "--per-class", "6,4,2",
             "--extent", "16", "--seed", "0"]
        )
        assert code == 0
        index = load_dataset(out)
        assert index.counts.tolist() == [6, 4, 2]
        manifest = read_manifest(out)
        assert manifest["run"]["command"] == "synth"
        assert manifest["run"]["checks"]["loaded_back"] is True

    def test_count_list_length_must_match(self, tmp_path):
        code = main(
            ["synth", "--out", str(tmp_path / "c"), "--classes", "3",
             "--per-class", "6,4", "--extent", "16"]
        )
        assert code == 5

    def test_garbage_count(self, tmp_path):
        code = main(
            ["synth", "--out", str(tmp_path / "c"), "--classes", "3",
             "--per-class", "many", "--extent", "16"]
        )
        assert code == 5


class TestTrainCommand:
    def test_artifacts_and_manifest(self, trained, corpus):
        manifest = read_manifest(trained)
        assert manifest["command"] == "train"
        assert manifest["checks"]["confusion_consistent"] is True
        assert manifest["results"]["epochs_run"] == 2
        assert manifest["results"]["diverged"] is False
        assert 0.0 <= manifest["results"]["wa"] <= 1.0

        with open(trained / "metrics.csv") as fh:
            lines = fh.read().strip().splitlines()
        assert lines[0] == "epoch,loss,lr,wa,ua"
        assert len(lines) == 3
        assert (trained / "confusion.csv").exists()
        assert (trained / "checkpoint" / "manifest.json").exists()

    def test_missing_corpus_is_data_error(self, tmp_path, capsys):
        code = main(
            ["train", "--data", str(tmp_path / "nowhere"), "--out",
             str(tmp_path / "out"), *TRAIN_ARGS]
        )
        assert code == 4
        assert "arm-lab: error" in capsys.readouterr().err


class TestEvalCommand:
    def test_reproduces_training_metrics(self, trained, corpus, tmp_path):
        out = tmp_path / "eval"
        code = main(
            ["eval", "--checkpoint", str(trained / "checkpoint"), "--data",
             str(corpus), "--out", str(out), "--split", "val",
             "--batch-size", "16"]
        )
        assert code == 0
        manifest = read_manifest(out)
        assert manifest["checks"]["matches_training_eval"] is True
        train_manifest = read_manifest(trained)
        assert abs(manifest["results"]["wa"] - train_manifest["results"]["wa"]) <= 1e-9
        assert manifest["results"]["samples"] == 6  # 25% of 10, three classes

    def test_train_split_size(self, trained, corpus, tmp_path):
        out = tmp_path / "eval"
        code = main(
            ["eval", "--checkpoint", str(trained / "checkpoint"), "--data",
             str(corpus), "--out", str(out), "--split", "train"]
        )
        assert code == 0
        assert read_manifest(out)["results"]["samples"] == 24

    def test_class_mismatch_is_data_error(self, trained, tmp_path):
        other = tmp_path / "other"
        assert main(
            ["synth", "--out", str(other), "--classes", "4", "--per-class", "4",
             "--extent", "16", "--seed", "2"]
        ) == 0
        code = main(
            ["eval", "--checkpoint", str(trained / "checkpoint"), "--data",
             str(other), "--out", str(tmp_path / "out")]
        )
        assert code == 4

    def test_untrained_amendment_state_is_runtime_error(self, corpus, tmp_path, capsys):
        index = load_dataset(corpus)
        config = TrainConfig(backbone_widths=(4, 8))
        network = build_network(build_arm_description(index, config), seed=0)
        save_checkpoint(tmp_path / "fresh", network)
        code = main(
            ["eval", "--checkpoint", str(tmp_path / "fresh"), "--data", str(corpus),
             "--out", str(tmp_path / "out"), "--split", "all"]
        )
        assert code == 6
        assert "error" in capsys.readouterr().err

    def test_checkpoint_without_split_info_needs_split_all(self, corpus, tmp_path):
        index = load_dataset(corpus)
        config = TrainConfig(backbone_widths=(4, 8))
        network = build_network(build_gap_description(index, config), seed=0)
        save_checkpoint(tmp_path / "bare", network)
        code = main(
            ["eval", "--checkpoint", str(tmp_path / "bare"), "--data", str(corpus),
             "--out", str(tmp_path / "out"), "--split", "val"]
        )
        assert code == 5


class TestSweepCommand:
    def test_sweep_records_failures_without_dying(self, corpus, tmp_path, monkeypatch):
        monkeypatch.setenv("ARM_LAB_THREADS", "2")
        out = tmp_path / "sweep"
        code = main(
            ["sweep-k", "--data", str(corpus), "--out", str(out),
             "--k-min", "3", "--k-max", "5", "--epochs", "1",
             "--batch-size", "16", "--seed", "0"]
        )
        assert code == 0
        with open(out / "sweep_k.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "wa", "ua", "error"]
        assert [row[0] for row in rows[1:]] == ["3", "4", "5"]
        assert rows[1][3] == "" and rows[2][3] == ""
        assert rows[3][3] != ""  # k=5 cannot fit the 4x4 map
        manifest = read_manifest(out)
        # two downsampling blocks leave a 4x4 map: k=5 cannot fit
        assert manifest["checks"]["completed"] == 2
        assert manifest["checks"]["failed"] == 1
        assert manifest["results"]["best_k"] in (3, 4)
        assert manifest["config"]["workers"] == 2

    def test_bad_range(self, corpus, tmp_path):
        code = main(
            ["sweep-k", "--data", str(corpus), "--out", str(tmp_path / "s"),
             "--k-min", "0", "--k-max", "2"]
        )
        assert code == 5


class TestClustersCommand:
    def test_reference_geometry_verdict(self, tmp_path):
        out = tmp_path / "cl"
        code = main(
            ["clusters", "--channels", "512", "--height", "7", "--width", "7",
             "--out", str(out)]
        )
        assert code == 0
        profile = np.loadtxt(out / "clusters.csv", delimiter=",", dtype=int)
        axis = np.array([24, 56, 64, 64, 64, 56, 24])
        assert np.array_equal(profile, np.outer(axis, axis))
        manifest = read_manifest(out)
        assert manifest["checks"]["outer_ring_strictly_lighter"] is True
        assert manifest["results"]["ring_max"] == 1536
        assert manifest["results"]["interior_min"] == 3136

    def test_kernel_overrun_is_geometry_error(self, tmp_path):
        code = main(
            ["clusters", "--channels", "512", "--height", "1", "--width", "1",
             "--out", str(tmp_path / "cl")]
        )
        assert code == 3


class TestUnexpectedErrors:
    def test_internal_failure_maps_to_seven(self, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise RuntimeError("wires crossed")

        monkeypatch.setattr(cli, "perception_map", boom)
        code = main(
            ["perception", "--height", "7", "--width", "7", "--kernel", "3",
             "--out", str(tmp_path / "p")]
        )
        assert code == 7
        assert "wires crossed" in capsys.readouterr().err
