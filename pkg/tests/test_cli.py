import json
import os
import subprocess
import sys

import numpy as np
import pytest

CLI = [sys.executable, "-m", "dcattn.cli"]


def run_cli(*args, env_extra=None, cwd=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(CLI + list(args), capture_output=True, text=True,
                          env=env, cwd=cwd)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "scenes.dcad"
    r = run_cli("gen-data", "--out", str(path), "--count", "12", "--seed", "3")
    assert r.returncode == 0, r.stderr
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("train")
    r = run_cli("train", "--data", str(dataset), "--out", str(out),
                "--epochs", "1", "--stages", "2", "--seed", "1")
    assert r.returncode == 0, r.stderr
    return out


class TestGenData:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.dcad", tmp_path / "b.dcad"
        for p in (a, b):
            r = run_cli("gen-data", "--out", str(p), "--count", "7", "--seed", "11")
            assert r.returncode == 0, r.stderr
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.dcad.manifest.json").exists()

    def test_zero_count_usage_error(self, tmp_path):
        r = run_cli("gen-data", "--out", str(tmp_path / "x.dcad"), "--count", "0")
        assert r.returncode == 2

    def test_bad_config_usage_error(self, tmp_path):
        r = run_cli("gen-data", "--out", str(tmp_path / "x.dcad"),
                    "--count", "1", "--height", "30")
        assert r.returncode == 2


class TestGradcheckCommand:
    def test_passing_op(self, tmp_path):
        r = run_cli("gradcheck", "--ops", "elementwise", "--seeds", "1",
                    "--out", str(tmp_path))
        assert r.returncode == 0, r.stderr
        assert (tmp_path / "report.csv").exists()
        assert (tmp_path / "manifest.json").exists()
        assert "PASS" in r.stdout

    def test_unknown_op_usage_error(self, tmp_path):
        r = run_cli("gradcheck", "--ops", "bogus", "--out", str(tmp_path))
        assert r.returncode == 2

    def test_zero_tolerance_fails(self, tmp_path):
        r = run_cli("gradcheck", "--ops", "elementwise", "--seeds", "1",
                    "--tol", "0", "--out", str(tmp_path))
        assert r.returncode == 1


class TestTrainCommand:
    def test_writes_artifacts(self, trained):
        assert (trained / "metrics.csv").exists()
        assert (trained / "checkpoint.dcap").exists()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["status"] == "ok"

    def test_missing_data_exit_2(self, tmp_path):
        r = run_cli("train", "--data", str(tmp_path / "nope.dcad"),
                    "--out", str(tmp_path / "o"))
        assert r.returncode == 2

    def test_zero_epochs_empty_history(self, tmp_path, dataset):
        out = tmp_path / "o"
        r = run_cli("train", "--data", str(dataset), "--out", str(out),
                    "--epochs", "0", "--stages", "2")
        assert r.returncode == 0, r.stderr
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1  # header only

    def test_determinism_across_runs_and_threads(self, tmp_path, dataset):
        outs = []
        for name, threads in (("t1", "1"), ("t4", "4"), ("t1b", "1")):
            out = tmp_path / name
            r = run_cli("train", "--data", str(dataset), "--out", str(out),
                        "--epochs", "2", "--stages", "2", "--seed", "9",
                        env_extra={"DCATTN_THREADS": threads})
            assert r.returncode == 0, r.stderr
            outs.append((out / "metrics.csv").read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_divergence_exit_1(self, tmp_path, dataset):
        out = tmp_path / "o"
        r = run_cli("train", "--data", str(dataset), "--out", str(out),
                    "--epochs", "1", "--stages", "2", "--lr", "1e6")
        assert r.returncode == 1
        assert "diverg" in r.stderr.lower() or "non-finite" in r.stderr.lower()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "fail"

    def test_config_file_precedence(self, tmp_path, dataset):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs=2\nlr=0.004\n")
        out = tmp_path / "o"
        r = run_cli("train", "--data", str(dataset), "--out", str(out),
                    "--config", str(cfg), "--epochs", "1", "--stages", "2")
        assert r.returncode == 0, r.stderr
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 1  # flag beats config file
        assert manifest["config"]["lr"] == 0.004  # config beats default


class TestAblateCommand:
    def test_single_seed_low_confidence(self, tmp_path, dataset):
        out = tmp_path / "abl"
        r = run_cli("ablate", "--data", str(dataset), "--out", str(out),
                    "--seeds", "1", "--epochs", "1", "--stages", "1")
        assert r.returncode == 0, r.stderr
        summary = (out / "summary.csv").read_text().strip().splitlines()
        assert summary[0] == "variant,median_pixel_acc,median_miou"
        assert len(summary) == 6  # five variants
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["low_confidence"] is True
        cells = list((out / "cells").glob("*.csv"))
        assert len(cells) == 5


class TestDumpAttention:
    def test_dump_layout(self, tmp_path, trained, dataset):
        out = tmp_path / "maps"
        r = run_cli("dump-attention", "--checkpoint", str(trained / "checkpoint.dcap"),
                    "--data", str(dataset), "--sample", "0", "--out", str(out))
        assert r.returncode == 0, r.stderr
        pgms = sorted(out.glob("*.pgm"))
        dcats = sorted(out.glob("*.dcat"))
        assert len(pgms) == 4  # 2 stages x 2 branches
        assert len(dcats) == 4
        head = pgms[0].read_bytes()[:2]
        assert head == b"P5"

    def test_sample_out_of_range_exit_2(self, tmp_path, trained, dataset):
        r = run_cli("dump-attention", "--checkpoint", str(trained / "checkpoint.dcap"),
                    "--data", str(dataset), "--sample", "999",
                    "--out", str(tmp_path / "x"))
        assert r.returncode == 2

    def test_baseline_maps_constant_gray(self, tmp_path, dataset):
        train_out = tmp_path / "btrain"
        r = run_cli("train", "--data", str(dataset), "--out", str(train_out),
                    "--epochs", "0", "--stages", "1", "--variant", "baseline")
        assert r.returncode == 0, r.stderr
        out = tmp_path / "bmaps"
        r = run_cli("dump-attention", "--checkpoint", str(train_out / "checkpoint.dcap"),
                    "--data", str(dataset), "--sample", "1", "--out", str(out))
        assert r.returncode == 0, r.stderr
        for pgm in out.glob("*.pgm"):
            payload = pgm.read_bytes().split(b"\n", 3)[3]
            assert set(payload) == {128}  # identity attention renders mid-gray

    def test_missing_checkpoint_exit_2(self, tmp_path, dataset):
        r = run_cli("dump-attention", "--checkpoint", str(tmp_path / "no.dcap"),
                    "--data", str(dataset), "--out", str(tmp_path / "x"))
        assert r.returncode == 2
