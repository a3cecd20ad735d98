"""End-to-end command-line runs: artifacts, exit codes, reproducibility."""

import csv
import os

import numpy as np
import pytest

from kpp.cli import _read_config_file, main
from kpp.trainer import METRICS_HEADER

FAST = ["--T", "2", "--K", "1", "--L", "8", "--epochs", "1",
        "--episodes-per-epoch", "2", "--batch", "1", "--warmup", "1"]


def run(argv):
    return main(argv)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def mask_wall(rows):
    i = rows[0].index("wall_seconds")
    out = [list(r) for r in rows]
    for r in out[1:]:
        r[i] = "masked"
    return out


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    rc = run(["train", "--data", "synth", *FAST, "--seed", "1", "--out", str(out)])
    assert rc == 0
    return out


class TestTrain:
    def test_artifacts_and_row_count(self, ckpt_dir):
        assert (ckpt_dir / "manifest.txt").exists()
        assert (ckpt_dir / "best.bin").exists()
        assert (ckpt_dir / "final.bin").exists()
        rows = read_csv(ckpt_dir / "metrics.csv")
        assert rows[0] == METRICS_HEADER
        assert len(rows) == 1 + 2 * 1  # header + (train, test) per epoch

    def test_manifest_contents(self, ckpt_dir):
        text = (ckpt_dir / "manifest.txt").read_text()
        assert text.startswith("command = kpp train")
        assert "seed = 1" in text
        assert "epochs = 1" in text
        assert f"out = {ckpt_dir}" in text

    def test_manifest_written_before_failure(self, tmp_path):
        out = tmp_path / "failing"
        rc = run(["train", "--data", str(tmp_path / "missing.idx"),
                  *FAST, "--out", str(out)])
        assert rc == 1
        assert (out / "manifest.txt").exists()
        assert not (out / "metrics.csv").exists()

    def test_divergence_exit_code(self, tmp_path):
        rc = run(["train", "--data", "synth", "--T", "2", "--K", "1", "--L", "8",
                  "--epochs", "10", "--episodes-per-epoch", "2", "--batch", "1",
                  "--warmup", "1", "--schedule", "constant", "--lr", "50.0",
                  "--out", str(tmp_path / "div")])
        assert rc == 2

    def test_unknown_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            run(["train", "--frobnicate", "3"])
        assert exc.value.code == 1

    def test_missing_subcommand_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            run([])
        assert exc.value.code == 1


class TestConfigFile:
    def test_file_values_used(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 2   # short run\nT = 2\nK = 1\nL = 8\n"
                       "episodes_per_epoch = 2\nbatch = 1\nwarmup = 1\n")
        out = tmp_path / "from_file"
        rc = run(["train", "--data", "synth", "--config", str(cfg),
                  "--out", str(out)])
        assert rc == 0
        assert len(read_csv(out / "metrics.csv")) == 1 + 2 * 2

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 5\nT = 2\nK = 1\nL = 8\n"
                       "episodes_per_epoch = 2\nbatch = 1\nwarmup = 1\n")
        out = tmp_path / "overridden"
        rc = run(["train", "--data", "synth", "--config", str(cfg),
                  "--epochs", "1", "--out", str(out)])
        assert rc == 0
        assert len(read_csv(out / "metrics.csv")) == 1 + 2 * 1

    def test_malformed_config_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs 5\n")
        rc = run(["train", "--data", "synth", "--config", str(cfg),
                  "--out", str(tmp_path / "x")])
        assert rc == 1

    def test_parser_helper(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment only\nlr = 5e-4\nname = hello # trailing\n")
        got = _read_config_file(cfg)
        assert got == {"lr": "5e-4", "name": "hello"}


class TestGenerate:
    def test_plain_generation_artifacts(self, ckpt_dir, tmp_path):
        out = tmp_path / "gen"
        rc = run(["generate", "--ckpt", str(ckpt_dir / "final.bin"),
                  "--data", "synth", "--T", "4", "--n", "3",
                  "--seed", "2", "--out", str(out)])
        assert rc == 0
        pgms = sorted(p.name for p in out.glob("gen_*.pgm"))
        assert pgms == ["gen_000.pgm", "gen_001.pgm", "gen_002.pgm", "gen_grid.pgm"]
        rows = read_csv(out / "keys.csv")
        assert rows[0] == ["image_id", "k", "s", "x", "y"]
        assert len(rows) == 1 + 3 * 1  # n images x K=1 keys

    def test_perturbed_generation_artifacts(self, ckpt_dir, tmp_path):
        out = tmp_path / "pgen"
        rc = run(["generate", "--ckpt", str(ckpt_dir / "final.bin"),
                  "--data", "synth", "--T", "4", "--n", "4",
                  "--perturb", "0.1", "--seed", "2", "--out", str(out)])
        assert rc == 0
        assert (out / "base.pgm").exists()
        assert len(list(out.glob("gen_*.pgm"))) == 5  # 4 + grid
        rows = read_csv(out / "keys.csv")
        assert [r[0] for r in rows[1:]] == ["base"]

    def test_missing_checkpoint(self, tmp_path):
        rc = run(["generate", "--ckpt", str(tmp_path / "nope.bin"),
                  "--out", str(tmp_path / "g")])
        assert rc == 1


class TestDenoise:
    def test_errors_csv_and_images(self, ckpt_dir, tmp_path):
        out = tmp_path / "dn"
        rc = run(["denoise", "--ckpt", str(ckpt_dir / "final.bin"),
                  "--data", "synth", "--T", "4", "--noise", "salt_pepper",
                  "--steps", "2", "--n", "2", "--seed", "3", "--out", str(out)])
        assert rc == 0
        rows = read_csv(out / "errors.csv")
        assert rows[0] == ["image_id", "step", "l2_error"]
        assert len(rows) == 1 + 2 * 3  # n images x (steps + noisy baseline)
        by_img = {}
        for img, step, err in rows[1:]:
            by_img.setdefault(img, []).append(int(step))
        assert by_img == {"0": [0, 1, 2], "1": [0, 1, 2]}
        for i in range(2):
            assert (out / f"img{i:03d}_clean.pgm").exists()
            assert (out / f"img{i:03d}_noisy.pgm").exists()
            assert (out / f"img{i:03d}_step01.pgm").exists()
            assert (out / f"img{i:03d}_step02.pgm").exists()

    def test_unknown_noise_kind(self, ckpt_dir, tmp_path):
        rc = run(["denoise", "--ckpt", str(ckpt_dir / "final.bin"),
                  "--noise", "blur", "--out", str(tmp_path / "d")])
        assert rc == 1


class TestAblate:
    def test_memory_axis_grid(self, tmp_path):
        out = tmp_path / "abl"
        rc = run(["ablate", "--data", "synth", "--axis", "memory",
                  "--values", "on,off", "--seeds", "1", *FAST,
                  "--out", str(out)])
        assert rc == 0
        rows = read_csv(out / "ablation.csv")
        assert rows[0] == ["axis", "value", "seed", "test_elbo", "test_kl"]
        assert [(r[0], r[1], r[2]) for r in rows[1:]] == [
            ("memory", "on", "1"), ("memory", "off", "1")]
        for r in rows[1:]:
            assert np.isfinite(float(r[3])) and np.isfinite(float(r[4]))

    def test_bad_axis_value(self, tmp_path):
        rc = run(["ablate", "--data", "synth", "--axis", "memory",
                  "--values", "maybe", "--seeds", "1", *FAST,
                  "--out", str(tmp_path / "a")])
        assert rc == 1

    def test_empty_seed_list(self, tmp_path):
        rc = run(["ablate", "--data", "synth", "--seeds", ",",
                  "--out", str(tmp_path / "a")])
        assert rc == 1


class TestEval:
    def test_prints_metrics(self, ckpt_dir, capsys):
        rc = run(["eval", "--ckpt", str(ckpt_dir / "final.bin"),
                  "--data", "synth", "--T", "4", "--seed", "5"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == ",".join(METRICS_HEADER)
        fields = lines[1].split(",")
        assert fields[1] == "test"
        assert np.isfinite(float(fields[2]))
        assert lines[2].startswith("negative elbo:") and "nats/image" in lines[2]

    def test_missing_checkpoint(self, tmp_path):
        rc = run(["eval", "--ckpt", str(tmp_path / "none.bin")])
        assert rc == 1


class TestReproducibility:
    def test_repeat_runs_byte_identical(self, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            rc = run(["train", "--data", "synth", *FAST, "--seed", "7",
                      "--out", str(out)])
            assert rc == 0
            outs.append(out)
        a, b = outs
        assert (a / "final.bin").read_bytes() == (b / "final.bin").read_bytes()
        assert (a / "best.bin").read_bytes() == (b / "best.bin").read_bytes()
        # metrics agree except the wall-clock column
        assert mask_wall(read_csv(a / "metrics.csv")) == \
            mask_wall(read_csv(b / "metrics.csv"))

    def test_generate_byte_identical(self, ckpt_dir, tmp_path):
        outs = []
        for name in ("g1", "g2"):
            out = tmp_path / name
            rc = run(["generate", "--ckpt", str(ckpt_dir / "final.bin"),
                      "--data", "synth", "--T", "4", "--n", "2",
                      "--seed", "9", "--out", str(out)])
            assert rc == 0
            outs.append(out)
        a, b = outs
        for p in sorted(a.glob("*.pgm")):
            assert p.read_bytes() == (b / p.name).read_bytes()
        assert (a / "keys.csv").read_bytes() == (b / "keys.csv").read_bytes()


def test_threads_env_applied(monkeypatch, tmp_path):
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    monkeypatch.setenv("KPP_THREADS", "1")
    rc = run(["eval", "--ckpt", str(tmp_path / "absent.bin")])
    assert rc == 1
    assert os.environ.get("OMP_NUM_THREADS") == "1"
