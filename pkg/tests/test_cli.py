import csv
import hashlib
import re
import subprocess
import sys

import numpy as np
import pytest

from topostain.cli import main
from topostain.config import SCHEMA, ConfigError, resolve
from topostain.gan.train import FeatureExtractor
from topostain.graph import build_adjacency
from topostain.matching import node_importance
from topostain.metrics import kid, read_tagf, write_tagf
from topostain.metrics.report import HEADER
from topostain.synth import load_png

TOY = ["--gen-channels", "4", "--disc-channels", "4", "--proj-dim", "8", "--num-patches", "16"]


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir()) if p.is_file()}


def read_metrics(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], {r[0]: float(r[1]) for r in rows[1:]}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--count", "4", "--size", "16", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def aligned(tmp_path_factory):
    d = tmp_path_factory.mktemp("aligned")
    args = ["synth", "--out", str(d), "--count", "12", "--size", "64", "--max-shift", "0", "--max-rotation", "0"]
    assert main(args) == 0
    return d


class TestSynth:
    def test_layout(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--count", "4", "--size", "64", "--seed", "1"]) == 0
        assert capsys.readouterr().out.strip() == str(tmp_path / "manifest.csv")
        assert len(list(tmp_path.glob("*.png"))) == 12
        assert (tmp_path / "manifest.csv").exists()

    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--count", "3", "--size", "32", "--seed", "2"]) == 0
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_empty(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--count", "0"]) == 0
        assert (tmp_path / "manifest.csv").read_text() == "index,tx,ty,rot_deg,positive_fraction\n"

    def test_unwritable(self, tmp_path):
        (tmp_path / "f").write_text("")
        assert main(["synth", "--out", str(tmp_path / "f" / "x"), "--count", "1"]) == 2


class TestTrain:
    def test_reproducible_with_config_file(self, tmp_path, dataset):
        cfg = tmp_path / "base.cfg"
        cfg.write_text("# toy network\ngen_channels = 4\ndisc_channels = 4\nproj_dim = 8\nnum_patches = 16\n")
        for name in ("a", "b"):
            argv = ["train", "--config", str(cfg), "--epochs", "1", "--seed", "7", "--data", str(dataset), "--out", str(tmp_path / name)]
            assert main(argv) == 0
        assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_ablate_tacm_zeroes_struc(self, tmp_path, dataset):
        assert main(["train", "--epochs", "1", *TOY, "--ablate", "tacm", "--data", str(dataset), "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "losses.csv")))
        assert len(rows) == 4
        assert all(float(r["struc"]) == 0.0 and float(r["cm"]) > 0 for r in rows)

    def test_ablate_all(self, tmp_path, dataset):
        assert main(["train", "--epochs", "1", *TOY, "--ablate", "all", "--data", str(dataset), "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "losses.csv")))
        assert all(float(r["struc"]) == 0.0 and float(r["cm"]) == 0.0 for r in rows)

    def test_default_config_echo(self, tmp_path, dataset, capsys):
        assert main(["train", "--epochs", "1", *TOY, "--data", str(dataset), "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        for line in ("lambda1 = 0.1", "lambda2 = 1.0", "mask_ratio = 0.15", "hops = 4", "thresholds = 0.5,0.5,0.1,0.1,0.1", "tau = 0.07"):
            assert line in out
        assert re.search(r"^epochs = 1 +# flag$", out, re.M)
        assert re.search(r"^lambda1 = 0.1 +# default$", out, re.M)
        saved = (tmp_path / "config.cfg").read_text()
        assert "lambda1 = 0.1" in saved and "#" not in saved

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--epochs", "1", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2

    def test_divergence_exit_code(self, tmp_path, dataset, capsys):
        # a huge learning rate overflows the toy network within a couple of steps
        argv = ["train", "--epochs", "3", *TOY, "--lr", "1e300", "--data", str(dataset), "--out", str(tmp_path)]
        assert main(argv) == 3
        assert "snapshot" in capsys.readouterr().err
        assert (tmp_path / "diverged.tagw").exists()

    def test_translate(self, tmp_path, dataset):
        assert main(["train", "--epochs", "1", *TOY, "--data", str(dataset), "--out", str(tmp_path / "run")]) == 0
        ck = tmp_path / "run" / "ckpt_epoch001.tagw"
        assert main(["translate", *TOY, "--checkpoint", str(ck), "--data", str(dataset), "--out", str(tmp_path / "fake")]) == 0
        fakes = sorted((tmp_path / "fake").glob("fake_*.png"))
        assert len(fakes) == 4 and load_png(fakes[0]).shape == (16, 16, 3)


class TestEval:
    def test_identical_dirs(self, tmp_path, aligned):
        out = tmp_path / "m.csv"
        assert main(["eval", "--generated", str(aligned), "--reference", str(aligned), "--gen-glob", "ihc_*.png",
                     "--ref-glob", "ihc_*.png", "--out", str(out)]) == 0
        header, m = read_metrics(out)
        assert header == HEADER == ["metric", "value", "n_samples", "config_hash"]
        assert m["ssim_mean"] == 1.0 and m["ssim_sd"] == 0.0
        assert m["psnr_mean"] == float("inf")
        assert m["frechet_proxy"] < 1e-6
        feats = FeatureExtractor()([load_png(p) for p in sorted(aligned.glob("ihc_*.png"))])
        assert m["kid_x1e3"] == pytest.approx(1e3 * kid(feats, feats), rel=1e-12)

    def test_duplicated_feature_files_give_zero_kid(self, tmp_path, aligned):
        f = np.tile(np.random.default_rng(0).normal(size=(1, 4)), (12, 1))
        write_tagf(tmp_path / "f.tagf", f)
        out = tmp_path / "m.csv"
        argv = ["eval", "--generated", str(aligned), "--reference", str(aligned), "--gen-glob", "ihc_*.png",
                "--ref-glob", "ihc_*.png", "--gen-features", str(tmp_path / "f.tagf"), "--ref-features",
                str(tmp_path / "f.tagf"), "--out", str(out)]
        assert main(argv) == 0
        assert read_metrics(out)[1]["kid_x1e3"] == 0.0

    def test_pathology_on_aligned_set(self, tmp_path, aligned):
        out = tmp_path / "m.csv"
        argv = ["eval", "--generated", str(aligned), "--reference", str(aligned), "--gen-glob", "ihc_*.png",
                "--ref-glob", "ihc_*.png", "--pathology", "--masks", str(aligned), "--out", str(out)]
        assert main(argv) == 0
        _, m = read_metrics(out)
        assert m["icc"] == pytest.approx(1.0, abs=1e-9)
        assert m["slope"] == pytest.approx(1.0, abs=1e-9) and m["intercept"] == pytest.approx(0.0, abs=1e-9)
        gen = [m[f"ratio_generated_{i:05d}"] for i in range(12)]
        ref = [m[f"ratio_reference_{i:05d}"] for i in range(12)]
        assert np.allclose(gen, ref, atol=0.02)

    def test_count_mismatch(self, tmp_path, aligned):
        assert main(["eval", "--generated", str(aligned), "--reference", str(aligned), "--gen-glob", "ihc_0000[0-3].png",
                     "--ref-glob", "ihc_*.png", "--out", str(tmp_path / "m.csv")]) == 4

    def test_constant_ratios_are_a_precondition_failure(self, tmp_path, aligned):
        args = ["eval", "--generated", str(aligned), "--reference", str(aligned), "--gen-glob", "he_*.png",
                "--ref-glob", "he_*.png", "--pathology", "--dab-threshold", "5", "--out", str(tmp_path / "m.csv")]
        assert main(args) == 4

    def test_missing_dir(self, tmp_path, aligned):
        assert main(["eval", "--generated", str(tmp_path / "nope"), "--reference", str(aligned), "--out", str(tmp_path / "m")]) == 2

    def test_eval_deterministic(self, tmp_path, aligned):
        for name in ("a.csv", "b.csv"):
            assert main(["eval", "--generated", str(aligned), "--reference", str(aligned), "--gen-glob", "he_*.png",
                         "--ref-glob", "ihc_*.png", "--pathology", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestGradcheck:
    def test_default_run(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        for name in ("awa", "pert", "struc", "cm", "adv", "patchnce", "total", "conv2d", "matmul"):
            assert name in out

    def test_only_cm(self, capsys):
        assert main(["gradcheck", "--only", "cm"]) == 0
        rows = [l for l in capsys.readouterr().out.splitlines() if l.split() and l.split()[0] == "cm"]
        assert len(rows) == 1

    def test_seeded_reproducible(self, capsys):
        main(["gradcheck", "--only", "awa,adv", "--seed", "3"])
        a = capsys.readouterr().out
        main(["gradcheck", "--only", "awa,adv", "--seed", "3"])
        b = capsys.readouterr().out

        def strip_time(text):
            return [l.rsplit(None, 1)[0] for l in text.splitlines() if l.strip()]

        assert strip_time(a) == strip_time(b)

    def test_unknown_check(self):
        assert main(["gradcheck", "--only", "nonsense"]) == 2

    def test_failure_exit_code(self, monkeypatch):
        import topostain.gradcheck as G

        monkeypatch.setitem(G.CHECKS, "broken", lambda c: 1.0)
        assert main(["gradcheck", "--only", "broken"]) == 5


class TestGraph:
    def setup_method(self):
        self.f = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

    def test_inspect(self, tmp_path, capsys):
        write_tagf(tmp_path / "f.tagf", self.f)
        assert main(["graph", "inspect", "--features", str(tmp_path / "f.tagf"), "--graph-threshold", "0.5"]) == 0
        assert capsys.readouterr().out == "110\n111\n011\ndegree,count\n2,2\n3,1\n"

    def test_importance(self, tmp_path):
        f = np.random.default_rng(1).normal(size=(10, 4))
        write_tagf(tmp_path / "f.tagf", f)
        assert main(["graph", "importance", "--features", str(tmp_path / "f.tagf"), "--out", str(tmp_path / "p.csv")]) == 0
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows[0] == ["node", "score"]
        got = np.array([float(r[1]) for r in rows[1:]])
        assert np.array_equal(got, node_importance(read_tagf(tmp_path / "f.tagf"), 0.5).p)
        assert abs(got.sum() - 1) < 1e-10

    def test_bad_features_file(self, tmp_path):
        (tmp_path / "f.tagf").write_bytes(b"junk")
        assert main(["graph", "inspect", "--features", str(tmp_path / "f.tagf")]) == 2


class TestConfig:
    def test_unknown_key_in_file(self, tmp_path, dataset):
        (tmp_path / "c.cfg").write_text("bogus = 1\n")
        assert main(["train", "--config", str(tmp_path / "c.cfg"), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2

    def test_seed_env_precedence(self, tmp_path):
        (tmp_path / "c.cfg").write_text("seed = 3\n")
        assert resolve(tmp_path / "c.cfg", {}, {})["seed"] == 3
        assert resolve(tmp_path / "c.cfg", {}, {"TOPOSTAIN_SEED": "5"})["seed"] == 5
        cfg = resolve(tmp_path / "c.cfg", {"seed": "7"}, {"TOPOSTAIN_SEED": "5"})
        assert cfg["seed"] == 7 and cfg.provenance["seed"] == "flag"

    def test_env_seed_reaches_synth(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TOPOSTAIN_SEED", "9")
        main(["synth", "--out", str(tmp_path / "env"), "--count", "2", "--size", "16"])
        monkeypatch.delenv("TOPOSTAIN_SEED")
        main(["synth", "--out", str(tmp_path / "flag"), "--count", "2", "--size", "16", "--seed", "9"])
        assert digest(tmp_path / "env") == digest(tmp_path / "flag")

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            resolve(None, {"epochs": "many"}, {})
        with pytest.raises(ConfigError):
            resolve(None, {"thresholds": "0.5,x"}, {})

    def test_invalid_value_exit_code(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--positive-fraction", "2"]) == 2

    def test_help_lists_every_key(self):
        out = subprocess.run([sys.executable, "-m", "topostain.cli", "--help"], capture_output=True, text=True, check=True).stdout
        for name in SCHEMA:
            assert name in out
        assert "lambda1" in out and "0.1" in out and "0.5,0.5,0.1,0.1,0.1" in out

    def test_console_script(self):
        out = subprocess.run(["topostain", "synth", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "--count" in out.stdout


def test_graph_reads_thresholded_adjacency(tmp_path, capsys):
    f = np.random.default_rng(2).normal(size=(6, 3))
    write_tagf(tmp_path / "f.tagf", f)
    main(["graph", "inspect", "--features", str(tmp_path / "f.tagf"), "--graph-threshold", "0.2"])
    grid = capsys.readouterr().out.split("degree")[0].split()
    ref = build_adjacency(read_tagf(tmp_path / "f.tagf"), 0.2).adjacency
    assert grid == ["".join(str(int(v)) for v in row) for row in ref]
