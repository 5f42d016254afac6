import json

import numpy as np
import pytest

from rigfit.cli import main
from rigfit.meshio import load_mesh
from rigfit.rigio import load_rig
from rigfit.losses import Camera

FAST = ["--set", "pose_iters=40", "--set", "z_iters=20", "--set", "expr_iters=20", "--set", "identity_cycles=1",
        "--set", "outer_cycles=1", "--set", "root_warmup_iters=20"]
STAGE1 = ["--set", "stage1_pose_iters=40", "--set", "stage1_weight_iters=40", "--set", "stage1_cycles=1",
          "--set", "weight_fit_max_iters=60", "--set", "weight_lr=1e-3"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert run("make-toy", "--out", d / "rig", "--joints", 5, "--expressions", 2, "--scans", 3,
               "--cloud-points", 400, "--pose-scale", 0.3, "--modes", 2) == 0
    return d


@pytest.fixture(scope="module")
def corpus(toy):
    out = toy / "corpus"
    assert run("synth", "--rig", toy / "rig", "--scans", toy / "rig" / "scans", "--out", out,
               "--snapshots", 4, "--cycles", 2, "--perturb", 3, "--split", 0.8, 0.1, 0.1, *STAGE1) == 0
    return out


class TestMakeToy:
    def test_loadable(self, toy):
        rig = load_rig(toy / "rig")
        assert rig.skeleton.K == 5 and rig.n_expressions == 2
        assert len(list((toy / "rig" / "scans").glob("*.obj"))) == 3
        assert len(json.loads((toy / "rig" / "scans" / "truth.json").read_text())) == 3

    def test_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("make-toy", "--out", tmp_path / name, "--seed", 7, "--scans", 1) == 0
        for f in ("rig.json", "mesh.obj", "weights.json", "expressions.json", "scans/scan_000.obj"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_zero_joints(self, tmp_path, capsys):
        assert run("make-toy", "--out", tmp_path, "--joints", 0) == 2
        line = capsys.readouterr().err.strip().splitlines()[-1]
        rec = json.loads(line)
        assert rec["level"] == "error" and rec["exit"] == 2

    def test_bad_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("make-toy", "--joints", "many")
        assert exc.value.code == 2


class TestTrainLinear:
    def test_writes_weights_and_log(self, toy, tmp_path, capsys):
        assert run("train-linear", "--rig", toy / "rig", "--scans", toy / "rig" / "scans", "--out", tmp_path,
                   *STAGE1) == 0
        log = [json.loads(line) for line in (tmp_path / "loss_log.jsonl").read_text().splitlines()]
        # the log ends with the 40-step global weight fit, which must make progress
        assert log[-1]["loss"] < log[-40]["loss"]
        assert (tmp_path / "weights.json").exists()
        events = [json.loads(line)["event"] for line in capsys.readouterr().err.splitlines()]
        assert "stage 1 done" in events

    def test_missing_rig(self, tmp_path):
        assert run("train-linear", "--rig", tmp_path / "nope", "--scans", tmp_path, "--out", tmp_path) == 2

    def test_config_file_and_override(self, toy, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"stage1_pose_iters": 5, "stage1_weight_iters": 5, "stage1_cycles": 1}))
        assert run("train-linear", "--rig", toy / "rig", "--scans", toy / "rig" / "scans", "--out", tmp_path,
                   "--config", cfg, "--set", "stage1_weight_iters=0") == 0
        assert len((tmp_path / "loss_log.jsonl").read_text().splitlines()) == 15

    def test_unknown_config_key(self, toy, tmp_path):
        assert run("train-linear", "--rig", toy / "rig", "--scans", toy / "rig" / "scans", "--out", tmp_path,
                   "--set", "bogus=1") == 2


class TestSynth:
    def test_manifest(self, corpus):
        m = json.loads((corpus / "manifest.json").read_text())
        assert m["n_poses"] == 96
        assert m["spec"]["split"] == [0.8, 0.1, 0.1]

    def test_same_seed_same_hash(self, toy, corpus, tmp_path):
        assert run("synth", "--rig", toy / "rig", "--scans", toy / "rig" / "scans", "--out", tmp_path,
                   "--snapshots", 4, "--cycles", 2, "--perturb", 3, "--split", 0.8, 0.1, 0.1, *STAGE1) == 0
        assert (tmp_path / "manifest.json").read_bytes() == (corpus / "manifest.json").read_bytes()
        assert (tmp_path / "samples.bin").read_bytes() == (corpus / "samples.bin").read_bytes()

    def test_bad_split(self, toy, tmp_path):
        assert run("synth", "--rig", toy / "rig", "--scans", toy / "rig" / "scans", "--out", tmp_path,
                   "--split", 0.5, 0.1, 0.1) == 2


class TestTrainNeural:
    def test_train_and_skip_gan(self, corpus, tmp_path):
        assert run("train-neural", "--corpus", corpus, "--out", tmp_path / "a", "--ae-steps", 200,
                   "--gan-steps", 10, "--batch-size", 16, "--latent", 4, "--width", 2) == 0
        s = json.loads((tmp_path / "a" / "train_summary.json").read_text())
        assert s["recon_l1_after"] < s["recon_l1_before"]
        assert (tmp_path / "a" / "decoder.bin").exists()
        assert run("train-neural", "--corpus", corpus, "--out", tmp_path / "b", "--ae-steps", 5, "--latent", 4,
                   "--width", 2, "--skip-gan") == 0
        recs = [json.loads(x) for x in (tmp_path / "b" / "train_log.jsonl").read_text().splitlines()]
        assert {r["phase"] for r in recs} == {"autoencoder"}

    def test_corrupt_corpus(self, corpus, tmp_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        for f in corpus.iterdir():
            (bad / f.name).write_bytes(f.read_bytes())
        (bad / "samples.bin").write_bytes(b"garbage")
        assert run("train-neural", "--corpus", bad, "--out", tmp_path / "o", "--ae-steps", 1) == 2

    def test_paper_scale_mismatch(self, corpus, tmp_path):
        assert run("train-neural", "--corpus", corpus, "--out", tmp_path, "--paper-scale", "--ae-steps", 1) == 2


@pytest.fixture(scope="module")
def decoder(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("dec")
    assert run("train-neural", "--corpus", corpus, "--out", d, "--ae-steps", 20, "--gan-steps", 2,
               "--batch-size", 16, "--latent", 4, "--width", 2) == 0
    return d / "decoder.bin"


class TestFitEvalRetarget:

    def test_cloud_fit(self, toy, decoder, tmp_path):
        assert run("fit", "--rig", toy / "rig", "--decoder", decoder, "--target",
                   toy / "rig" / "scans" / "scan_000.xyz", "--out", tmp_path, *FAST) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["mean"] < 0.05
        assert load_mesh(tmp_path / "fitted.obj").n_vertices == load_rig(toy / "rig").mesh.n_vertices

    def test_mesh_round_trip(self, toy, tmp_path):
        assert run("fit", "--rig", toy / "rig", "--mode", "mesh", "--target", toy / "rig" / "scans" / "scan_001.obj",
                   "--out", tmp_path, "--set", "pose_iters=300", "--set", "pose_lr=3e-3", "--set", "rmse_inside=true",
                   *FAST[6:]) == 0
        diag = load_rig(toy / "rig").mesh.bbox_diagonal()
        assert json.loads((tmp_path / "report.json").read_text())["mean"] < 0.02 * diag

    def test_landmarks(self, toy, tmp_path):
        rig = load_rig(toy / "rig")
        cam = Camera(fx=600.0, fy=600.0, cx=256.0, cy=256.0, translation=[0.0, 0.0, 4.0])
        idx = list(range(0, rig.mesh.n_vertices, 8))
        scan = load_mesh(toy / "rig" / "scans" / "scan_002.obj")
        (tmp_path / "lm.json").write_text(json.dumps({"vertices": idx,
                                                      "pixels": cam.project(scan.vertices[idx]).tolist()}))
        (tmp_path / "cam.json").write_text(json.dumps(cam.as_dict()))
        assert run("fit", "--rig", toy / "rig", "--mode", "landmarks", "--target", tmp_path / "lm.json",
                   "--camera", tmp_path / "cam.json", "--out", tmp_path / "o", *FAST) == 0
        fit = json.loads((tmp_path / "o" / "fit.json").read_text())
        assert fit["curves"]["reprojection_px"][0] < 50.0
        assert run("fit", "--rig", toy / "rig", "--mode", "landmarks", "--target", tmp_path / "lm.json",
                   "--out", tmp_path / "o") == 2

    def test_eval_self_is_zero(self, toy, tmp_path, capsys):
        scan = toy / "rig" / "scans" / "scan_000.obj"
        assert run("eval", "--mesh", scan, "--reference", scan) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["mean"] == 0.0 and report["max"] == 0.0
        assert run("eval", "--mesh", scan, "--reference", toy / "rig" / "scans" / "scan_000.xyz", "--out", tmp_path) == 0
        assert json.loads((tmp_path / "report.json").read_text())["max"] < 1e-9

    def test_retarget_same_identity(self, toy, tmp_path):
        fit_dir = tmp_path / "fit"
        assert run("fit", "--rig", toy / "rig", "--mode", "mesh", "--target", toy / "rig" / "scans" / "scan_000.obj",
                   "--out", fit_dir, *FAST) == 0
        assert run("retarget", "--source-rig", toy / "rig", "--source-fit", fit_dir / "fit.json", "--rig",
                   toy / "rig", "--target-fit", fit_dir / "fit.json", "--out", tmp_path / "rt") == 0
        a = load_mesh(tmp_path / "rt" / "retargeted.obj").vertices
        b = load_mesh(fit_dir / "fitted.obj").vertices
        assert np.abs(a - b).max() < 1e-9

    def test_retarget_schema_mismatch(self, toy, tmp_path):
        other = tmp_path / "other"
        assert run("make-toy", "--out", other, "--joints", 6) == 0
        fit_dir = tmp_path / "fit"
        assert run("fit", "--rig", toy / "rig", "--mode", "mesh", "--target", toy / "rig" / "scans" / "scan_000.obj",
                   "--out", fit_dir, *FAST) == 0
        assert run("retarget", "--source-rig", toy / "rig", "--source-fit", fit_dir / "fit.json", "--rig", other,
                   "--out", tmp_path / "rt") == 2

    def test_unknown_joint(self, toy, tmp_path):
        fit_dir = tmp_path / "fit"
        assert run("fit", "--rig", toy / "rig", "--mode", "mesh", "--target", toy / "rig" / "scans" / "scan_000.obj",
                   "--out", fit_dir, *FAST) == 0
        assert run("retarget", "--source-rig", toy / "rig", "--source-fit", fit_dir / "fit.json", "--rig",
                   toy / "rig", "--joints", "elbow", "--out", tmp_path / "rt") == 2


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("RIGFIT_THREADS", "1")
    assert run("make-toy", "--out", tmp_path) == 0


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    import rigfit.cli as cli
    rig_dir = tmp_path / "rig"
    assert run("make-toy", "--out", rig_dir, "--joints", 3, "--scans", 1) == 0

    def boom(*a, **k):
        raise FloatingPointError("nan")

    monkeypatch.setattr(cli, "fit_stage1_linear", boom)
    assert run("train-linear", "--rig", rig_dir, "--scans", rig_dir / "scans", "--out", tmp_path / "o") == 3
