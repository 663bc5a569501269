import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from _workspace import build_workspace, run
from trajlearn import cli
from trajlearn.classify import ScoreMatrix, read_scores_csv, write_scores_csv
from trajlearn.config import desk_scale_config, dump_config
from trajlearn.container import load_model
from trajlearn.convisa import TwoStreamModel, apply_stacked
from trajlearn.errors import DataError, GeometryError, NumericError
from trajlearn.pipeline import (DatasetManifest, ManifestEntry, VideoFeatures, extract_single_rate, extract_video,
                                load_manifest, synthetic_motion)
from trajlearn.video_io import Translate, load_video, read_pgm, synth_video

# -- features and manifests ----------------------------------------------------

@pytest.fixture(scope="module")
def small_cfg():
    cfg = desk_scale_config(0)
    return replace(cfg, video=replace(cfg.video, num_scales=1))


def test_video_features_round_trip(small_cfg):
    video = synth_video(Translate(1.0, 0.0), (64, 64, 24), 2)
    feats, report = extract_video(video, small_cfg)
    assert report["used"] == [0] and len(feats) > 0
    assert feats.pixel_volumes.shape == (len(feats), 15, 32, 32)
    assert feats.flow_volumes.shape == (len(feats), 15, 32, 32, 2)
    assert {k: v.shape[1] for k, v in feats.descriptors.values.items()} == {
        "traj_shape": 28, "hog": 96, "hof": 108, "mbh": 192}
    loc = feats.descriptors.locations
    assert loc.min() >= 0 and loc.max() <= 1
    tensors, meta = feats.to_tensors("clip")
    assert meta["kind"] == "video_features" and meta["id"] == "clip" and meta["count"] == len(feats)
    from trajlearn.container import dumps, loads
    back = VideoFeatures.from_tensors(loads(dumps(tensors, meta)))
    assert len(back) == len(feats)
    np.testing.assert_allclose(back.descriptors.values["hog"], feats.descriptors.values["hog"], atol=1e-6)


def test_stabilization_switch_reaches_extraction(small_cfg):
    video = synth_video(Translate(1.0, 0.0), (64, 64, 20), 5)
    plain = extract_single_rate(video, small_cfg)
    stab = extract_single_rate(video, replace(small_cfg, stabilize=replace(small_cfg.stabilize, enabled=True)))
    # a global translation is pure camera motion: rectified flow is near zero, so every track is static
    assert len(plain) > 0 and len(stab) < len(plain)


def test_manifest_validation(tmp_path):
    e = lambda i, split="train", labels=("a",): ManifestEntry(i, tmp_path / i, list(labels), split)
    DatasetManifest(["a", "b"], [e("x"), e("y", "test")])
    with pytest.raises(DataError, match="unique"):
        DatasetManifest(["a"], [e("x"), e("x", "test")])
    with pytest.raises(DataError, match="empty test split"):
        DatasetManifest(["a"], [e("x")])
    with pytest.raises(DataError, match="split must be"):
        DatasetManifest(["a"], [e("x"), e("y", "val")])
    with pytest.raises(DataError, match="class list"):
        DatasetManifest(["a"], [e("x"), e("y", "test", ("z",))])
    with pytest.raises(DataError):
        DatasetManifest([], [])


def test_manifest_json_paths(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"classes": ["a", "b"], "videos": [
        {"path": "vids/one.rgv", "labels": ["a"], "split": "train"},
        {"id": "two", "path": "vids/2.rgv", "labels": ["a", "b"], "split": "test"}]}))
    m = load_manifest(tmp_path / "m.json")
    assert [x.id for x in m.entries] == ["one", "two"]
    assert m.entries[0].path == tmp_path / "vids/one.rgv"
    assert m.truth_matrix(m.entries).tolist() == [[True, False], [True, True]]
    assert json.loads(m.to_json(tmp_path))["videos"][0]["path"] == "vids/one.rgv"
    (tmp_path / "bad.json").write_text('{"classes": ["a"]}')
    with pytest.raises(DataError):
        load_manifest(tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.json")


def test_synthetic_classes_differ():
    rng = np.random.default_rng(0)
    kinds = [type(synthetic_motion(c, rng)).__name__ for c in range(6)]
    assert kinds == ["Translate", "Translate", "Oscillate", "Oscillate", "Translate", "Translate"]


# -- CLI -----------------------------------------------------------------------

def test_eval_perfect_predictions(tmp_path, capsys):
    sm = ScoreMatrix(np.array([[2.0, 0.1], [0.3, 1.0], [1.5, -1.0]]), ["a", "b"], ["x", "y", "z"])
    write_scores_csv(sm, tmp_path / "s.csv")
    (tmp_path / "t.csv").write_text("instance_id,label\nx,a\ny,b\nz,a\n")
    assert run("eval", "--scores", tmp_path / "s.csv", "--truth", tmp_path / "t.csv") == 0
    out = capsys.readouterr().out.split()
    assert out == ["MAcc=1.0", "MAP=1.0"]


def test_exit_codes(tmp_path, monkeypatch, capsys):
    with pytest.raises(SystemExit) as exc:
        run("eval")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    assert run("eval", "--scores", tmp_path / "missing.csv", "--truth", tmp_path / "t.csv") == 2
    (tmp_path / "s.csv").write_text("instance_id,a,b\nx,1,nan\n")
    assert run("mir", "--scores", tmp_path / "s.csv", "--out", tmp_path / "o.csv") == 2
    (tmp_path / "s.csv").write_text("instance_id,a,b\nx,1,0\n")
    assert run("eval", "--scores", tmp_path / "s.csv") == 1
    assert run("synth-video", "--motion", "static", "--size", "64by64", "--out", tmp_path / "v.rgv") == 1
    (tmp_path / "c.toml").write_text("[convisa]\nstride = [12, 5]\n")
    assert run("init-config", "--config", tmp_path / "c.toml") == 0  # init-config ignores --config
    assert run("train-convisa", "--config", tmp_path / "c.toml", "--manifest", tmp_path / "m.json",
               "--features", tmp_path, "--out", tmp_path / "m.tcn") == 2
    assert "(volume_s - rf_s) % stride_s" in capsys.readouterr().err

    def diverge(*a, **k):
        raise NumericError("ISA loss became non-finite")
    monkeypatch.setattr(cli, "mir_rerank", diverge)
    assert run("mir", "--scores", tmp_path / "s.csv", "--out", tmp_path / "o.csv") == 3


def test_mir_subcommand(tmp_path):
    sm = ScoreMatrix(np.array([[1.0, 0.5], [0.2, 0.8], [0.4, 0.3]]), ["a", "b"], ["x", "y", "z"])
    write_scores_csv(sm, tmp_path / "s.csv")
    assert run("mir", "--scores", tmp_path / "s.csv", "--out", tmp_path / "r.csv", "--iters", 2, "--no-fuse") == 0
    e = np.exp(-1)
    np.testing.assert_allclose(read_scores_csv(tmp_path / "r.csv").scores[0], [1 - 0.5 * e, 0.5 - e], atol=1e-12)
    assert run("mir", "--scores", tmp_path / "s.csv", "--out", tmp_path / "f.csv") == 0
    assert read_scores_csv(tmp_path / "f.csv").instance_ids == ["x", "y", "z"]


def test_init_config_and_synth_video(tmp_path, capsys):
    assert run("init-config", "--desk", "--out", tmp_path / "d.toml") == 0
    assert (tmp_path / "d.toml").read_text() == dump_config(desk_scale_config())
    assert run("synth-video", "--motion", "translate(1,0)", "--size", "48x40x16", "--out", tmp_path / "v.rgv") == 0
    v = load_video(tmp_path / "v.rgv")
    assert (v.width, v.height, v.frames) == (48, 40, 16)
    assert run("synth-video", "--motion", "oscillate(y,8)", "--format", "pgm", "--out", tmp_path / "frames") == 0
    assert load_video(tmp_path / "frames").frames == 32


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return build_workspace(tmp_path_factory.mktemp("ws"))


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_end_to_end_artifacts(workspace, capsys):
    tf = load_model(workspace / "feats" / "c0_0.tcn")
    assert tf.meta["kind"] == "video_features" and "desc.lop" in tf.tensors and "desc.lof" in tf.tensors
    assert tf.meta["mifs"] == {"used": [0], "skipped": []}
    reps = load_model(workspace / "reps.tcn")
    dims = {"traj_shape": 14, "hog": 48, "hof": 54, "mbh": 96, "lop": 8, "lof": 8}
    assert reps["X"].shape == (10, sum(2 * d * 2 for d in dims.values()))
    rows = json.loads((workspace / "reps.tcn.json").read_text())
    assert rows["c0_0"] == 0 and len(rows) == 10
    scores = read_scores_csv(workspace / "s.csv")
    assert scores.instance_ids == ["c0_3", "c0_4", "c1_3", "c1_4"] and scores.class_names == ["slide", "bob"]
    capsys.readouterr()
    assert run("eval", "--scores", workspace / "s.csv", "--manifest", workspace / "m.json") == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(out["MAcc"]) == 1.0 and float(out["MAP"]) == 1.0


def test_training_subcommands_are_deterministic(workspace, tmp_path):
    cfg = ["--config", workspace / "tiny.toml"]
    m = ["--manifest", workspace / "m.json"]
    assert run("train-convisa", *m, *cfg, "--seed", 7, "--features", workspace / "feats",
               "--out", tmp_path / "cv.tcn") == 0
    assert _digest(tmp_path / "cv.tcn") == _digest(workspace / "cv.tcn")
    assert run("train-encoder", *m, *cfg, "--features", workspace / "feats", "--out", tmp_path / "enc.tcn") == 0
    assert _digest(tmp_path / "enc.tcn") == _digest(workspace / "enc.tcn")
    assert run("train-svm", *m, *cfg, "--reps", workspace / "reps.tcn", "--out", tmp_path / "svm.tcn") == 0
    assert _digest(tmp_path / "svm.tcn") == _digest(workspace / "svm.tcn")
    assert run("extract", *m, *cfg, "--out", tmp_path / "feats") == 0
    fresh = load_model(tmp_path / "feats" / "c1_2.tcn")
    assert fresh["tracks"].tobytes() == load_model(workspace / "feats" / "c1_2.tcn")["tracks"].tobytes()


def test_missing_model_and_cross_stream(workspace, tmp_path):
    assert run("describe", "--manifest", workspace / "m.json", "--features", workspace / "feats",
               "--model", tmp_path / "absent.tcn") == 2
    model = TwoStreamModel.from_tensors(load_model(workspace / "cv.tcn"))
    feats = VideoFeatures.from_tensors(load_model(workspace / "feats" / "c0_0.tcn"))
    with pytest.raises(GeometryError):
        apply_stacked(model.pixel_model, feats.flow_volumes[:2])
    with pytest.raises(GeometryError):
        apply_stacked(model.flow_model, feats.pixel_volumes[:2])
    assert run("encode", "--manifest", workspace / "m.json", "--features", workspace / "feats",
               "--encoder", workspace / "cv.tcn", "--out", tmp_path / "r.tcn") == 2


def test_export_filters(workspace, tmp_path):
    assert run("export-filters", "--model", workspace / "cv.tcn", "--out", tmp_path, "--count", 4) == 0
    pix = read_pgm(tmp_path / "pixel_filters.pgm")
    flo = read_pgm(tmp_path / "flow_filters.pgm")
    assert pix.ndim == flo.ndim == 2 and pix.max() > pix.min()
