"""A tiny synthetic dataset driven through every CLI stage, shared by the CLI and acceptance tests."""
import json

from trajlearn import cli

TINY = """seed = 0
[video]
num_scales = 1
[convisa]
pca1_dim = 24
pca2_dim = 16
stack_top = 8
sample_count = 300
[convisa.isa]
epochs = 5
[encoding]
K = 2
gmm_samples = 2000
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def build_workspace(root):
    """Two classes, three train and two test videos each; returns ``root``."""
    (root / "tiny.toml").write_text(TINY)
    videos = []
    for c, motion in enumerate(["translate(1.2,0)", "oscillate(y,10)"]):
        for i in range(5):
            name = f"c{c}_{i}"
            assert run("synth-video", "--motion", motion, "--size", "64x64x24", "--seed", 10 * c + i,
                       "--out", root / f"{name}.rgv") == 0
            videos.append({"id": name, "path": f"{name}.rgv", "labels": [["slide", "bob"][c]],
                           "split": "train" if i < 3 else "test"})
    (root / "m.json").write_text(json.dumps({"classes": ["slide", "bob"], "videos": videos}))
    cfg = ["--config", root / "tiny.toml"]
    m = ["--manifest", root / "m.json"]
    assert run("extract", *m, *cfg, "--out", root / "feats", "--workers", 2) == 0
    assert run("train-convisa", *m, *cfg, "--seed", 7, "--features", root / "feats", "--out", root / "cv.tcn") == 0
    assert run("describe", *m, "--features", root / "feats", "--model", root / "cv.tcn") == 0
    assert run("train-encoder", *m, *cfg, "--features", root / "feats", "--out", root / "enc.tcn") == 0
    assert run("encode", *m, "--features", root / "feats", "--encoder", root / "enc.tcn",
               "--out", root / "reps.tcn") == 0
    assert run("train-svm", *m, *cfg, "--reps", root / "reps.tcn", "--out", root / "svm.tcn") == 0
    assert run("predict", *m, "--reps", root / "reps.tcn", "--svm", root / "svm.tcn", "--out", root / "s.csv") == 0
    return root
