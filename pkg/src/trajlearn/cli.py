"""Command-line entry point: ``trajlearn <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 data error (bad or missing inputs, inconsistent
config), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classify import (ScoreMatrix, eval_macc, eval_map, models_from_tensors, models_to_tensors, ova_predict,
                       ova_train, read_scores_csv, write_scores_csv)
from .config import desk_scale_config, dump_config, load_config, PipelineConfig
from .container import load_model, save_model
from .convisa import TwoStreamModel, filter_grid, layer1_filters, train_two_stream
from .descriptors import DescriptorSet
from .encoding import FisherEncoder, encode_video, train_encoder
from .errors import DataError, NumericError, TrajlearnError
from .mir import MirParams, mir_rerank, rank_score_fuse
from .pipeline import (VideoFeatures, bench_synthetic, extract_many, load_manifest, pool_descriptors,
                       stack_volumes)
from .video_io import parse_motion, save_video, synth_video, write_pgm

log = logging.getLogger("trajlearn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _features_path(features_dir: Path, video_id: str) -> Path:
    return Path(features_dir) / f"{video_id}.tcn"


def _load_features(features_dir, entries) -> list[VideoFeatures]:
    return [VideoFeatures.from_tensors(load_model(_features_path(features_dir, e.id))) for e in entries]


def _load_features_meta(features_dir, entry):
    return load_model(_features_path(features_dir, entry.id))


# -- subcommands -------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [e.path for e in manifest.entries]
    for entry, (feats, report) in zip(manifest.entries, extract_many(paths, cfg, args.workers)):
        tensors, meta = feats.to_tensors(entry.id)
        meta["mifs"] = {"used": report["used"], "skipped": report["skipped"]}
        save_model(_features_path(out, entry.id), tensors, meta)
        if report["skipped"]:
            log.warning("%s: skip levels %s left out (video too short)", entry.id, report["skipped"])
        log.info("%s: %d trajectories", entry.id, len(feats))
    return EXIT_OK


def cmd_train_convisa(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    rng = np.random.default_rng(cfg.seed)
    vol_seed, model_seed = (int(s) for s in rng.integers(0, 2**31 - 1, 2))
    feats = _load_features(args.features, manifest.split("train"))
    pix, flo = stack_volumes(feats, cfg.convisa.sample_count, np.random.default_rng(vol_seed))
    del feats
    model = train_two_stream(pix, flo, cfg.convisa, model_seed)
    tensors, meta = model.to_tensors()
    save_model(args.out, tensors, meta)
    return EXIT_OK


def cmd_describe(args) -> int:
    manifest = load_manifest(args.manifest)
    model = TwoStreamModel.from_tensors(load_model(args.model))
    out = Path(args.out or args.features)
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        tf = _load_features_meta(args.features, entry)
        feats = VideoFeatures.from_tensors(tf).with_learned(model)
        tensors, meta = feats.to_tensors(entry.id)
        meta = {**tf.meta, **meta}
        save_model(_features_path(out, entry.id), tensors, meta)
    return EXIT_OK


def _kinds(args, cfg: PipelineConfig) -> list[str]:
    return list(args.kinds.split(",")) if args.kinds else list(cfg.descriptors.kinds)


def _restrict(ds: DescriptorSet, kinds: list[str]) -> DescriptorSet:
    missing = [k for k in kinds if k not in ds.values]
    if missing:
        raise DataError(f"features lack descriptor kinds {missing}; run `describe` first for lop/lof")
    return DescriptorSet({k: ds.values[k] for k in kinds}, ds.locations)


def cmd_train_encoder(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    kinds = _kinds(args, cfg)
    feats = _load_features(args.features, manifest.split("train"))
    pool = _restrict(pool_descriptors(feats), kinds)
    enc = train_encoder(pool, cfg.encoding.K, cfg.seed, cfg.encoding.gmm_samples, kinds,
                        cfg.encoding.xyt, cfg.encoding.power_alpha)
    tensors, meta = enc.to_tensors()
    save_model(args.out, tensors, meta)
    return EXIT_OK


def cmd_encode(args) -> int:
    manifest = load_manifest(args.manifest)
    enc = FisherEncoder.from_tensors(load_model(args.encoder))
    rows, ids = [], []
    for entry in manifest.entries:
        feats = VideoFeatures.from_tensors(_load_features_meta(args.features, entry))
        rows.append(encode_video(_restrict(feats.descriptors, enc.kinds), enc).vector)
        ids.append(entry.id)
    save_model(args.out, {"X": np.stack(rows)}, {"kind": "representations", "dim": enc.dim})
    Path(str(args.out) + ".json").write_text(json.dumps({i: r for r, i in enumerate(ids)}, indent=1))
    return EXIT_OK


def _load_reps(path) -> tuple[np.ndarray, dict[str, int]]:
    tf = load_model(path)
    if tf.meta.get("kind") != "representations":
        raise DataError(f"{path}: not a representation matrix")
    side = Path(str(path) + ".json")
    if not side.is_file():
        raise FileNotFoundError(f"representation sidecar not found: {side}")
    return np.asarray(tf["X"], np.float64), json.loads(side.read_text())


def _rows(rows: dict[str, int], entries) -> list[int]:
    missing = [e.id for e in entries if e.id not in rows]
    if missing:
        raise DataError(f"representations missing for {missing[:5]}")
    return [rows[e.id] for e in entries]


def cmd_train_svm(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    X, rows = _load_reps(args.reps)
    train = manifest.split("train")
    labels = [manifest.label_index(e) for e in train]
    models = ova_train(X[_rows(rows, train)], labels, len(manifest.classes), cfg.svm.C, cfg.seed)
    tensors, meta = models_to_tensors(models, manifest.classes)
    save_model(args.out, tensors, meta)
    return EXIT_OK


def cmd_predict(args) -> int:
    manifest = load_manifest(args.manifest)
    X, rows = _load_reps(args.reps)
    models, names = models_from_tensors(load_model(args.svm))
    entries = manifest.entries if args.split == "all" else manifest.split(args.split)
    scores = ova_predict(models, X[_rows(rows, entries)], names, [e.id for e in entries])
    write_scores_csv(scores, args.out)
    return EXIT_OK


def cmd_mir(args) -> int:
    scores = read_scores_csv(args.scores)
    params = MirParams(args.eta, args.alpha, args.iters)
    final, used = mir_rerank(scores, params)
    out = final if args.no_fuse else rank_score_fuse(final, scores)
    write_scores_csv(out, args.out)
    log.info("re-ranking ran %d sweep(s)", used)
    return EXIT_OK


def _truth_from_csv(path, scores: ScoreMatrix) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"truth file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0] == "instance_id":
        rows = rows[1:]
    labels = {r[0]: r[1:] for r in rows}
    T = np.zeros(scores.scores.shape, dtype=bool)
    for i, iid in enumerate(scores.instance_ids):
        if iid not in labels:
            raise DataError(f"no ground truth for instance {iid!r}")
        for lab in labels[iid]:
            if lab not in scores.class_names:
                raise DataError(f"{iid}: unknown class {lab!r}")
            T[i, scores.class_names.index(lab)] = True
    return T


def cmd_eval(args) -> int:
    scores = read_scores_csv(args.scores)
    if args.truth:
        T = _truth_from_csv(args.truth, scores)
    elif args.manifest:
        manifest = load_manifest(args.manifest)
        by_id = {e.id: e for e in manifest.entries}
        missing = [i for i in scores.instance_ids if i not in by_id]
        if missing:
            raise DataError(f"instances not in manifest: {missing[:5]}")
        if manifest.classes != scores.class_names:
            raise DataError("score columns do not match the manifest class list")
        T = manifest.truth_matrix([by_id[i] for i in scores.instance_ids])
    else:
        raise UsageError("eval needs --truth or --manifest")
    single = T.sum(axis=1) == 1
    macc = eval_macc(scores, T.argmax(axis=1)) if single.all() else float("nan")
    print(f"MAcc={macc}")
    print(f"MAP={eval_map(scores, T)}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else desk_scale_config(args.seed)
    cfg = replace(cfg, seed=args.seed)
    report = bench_synthetic(args.classes, args.videos_per_class, args.seed, cfg)
    text = json.dumps(report.as_dict(), indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_export_filters(args) -> int:
    model = TwoStreamModel.from_tensors(load_model(args.model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stream in (model.pixel_model, model.flow_model):
        write_pgm(filter_grid(layer1_filters(stream), args.count), out / f"{stream.stream}_filters.pgm")
    return EXIT_OK


def cmd_init_config(args) -> int:
    cfg = desk_scale_config() if args.desk else PipelineConfig()
    text = dump_config(cfg)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        w, h, t = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 64x64x32, got {args.size!r}") from None
    save_video(synth_video(parse_motion(args.motion), (w, h, t), args.seed), args.out, args.format)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="trajlearn", description="Trajectory-aligned action features and classifiers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    sp = add("extract", cmd_extract, "videos -> trajectories, volumes and hand-crafted descriptors")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="directory of per-video feature containers")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("train-convisa", cmd_train_convisa, "train-split volumes -> two-stream ConvISA model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)

    sp = add("describe", cmd_describe, "volumes + model -> LOP / LOF descriptors")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", help="output directory (default: update --features in place)")

    sp = add("train-encoder", cmd_train_encoder, "train-split descriptors -> Fisher encoder")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--kinds", help="comma-separated descriptor kinds (default: config)")
    sp.add_argument("--out", required=True)

    sp = add("encode", cmd_encode, "descriptors -> one Fisher vector per video")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--out", required=True, help="matrix container; a .json sidecar maps video id to row")

    sp = add("train-svm", cmd_train_svm, "one-vs-all linear SVMs on the train split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--reps", required=True)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "score videos -> score matrix CSV")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--reps", required=True)
    sp.add_argument("--svm", required=True)
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--out", required=True)

    sp = add("mir", cmd_mir, "re-rank a score matrix CSV (and fuse with the originals)")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--eta", type=float, default=0.5)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--no-fuse", action="store_true", help="write re-ranked scores without fusion")

    sp = add("eval", cmd_eval, "MAcc and MAP of a score matrix CSV")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--truth", help="CSV of instance_id,label[,label...]")
    sp.add_argument("--manifest")

    sp = add("bench-synthetic", cmd_bench, "end-to-end run on synthetic motion classes")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--videos-per-class", type=int, default=10)
    sp.add_argument("--out", help="also write the JSON report here")
    sp.set_defaults(seed=0)

    sp = add("export-filters", cmd_export_filters, "layer-1 filters of both streams as PGM grids")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=16)

    sp = add("init-config", cmd_init_config, "write a config file holding every key")
    sp.add_argument("--out")
    sp.add_argument("--desk", action="store_true", help="desk-scale settings instead of the full ones")

    sp = add("synth-video", cmd_synth, "write a synthetic moving-texture video")
    sp.add_argument("--motion", required=True, help="translate(vx,vy) | static | oscillate(axis,period[,amp])")
    sp.add_argument("--size", default="64x64x32", help="WxHxT")
    sp.add_argument("--format", choices=("rgv", "pgm"), default="rgv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(seed=0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trajlearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"trajlearn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"trajlearn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrajlearnError, ValueError) as exc:
        print(f"trajlearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
