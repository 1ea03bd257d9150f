"""Command-line entry point wiring the pipeline together.

Subcommands: ingest, embed, train, evaluate, filter, report. Configuration
comes from an optional key-value file (--config) overridden by flags; the
effective merged configuration is dumped into the output directory so every
run can be reproduced from its artifacts.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import shutil
import sys

import numpy as np

from .config import RunConfig
from .encoder import KIND_SYNTHETIC
from .errors import SrlfError, StoreError, ValidationError
from .evaluate import (
    EXCLUDE_MODES,
    PROTOCOLS,
    FoldResult,
    PredictionRow,
    build_confusions,
    kfold_summary,
    render_reports,
    run_protocol,
)
from .filters import mode_filter, segmentize
from .manifest import DatasetManifest, load_manifest, make_folds
from .net import save_checkpoint
from .pipeline import embed_manifest, gather_training_data
from .store import EmbeddingStore
from .synthetic import build_synthetic_manifest
from .train import train

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--seed", type=int, help="global random seed")
    common.add_argument("--jobs", type=int, help="embedding worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="srlf",
        description="Multi-view driver activity classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="validate the dataset into a manifest cache")
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--annotations", help="annotation CSV")
    p.add_argument("--phase", choices=["both", "unobstructed", "obstructed"])
    p.add_argument("--synthetic", action="store_true",
                   help="generate the desk-scale synthetic dataset instead")

    p = sub.add_parser("embed", parents=[common],
                       help="populate the embedding store from the manifest")
    p.add_argument("--synthetic", action="store_true",
                   help="generate manifest (if absent) and embeddings "
                        "with the synthetic backend in one step")

    p = sub.add_parser("train", parents=[common],
                       help="train one model on every participant")
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("evaluate", parents=[common],
                       help="subject-wise k-fold evaluation")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--filter", choices=["on", "off"], dest="filter_flag")
    p.add_argument("--mode", choices=EXCLUDE_MODES,
                   help="exclude_class0 flavor")
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("filter", parents=[common],
                       help="mode-filter a frame_index,label CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--segments", help="also write start,end,label runs")
    p.add_argument("--window", type=int,
                   help="odd window w; tune to the typical duration of the "
                        "driver activities at the prediction rate")
    p.add_argument("--tie-policy", choices=["keep_center", "smallest_index"])

    p = sub.add_parser("report", parents=[common],
                       help="re-render reports from stored predictions")
    p.add_argument("--protocol", choices=PROTOCOLS)
    return parser


def load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.out is not None:
        overrides["out"] = args.out
    for attr, key in [("root", "dataset.root"), ("annotations", "dataset.annotations"),
                      ("phase", "dataset.phase"), ("max_epochs", "train.max_epochs"),
                      ("protocol", "eval.protocol"), ("mode", "eval.exclude_mode"),
                      ("window", "filter.window"), ("tie_policy", "filter.tie_policy")]:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "filter_flag", None) is not None:
        overrides["eval.filter"] = args.filter_flag == "on"
    return RunConfig.load(args.config, overrides)


def _load_manifest_cache(cfg: RunConfig) -> DatasetManifest:
    path = cfg.manifest_path
    if not path.exists():
        raise ValidationError(
            f"manifest cache not found at {path}; run `srlf ingest` first")
    return DatasetManifest.from_json(path.read_text(encoding="utf-8"))


def _open_store(cfg: RunConfig, create: bool = False) -> EmbeddingStore:
    path = cfg.store_path
    if (path / "index.json").exists():
        store = EmbeddingStore.open(path)
        if store.embed_dim != cfg["encoder.embed_dim"]:
            raise ValidationError(
                f"store at {path} holds {store.embed_dim}-dim vectors, "
                f"config expects {cfg['encoder.embed_dim']}")
        return store
    if create:
        return EmbeddingStore.create(path, cfg["encoder.embed_dim"])
    raise StoreError(f"no embedding store at {path}; run `srlf embed` first")


def _labeled_frame_count(manifest: DatasetManifest) -> int:
    rate = manifest.sample_rate_hz
    return sum(
        math.ceil(end * rate) - math.ceil(start * rate)
        for session in manifest.sessions
        for start, end, _ in session.annotations)


def _build_or_load_manifest(cfg: RunConfig, synthetic: bool) -> DatasetManifest:
    if synthetic:
        manifest = build_synthetic_manifest(cfg.synthetic_spec())
    else:
        root = cfg["dataset.root"]
        annotations = cfg["dataset.annotations"]
        if not root or not annotations:
            raise ValidationError(
                "dataset.root and dataset.annotations are required "
                "(or pass --synthetic)")
        manifest = load_manifest(root, annotations,
                                 sample_rate_hz=cfg["dataset.sample_rate_hz"],
                                 path_template=cfg["dataset.path_template"])
    if cfg["dataset.phase"] != "both":
        manifest = manifest.filter_phase(cfg["dataset.phase"])
    return manifest


# ----------------------------------------------------------------- commands

def cmd_ingest(cfg: RunConfig, args) -> int:
    manifest = _build_or_load_manifest(cfg, args.synthetic)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    tmp = cfg.manifest_path.with_suffix(".json.tmp")
    tmp.write_text(manifest.to_json(), encoding="utf-8")
    os.replace(tmp, cfg.manifest_path)
    total_frames = sum(math.ceil(s.duration_sec * manifest.sample_rate_hz)
                       for s in manifest.sessions)
    print(f"participants: {len(manifest.participants)}")
    print(f"sessions: {len(manifest.sessions)}")
    print(f"frames: {total_frames}")
    print(f"labeled frames: {_labeled_frame_count(manifest)}")
    print(f"manifest cache: {cfg.manifest_path}")
    return 0


def cmd_embed(cfg: RunConfig, args) -> int:
    if not cfg.manifest_path.exists() and args.synthetic:
        cmd_ingest(cfg, args)
    manifest = _load_manifest_cache(cfg)
    store = _open_store(cfg, create=True)
    try:
        if args.synthetic and cfg["encoder.kind"] != KIND_SYNTHETIC:
            raise ValidationError(
                "--synthetic requires encoder.kind = synthetic")
        backend = cfg.encoder_backend()
        stats = embed_manifest(manifest, store, backend,
                               seed=cfg["seed"], jobs=cfg["jobs"])
    finally:
        store.close()
    print(f"written: {stats.written}")
    print(f"skipped (already cached): {stats.skipped}")
    print(f"throughput: {stats.throughput:.1f} vectors/s")
    if stats.failures:
        print(f"failures: {len(stats.failures)}")
        for failure in stats.failures:
            print(f"  {failure}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = _load_manifest_cache(cfg)
    store = _open_store(cfg)
    data = gather_training_data(manifest, store, manifest.participants)
    params, history = train(data, cfg.model_config(), cfg.train_config())
    train_dir = cfg.out_dir / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, train_dir / "model.ckpt.tmp")
    os.replace(train_dir / "model.ckpt.tmp", train_dir / "model.ckpt")
    history.write_csv(train_dir / "history.csv.tmp")
    os.replace(train_dir / "history.csv.tmp", train_dir / "history.csv")
    print(f"epochs: {len(history.train_loss)} ({history.stop_reason})")
    print(f"best epoch: {history.best_epoch} "
          f"(val loss {history.val_loss[history.best_epoch]:.4f}, "
          f"val acc {history.val_accuracy[history.best_epoch]:.4f})")
    print(f"checkpoint: {train_dir / 'model.ckpt'}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    manifest = _load_manifest_cache(cfg)
    store = _open_store(cfg)
    folds = make_folds(manifest, cfg["dataset.folds"], cfg["dataset.fold_file"])
    protocol = cfg.protocol()
    results = run_protocol(manifest, store, folds, protocol,
                           cfg.model_config(), cfg.train_config(),
                           cfg.filter_config())
    final_dir = cfg.out_dir / protocol.name
    tmp_dir = cfg.out_dir / f".{protocol.name}.tmp{os.getpid()}"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    render_reports(results, tmp_dir)
    if final_dir.exists():
        shutil.rmtree(final_dir)
    os.replace(tmp_dir, final_dir)
    mean, std = kfold_summary(results) if len(results) >= 2 \
        else (results[0].accuracy, 0.0)
    for r in results:
        print(f"fold {r.fold}: {r.accuracy:.2f}% (raw {r.accuracy_raw:.2f}%)")
    print(f"accuracy: {mean:.2f}% +/- {std:.2f}%")
    print(f"reports: {final_dir}")
    return 0


def cmd_filter(cfg: RunConfig, args) -> int:
    rows = []
    with open(args.input, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame_index", "label"]:
            raise ValidationError(
                f"{args.input}: expected header frame_index,label")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1])))
            except (IndexError, ValueError):
                raise ValidationError(
                    f"{args.input}:{lineno}: expected two integers") from None
    if not rows:
        raise ValidationError(f"{args.input}: no label rows")
    rows.sort()
    labels = np.array([label for _, label in rows])
    filtered = mode_filter(labels, cfg.filter_config())
    with open(args.output, "w", encoding="utf-8") as f:
        f.write("frame_index,label\n")
        for (frame, _), label in zip(rows, filtered):
            f.write(f"{frame},{label}\n")
    print(f"filtered: {args.output}")
    if args.segments:
        with open(args.segments, "w", encoding="utf-8") as f:
            f.write("start,end,label\n")
            for start, end, label in segmentize(filtered):
                f.write(f"{start},{end},{label}\n")
        print(f"segments: {args.segments}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    protocol = cfg.protocol()
    proto_dir = cfg.out_dir / protocol.name
    if not proto_dir.exists():
        raise ValidationError(f"no evaluation outputs at {proto_dir}")
    manifest = None
    if cfg.manifest_path.exists():
        manifest = _load_manifest_cache(cfg)
    n_full = manifest.num_classes if manifest else cfg["model.num_classes"]
    names = ([c.name for c in manifest.classes] if manifest
             else [f"class {i}" for i in range(n_full)])

    results = []
    for fold_dir in sorted(proto_dir.glob("fold*")):
        rows = []
        with open(fold_dir / "predictions.csv", newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            for row in reader:
                rows.append(PredictionRow(
                    row["session"], int(row["frame_index"]), int(row["true_label"]),
                    int(row["raw_pred"]), int(row["filtered_pred"])))
        scored = [r for r in rows if r.true_label >= 0]
        y_true = np.array([r.true_label for r in scored])
        y_raw = np.array([r.raw_pred for r in scored])
        y_filt = np.array([r.filtered_pred for r in scored])
        result_names, conf_raw, conf_filt = build_confusions(
            y_true, y_raw, y_filt if protocol.filter_on else None,
            protocol, n_full, names)
        results.append(FoldResult(
            fold=int(fold_dir.name.removeprefix("fold")), protocol=protocol,
            class_names=result_names, confusion_raw=conf_raw,
            confusion_filtered=conf_filt, predictions=rows))
    if not results:
        raise ValidationError(f"no fold directories under {proto_dir}")
    render_reports(results, proto_dir)
    print(f"re-rendered {len(results)} folds under {proto_dir}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "filter": cmd_filter,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        cfg.write_dump(cfg.out_dir / "config.dump")
        return COMMANDS[args.command](cfg, args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SrlfError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
