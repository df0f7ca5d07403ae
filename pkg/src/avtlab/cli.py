"""Command-line entry point orchestrating the full pipeline.

Workspace layout under ``--out``: manifest.jsonl + dataset.json + media/
from ``generate``; teacher/ from ``pretrain-teacher``; posteriors.json from
``build-posteriors``; runs/<run_id>/ from ``train`` (checkpoint, metrics
log, confusion matrix, per-run posterior table); results.csv from ``sweep``.
Every subcommand writes its exact resolved configuration next to its
outputs, and rerunning with the same config and seed overwrites byte-
identically (wall-clock fields aside).

Exit codes: 0 success, 2 usage, 3 validation (bad inputs, missing
artifacts), 1 runtime failure. Errors print one machine-parsable line:
``AVTL_ERROR <CLASS>: <message>``.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    cap = os.environ.get("AVTL_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_cap_threads()  # before numpy first loads

import argparse  # noqa: E402
import json      # noqa: E402
import sys       # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import dataset, evaluation, training  # noqa: E402
from .audiofeat import load_normalizer, save_normalizer  # noqa: E402
from .config import APPROACHES, INITS, MASKS, ExperimentConfig  # noqa: E402
from .dataset import load_manifest, save_manifest  # noqa: E402
from .errors import (AvtlabError, ConfigError, InputError,  # noqa: E402
                     MissingPosteriorsError, StateError)
from .features import FeatureStore  # noqa: E402
from .losses import ScenePosteriorTable  # noqa: E402
from .models import FrozenTeacher, load_checkpoint, save_checkpoint  # noqa: E402


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file does not parse: {e}") from e
        cfg = ExperimentConfig.from_dict(raw)
    else:
        cfg = ExperimentConfig()
    overrides = {
        "scenes": "scenes", "events": "events", "pairs": "pairs",
        "image_size": "image_size", "class_decay": "class_decay",
        "balance_low": "balance_low", "balance_floor": "balance_floor",
        "visual_style": "visual_style", "feature_dim": "feature_dim",
        "lr": "lr", "epochs": "epochs", "batch_size": "batch_size",
        "alpha": ("loss", "alpha"), "beta": ("loss", "beta"),
        "tau": ("loss", "temperature"), "approach": ("loss", "approach"),
        "modality": "modality_mask", "init": "init",
    }
    for flag, target in overrides.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if isinstance(target, tuple):
            setattr(cfg.loss, target[1], value)
        else:
            setattr(cfg, target, value)
    if getattr(args, "no_scene_loss", False):
        cfg.loss.include_scene_loss = False
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    cfg.validate()
    return cfg


def _write_resolved(cfg: ExperimentConfig, path: Path, extra: dict | None = None) -> None:
    payload = cfg.to_dict()
    if extra:
        payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sync_with_manifest(cfg: ExperimentConfig, manifest) -> None:
    """Dataset shape comes from the dataset, not from config defaults."""
    meta = manifest.meta
    if meta:
        cfg.scenes = int(meta["scenes"])
        cfg.events = int(meta["events"])
        cfg.image_size = int(meta.get("image_size", cfg.image_size))
        cfg.class_decay = float(meta.get("class_decay", cfg.class_decay))
        cfg.visual_style = meta.get("visual_style", cfg.visual_style)


def _workspace(args) -> tuple:
    out = Path(args.out)
    manifest = load_manifest(out / "manifest.jsonl")
    store = FeatureStore.build(manifest)
    return out, manifest, store


def _load_teacher(out: Path) -> tuple[FrozenTeacher, "object"]:
    teacher_dir = out / "teacher"
    teacher = FrozenTeacher.load(teacher_dir)
    return teacher, load_normalizer(teacher_dir)


def _run_id(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.loss.approach}_{cfg.modality_mask}_{cfg.init}_s{seed}"


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.dataset_seed
    cfg.dataset_seed = seed
    manifest = dataset.build_dataset(
        out, scenes=cfg.scenes, events=cfg.events, pairs=cfg.pairs, seed=seed,
        image_size=cfg.image_size, class_decay=cfg.class_decay,
        balance_low=cfg.balance_low, balance_floor=cfg.balance_floor,
        visual_style=cfg.visual_style)
    _write_resolved(cfg, out / "generate_config.json", {"command": "generate"})
    print(f"wrote {len(manifest.records)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_pretrain_teacher(args) -> int:
    cfg = _load_config(args)
    out, manifest, store = _workspace(args)
    _sync_with_manifest(cfg, manifest)
    result = training.pretrain_teacher(cfg, manifest, store)
    teacher_dir = out / "teacher"
    result.teacher.save(teacher_dir)
    save_normalizer(teacher_dir, result.normalizer)
    save_manifest(manifest)  # teacher probabilities now cached per record
    _write_resolved(cfg, teacher_dir / "resolved_config.json",
                    {"command": "pretrain-teacher",
                     "event_accuracy": result.accuracy,
                     "epochs_run": result.epochs_run,
                     "snapshot_id": result.teacher.snapshot_id})
    print(f"teacher ready: event accuracy {result.accuracy:.3f} "
          f"after {result.epochs_run} epochs ({result.teacher.snapshot_id})")
    return 0


def cmd_build_posteriors(args) -> int:
    from .losses import scene_posteriors

    cfg = _load_config(args)
    out = Path(args.out)
    manifest = load_manifest(out / "manifest.jsonl")  # no media decode needed
    _sync_with_manifest(cfg, manifest)
    table = scene_posteriors(manifest.records, cfg.scenes)
    table.save(out / "posteriors.json")
    _write_resolved(cfg, out / "posteriors_config.json", {"command": "build-posteriors"})
    print(f"posterior table over {int(table.counts.sum())} training samples "
          f"-> {out / 'posteriors.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out, manifest, store = _workspace(args)
    _sync_with_manifest(cfg, manifest)
    seed = args.seed if args.seed is not None else 0
    approach = cfg.loss.approach

    teacher = None
    if cfg.init == "pretrained_teacher" or approach != "none":
        teacher, _ = _load_teacher(out)

    table = None
    if approach == "le":
        table_path = Path(args.posteriors) if args.posteriors else out / "posteriors.json"
        table = ScenePosteriorTable.load(table_path)

    result = training.train_run(cfg, manifest, store, teacher=teacher,
                                table=table, run_seed=seed, resplit=False)
    run_id = _run_id(cfg, seed)
    run_dir = out / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, run_dir / "checkpoint",
                    extra={"tau": cfg.loss.temperature, "seed": seed,
                           "approach": approach, "modality": cfg.modality_mask,
                           "init": cfg.init,
                           "snapshot_id": teacher.snapshot_id if teacher else None,
                           "best_epoch": result.best_epoch})
    save_normalizer(run_dir / "checkpoint", result.normalizer)
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry) + "\n")
    (run_dir / "test_metrics.json").write_text(
        json.dumps(result.test_metrics, indent=2) + "\n")
    evaluation.write_confusion_csv(run_dir / "confusion.csv", result.confusion)
    if result.table is not None:
        result.table.save(run_dir / "posteriors.json")
    _write_resolved(cfg, run_dir / "resolved_config.json",
                    {"command": "train", "seed": seed, "run_id": run_id})
    print(f"run {run_id}: test F {result.test_metrics['fscore']:.4f} "
          f"(best epoch {result.best_epoch})")
    return 0


def _load_run(out: Path, run_id: str):
    run_dir = out / "runs" / run_id
    if not run_dir.exists():
        raise InputError(f"no such run: {run_dir}")
    model, desc = load_checkpoint(run_dir / "checkpoint")
    normalizer = load_normalizer(run_dir / "checkpoint")
    return run_dir, model, desc, normalizer


def cmd_evaluate(args) -> int:
    out, manifest, store = _workspace(args)
    run_dir, model, desc, normalizer = _load_run(out, args.run)
    records = manifest.split_records(args.split)
    if not records:
        raise InputError(f"split {args.split!r} is empty")
    cm, metrics = evaluation.evaluate(model, records, store, normalizer,
                                      mask=desc.get("modality", "none"))
    eval_dir = run_dir / f"eval_{args.split}"
    eval_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_confusion_csv(eval_dir / "confusion.csv", cm)
    (eval_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"{args.run} on {args.split}: P {metrics['precision']:.4f} "
          f"R {metrics['recall']:.4f} F {metrics['fscore']:.4f}")
    return 0


def cmd_export_embeddings(args) -> int:
    out, manifest, store = _workspace(args)
    run_dir, model, desc, normalizer = _load_run(out, args.run)
    records = manifest.split_records(args.split)
    if not records:
        raise InputError(f"split {args.split!r} is empty")
    table = None
    if desc.get("approach") == "le":
        table = ScenePosteriorTable.load(run_dir / "posteriors.json")
    rows, labels = evaluation.export_event_embeddings(
        model, records, store, normalizer, mask=desc.get("modality", "none"),
        table=table)
    path = run_dir / f"embeddings_{args.split}.csv"
    evaluation.write_embeddings_csv(path, rows, labels)
    print(f"wrote {rows.shape[0]} x {rows.shape[1]} event distributions to {path}")
    return 0


def cmd_cam(args) -> int:
    from PIL import Image

    from . import tensor as tz
    from .models import cam as cam_map

    out, manifest, store = _workspace(args)
    run_dir, model, desc, normalizer = _load_run(out, args.run)
    if desc.get("modality") == "sound_only":
        raise StateError("sound-only runs have no visual maps")
    records = manifest.split_records(args.split)[:args.limit]
    if not records:
        raise InputError(f"split {args.split!r} is empty")
    cam_dir = run_dir / "cam"
    cam_dir.mkdir(parents=True, exist_ok=True)
    images, audio = store.batch(records, normalizer)
    with tz.no_grad():
        result = model.forward(images, audio, mask=desc.get("modality", "none"))
    preds = np.argmax(result.scene_logits.data, axis=1)
    size = images.shape[-1]
    for i, rec in enumerate(records):
        heat = cam_map(rec.scene, result.visual_maps.data[i],
                       model.scene_w.data, model.dims.feature_dim)
        reps = size // heat.shape[0]
        up = np.kron(heat, np.ones((reps, reps)))
        base = (images[i].transpose(1, 2, 0) + 1.0) / 2.0
        overlay = base * (1 - 0.6 * up[:, :, None])
        overlay[:, :, 0] += 0.6 * up
        arr = np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8)
        name = f"{rec.id}_true{rec.scene}_pred{int(preds[i])}.png"
        Image.fromarray(arr, "RGB").save(cam_dir / name)
    print(f"wrote {len(records)} CAM overlays to {cam_dir}")
    return 0


SWEEP_CELL_SETS = {
    "full": lambda: training.default_cells(),
    "smoke": lambda: [
        {"name": "none+fusion", "approach": "none", "modality": "none"},
        {"name": "le+fusion", "approach": "le", "modality": "none"},
    ],
}


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out, manifest, store = _workspace(args)
    _sync_with_manifest(cfg, manifest)
    teacher, _ = _load_teacher(out)
    cells = SWEEP_CELL_SETS[args.cells]()
    rows = training.sweep(cfg, manifest, store, teacher, cells=cells,
                          csv_path=out / "results.csv")
    _write_resolved(cfg, out / "sweep_config.json",
                    {"command": "sweep", "cells": args.cells})
    failures = [r for r in rows if r.get("error")]
    print(f"sweep wrote {len(rows)} rows to {out / 'results.csv'} "
          f"({len(failures)} failed cells)")
    for row in failures:
        print(f"  failed {row['run_id']}: {row['error']}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avtlab",
        description="audiovisual cross-task transfer laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="workspace directory")
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("generate", help="synthesize a paired corpus")
    common(p)
    p.add_argument("--scenes", type=int)
    p.add_argument("--events", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--class-decay", dest="class_decay", type=float)
    p.add_argument("--balance-low", dest="balance_low", type=int)
    p.add_argument("--balance-floor", dest="balance_floor", type=int)
    p.add_argument("--visual-style", dest="visual_style",
                   choices=("varied", "blob_only"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain-teacher", help="train and freeze the event teacher")
    common(p)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("build-posteriors", help="per-scene event posterior table")
    common(p)
    p.set_defaults(func=cmd_build_posteriors)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--approach", choices=APPROACHES)
    p.add_argument("--modality", choices=MASKS)
    p.add_argument("--init", choices=INITS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--no-scene-loss", dest="no_scene_loss", action="store_true")
    p.add_argument("--posteriors", help="posterior table path (default <out>/posteriors.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics for a finished run")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="per-sample event distributions")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("cam", help="class activation map overlays")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int, default=16)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("sweep", help="the approach x modality experiment matrix")
    common(p)
    p.add_argument("--cells", choices=sorted(SWEEP_CELL_SETS), default="full")
    p.add_argument("--seeds", help="comma-separated run seeds (overrides config)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except AvtlabError as e:
        print(f"AVTL_ERROR {e.code}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # runtime failures keep a parsable shape
        print(f"AVTL_ERROR INTERNAL: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
