"""Optimisation: Adam with decoupled weight decay, teacher pretraining,
single training runs, and the multi-approach sweep.

Every run is a pure function of (config, manifest, seed): the seed drives
model initialisation, batch shuffling, and the split shuffle, so reruns
produce bit-identical metric logs. The teacher is pretrained once per
dataset and its event probabilities are cached into the manifest, making
every transfer loss a cheap lookup.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, tensor as tz
from .audiofeat import Normalizer
from .config import ExperimentConfig
from .dataset import Manifest, split_disjoint
from .errors import ConfigError, NumericError, PretrainingError, StateError
from .evaluation import evaluate
from .features import FeatureStore
from .losses import ScenePosteriorTable, scene_posteriors, total_loss
from .models import (AudioEventNet, FrozenTeacher, FusionModel, ModelDims,
                     build_model)

_TAG_BATCH = 0xBA7C

TEACHER_TARGET_ACC = 0.85
TEACHER_ABORT_ACC = 0.60


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: list[tuple[str, tz.Tensor]], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float, weight_decay: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction.

    Decoupled weight decay shrinks parameters before the moment update; a
    missing gradient counts as zero, so untouched branches still decay.
    """
    state.step += 1
    t = state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g.sum()):
            raise NumericError(f"non-finite gradient for {name} at step {t}")
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def _run_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(tag))))


def _collect_grads(params: list[tuple[str, tz.Tensor]]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params}


# ---------------------------------------------------------------------------
# teacher pretraining

@dataclass
class PretrainResult:
    teacher: FrozenTeacher
    normalizer: Normalizer
    accuracy: float
    epochs_run: int
    history: list[dict]


def _event_accuracy(net: AudioEventNet, records, store: FeatureStore,
                    normalizer: Normalizer, batch_size: int) -> float:
    """Mean per-event accuracy at threshold 0.5."""
    correct = total = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        _, audio = store.batch(chunk, normalizer)
        with tz.no_grad():
            logits = net.forward(audio)
        pred = logits.data > 0.0
        truth = np.array([r.events for r in chunk], dtype=bool)
        correct += int((pred == truth).sum())
        total += truth.size
    return correct / total


def pretrain_teacher(config: ExperimentConfig, manifest: Manifest,
                     store: FeatureStore) -> PretrainResult:
    """Train the audio event recogniser and cache its probabilities.

    Multi-label binary cross-entropy on the training split until mean
    per-event accuracy reaches the target or the epoch cap; every manifest
    record then receives the frozen teacher's event probabilities.
    """
    config.validate()
    train = manifest.split_records("train")
    if not train:
        raise ConfigError("manifest has no training split")
    normalizer = store.fit_normalizer(train)
    rng = _run_rng(config.teacher_seed, 0x7EAC)
    net = AudioEventNet(events=config.events, feature_dim=config.feature_dim,
                        depth=config.audio_depth, rng=rng)
    params = net.parameters()
    state = AdamState()
    batch_rng = _run_rng(config.teacher_seed, _TAG_BATCH)

    history = []
    accuracy = 0.0
    epochs_run = 0
    for epoch in range(config.teacher_epochs):
        order = batch_rng.permutation(len(train))
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            _, audio = store.batch(chunk, normalizer)
            targets = np.array([r.events for r in chunk], dtype=np.float64)
            logits = net.forward(audio)
            # C(y||q) with hard labels is exactly binary cross-entropy
            loss = losses.kl_distill(targets, logits, tau=1.0)
            tz.backward(loss)
            adam_step(params, _collect_grads(params), state,
                      lr=config.teacher_lr, weight_decay=config.weight_decay,
                      beta1=config.adam_beta1, beta2=config.adam_beta2,
                      eps=config.adam_eps)
            epoch_loss += loss.item()
            steps += 1
        accuracy = _event_accuracy(net, train, store, normalizer, config.batch_size)
        epochs_run = epoch + 1
        history.append({"epoch": epoch, "loss": epoch_loss / max(1, steps),
                        "event_accuracy": accuracy})
        if accuracy >= TEACHER_TARGET_ACC:
            break
    if accuracy < TEACHER_ABORT_ACC:
        raise PretrainingError(
            f"teacher stalled at event accuracy {accuracy:.3f} "
            f"after {epochs_run} epochs")

    teacher = FrozenTeacher.from_net(net)
    cache_teacher_probs(teacher, manifest, store, normalizer, config.batch_size)
    return PretrainResult(teacher=teacher, normalizer=normalizer,
                          accuracy=accuracy, epochs_run=epochs_run,
                          history=history)


def cache_teacher_probs(teacher: FrozenTeacher, manifest: Manifest,
                        store: FeatureStore, normalizer: Normalizer,
                        batch_size: int = 64) -> None:
    for start in range(0, len(manifest.records), batch_size):
        chunk = manifest.records[start:start + batch_size]
        _, audio = store.batch(chunk, normalizer)
        probs = teacher.predict(audio)
        for rec, row in zip(chunk, probs):
            rec.teacher = [float(v) for v in row]


# ---------------------------------------------------------------------------
# a single training run

@dataclass
class TrainResult:
    model: FusionModel
    normalizer: Normalizer
    table: ScenePosteriorTable | None
    log: list[dict]
    best_epoch: int
    best_val_fscore: float
    test_metrics: dict
    confusion: np.ndarray


def _needs_teacher_probs(approach: str) -> bool:
    return approach != "none"


def train_run(config: ExperimentConfig, manifest: Manifest, store: FeatureStore,
              teacher: FrozenTeacher | None = None,
              table: ScenePosteriorTable | None = None,
              run_seed: int = 0, resplit: bool = False) -> TrainResult:
    """Train one model and report best-validation test metrics.

    With ``resplit`` the coordinate-disjoint split is reshuffled from the run
    seed (the per-run variation of the repeated-seeds protocol); otherwise
    the manifest's stored split is used. The posterior table, when needed and
    not supplied, is rebuilt from the run's training split.
    """
    config.validate()
    records = (split_disjoint(manifest, seed=run_seed).records
               if resplit else manifest.records)
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    test = [r for r in records if r.split == "test"]
    if not train or not val or not test:
        raise ConfigError("every split must be nonempty")

    approach = config.loss.approach
    if _needs_teacher_probs(approach):
        missing = [r.id for r in train if r.teacher is None]
        if missing:
            raise StateError(f"records without cached teacher probabilities "
                             f"(pretrain first): {missing[:3]}...")
    if approach == "le" and table is None:
        table = scene_posteriors(records, config.scenes)

    normalizer = store.fit_normalizer(train)
    dims = ModelDims(scenes=config.scenes, events=config.events,
                     feature_dim=config.feature_dim,
                     image_depth=config.image_depth,
                     audio_depth=config.audio_depth)
    model = build_model(dims, approach, seed=run_seed, teacher=teacher,
                        init=config.init)
    params = model.parameters()
    state = AdamState()
    batch_rng = _run_rng(run_seed, _TAG_BATCH)
    mask = config.modality_mask

    log: list[dict] = []
    best = (-1.0, -1)  # (val fscore, epoch)
    best_state = model.state_arrays()
    for epoch in range(config.epochs):
        order = batch_rng.permutation(len(train))
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            images, audio = store.batch(chunk, normalizer)
            labels = np.array([r.scene for r in chunk], dtype=np.int64)
            teacher_probs = (np.array([r.teacher for r in chunk])
                             if _needs_teacher_probs(approach) else None)
            out = model.forward(images, audio, mask=mask)
            loss = total_loss(out.scene_logits, out.event_logits, labels,
                              teacher_probs, config.loss, table=table)
            tz.backward(loss)
            adam_step(params, _collect_grads(params), state,
                      lr=config.lr, weight_decay=config.weight_decay,
                      beta1=config.adam_beta1, beta2=config.adam_beta2,
                      eps=config.adam_eps)
            epoch_loss += loss.item()
            steps += 1
        _, val_metrics = evaluate(model, val, store, normalizer, mask=mask)
        log.append({"epoch": epoch, "train_loss": epoch_loss / max(1, steps),
                    "val_precision": val_metrics["precision"],
                    "val_recall": val_metrics["recall"],
                    "val_fscore": val_metrics["fscore"]})
        if val_metrics["fscore"] > best[0]:
            best = (val_metrics["fscore"], epoch)
            best_state = model.state_arrays()

    model.load_state_arrays(best_state)
    cm, test_metrics = evaluate(model, test, store, normalizer, mask=mask)
    return TrainResult(model=model, normalizer=normalizer, table=table,
                       log=log, best_epoch=best[1], best_val_fscore=best[0],
                       test_metrics=test_metrics, confusion=cm)


# ---------------------------------------------------------------------------
# the experiment matrix

RESULTS_HEADER = ["run_id", "approach", "modality", "init", "seed",
                  "epoch_best", "precision", "recall", "fscore", "wall_seconds"]


def default_cells() -> list[dict]:
    """Approaches x modalities, plus the no-supervision ablations."""
    cells = []
    for approach in ("none", "sq_na", "kl_na", "sq_nva", "kl_nva", "le"):
        for modality in ("none", "image_only", "sound_only"):
            tag = {"none": "fusion", "image_only": "image", "sound_only": "sound"}[modality]
            cells.append({"name": f"{approach}+{tag}", "approach": approach,
                          "modality": modality, "include_scene_loss": True})
    cells += ablation_cells()
    return cells


def ablation_cells() -> list[dict]:
    return [
        {"name": "le1_only", "approach": "le", "modality": "none",
         "include_scene_loss": False, "beta": 0.0},
        {"name": "le1_le2_only", "approach": "le", "modality": "none",
         "include_scene_loss": False},
        {"name": "kl_nva_only", "approach": "kl_nva", "modality": "none",
         "include_scene_loss": False},
        {"name": "sq_nva_only", "approach": "sq_nva", "modality": "none",
         "include_scene_loss": False},
    ]


def _cell_config(base: ExperimentConfig, cell: dict) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(base.to_dict())
    cfg.loss.approach = cell["approach"]
    cfg.loss.include_scene_loss = cell.get("include_scene_loss", True)
    if "beta" in cell:
        cfg.loss.beta = cell["beta"]
    if "alpha" in cell:
        cfg.loss.alpha = cell["alpha"]
    cfg.modality_mask = cell["modality"]
    cfg.init = cell.get("init", base.init)
    return cfg


def sweep(config: ExperimentConfig, manifest: Manifest, store: FeatureStore,
          teacher: FrozenTeacher, cells: list[dict] | None = None,
          csv_path: str | Path | None = None) -> list[dict]:
    """Run every (cell, seed) pair; append mean/std aggregate rows per cell.

    A failed cell is recorded with empty metric fields and the sweep
    continues.
    """
    if cells is None:
        cells = default_cells()
    rows: list[dict] = []
    for cell in cells:
        cfg = _cell_config(config, cell)
        seed_rows = []
        for seed in config.seeds:
            row = {"run_id": f"{cell['name']}:s{seed}", "approach": cfg.loss.approach,
                   "modality": cfg.modality_mask, "init": cfg.init, "seed": seed}
            start = time.perf_counter()
            try:
                result = train_run(cfg, manifest, store, teacher=teacher,
                                   run_seed=seed, resplit=True)
            except Exception as e:  # record the failure, keep sweeping
                row.update({"epoch_best": "", "precision": "", "recall": "",
                            "fscore": "", "wall_seconds": repr(time.perf_counter() - start),
                            "error": f"{type(e).__name__}: {e}"})
                rows.append(row)
                continue
            row.update({"epoch_best": result.best_epoch,
                        "precision": result.test_metrics["precision"],
                        "recall": result.test_metrics["recall"],
                        "fscore": result.test_metrics["fscore"],
                        "wall_seconds": time.perf_counter() - start})
            rows.append(row)
            seed_rows.append(row)
        for stat in ("mean", "std"):
            if not seed_rows:
                continue
            agg = {"run_id": cell["name"], "approach": cfg.loss.approach,
                   "modality": cfg.modality_mask, "init": cfg.init, "seed": stat,
                   "epoch_best": "", "wall_seconds": ""}
            for metric in ("precision", "recall", "fscore"):
                vals = np.array([r[metric] for r in seed_rows], dtype=np.float64)
                agg[metric] = (float(vals.mean()) if stat == "mean"
                               else float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
            rows.append(agg)
    if csv_path is not None:
        write_results_csv(csv_path, rows)
    return rows


def write_results_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def aggregate_fscore(rows: list[dict], cell_name: str) -> float:
    for row in rows:
        if row["run_id"] == cell_name and row["seed"] == "mean":
            return float(row["fscore"])
    raise KeyError(f"no aggregate row for {cell_name}")
