"""Scene metrics and event-distribution exports.

Metrics are weighted-averaging precision/recall/F-score: per-class values
averaged with true-class support as weights, with 0/0 defined as 0. Argmax
ties break toward the lowest class index.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import tensor as tz
from .errors import InputError
from .features import FeatureStore
from .losses import ScenePosteriorTable
from .models import FusionModel
from .tensor import Tensor


def confusion_matrix(true_labels, pred_labels, scenes: int) -> np.ndarray:
    cm = np.zeros((scenes, scenes), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        cm[int(t), int(p)] += 1
    return cm


def weighted_prf(cm: np.ndarray) -> tuple[float, float, float, list[dict]]:
    """Support-weighted precision/recall/F plus the per-class table."""
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total == 0:
        raise InputError("confusion matrix must be square with at least one sample")
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)

    def _safe(num, den):
        return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64),
                         where=den > 0)

    precision = _safe(tp, predicted)
    recall = _safe(tp, support)
    fscore = _safe(2 * precision * recall, precision + recall)
    weights = support / total
    per_class = [{"class": k, "support": int(support[k]),
                  "precision": float(precision[k]), "recall": float(recall[k]),
                  "fscore": float(fscore[k])} for k in range(cm.shape[0])]
    return (float(weights @ precision), float(weights @ recall),
            float(weights @ fscore), per_class)


def predict_scenes(model: FusionModel, records, store: FeatureStore,
                   normalizer, mask: str = "none",
                   batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images, audio = store.batch(chunk, normalizer)
        with tz.no_grad():
            out = model.forward(images, audio, mask=mask)
        preds.append(np.argmax(out.scene_logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(model: FusionModel, records, store: FeatureStore, normalizer,
             mask: str = "none", batch_size: int = 64
             ) -> tuple[np.ndarray, dict]:
    """Confusion matrix plus weighted metrics over the given records."""
    if not records:
        raise InputError("no records to evaluate")
    preds = predict_scenes(model, records, store, normalizer, mask, batch_size)
    cm = confusion_matrix([r.scene for r in records], preds, model.dims.scenes)
    p, r, f, per_class = weighted_prf(cm)
    return cm, {"precision": p, "recall": r, "fscore": f, "per_class": per_class}


def export_event_embeddings(model: FusionModel, records, store: FeatureStore,
                            normalizer, mask: str = "none",
                            table: ScenePosteriorTable | None = None,
                            batch_size: int = 64
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Per-record predicted event distributions plus scene labels.

    With a posterior table the rows are the compound distribution of the
    predicted scene probabilities; otherwise the sigmoid of the event head.
    """
    rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images, audio = store.batch(chunk, normalizer)
        with tz.no_grad():
            out = model.forward(images, audio, mask=mask)
            if table is not None:
                probs = tz.softmax(out.scene_logits).data
                rows.append(probs @ table.posteriors)
            else:
                rows.append(tz.sigmoid(out.event_logits).data)
    labels = np.array([r.scene for r in records], dtype=np.int64)
    return np.vstack(rows), labels


def write_embeddings_csv(path: str | Path, rows: np.ndarray,
                         labels: np.ndarray) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene"] + [f"e_{i}" for i in range(rows.shape[1])])
        for label, row in zip(labels, rows):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def write_confusion_csv(path: str | Path, cm: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(cm):
            writer.writerow([int(v) for v in row])
