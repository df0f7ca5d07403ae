"""Training objectives.

The main task is scene cross-entropy. Three families of transfer terms feed
sound-event knowledge into it:

* distillation of recorded teacher event probabilities into a student event
  head, as a sum of binary KL divergences C(p||q) with the student tempered
  by ``tau`` (``kl_*``), or as the squared Euclidean distance between
  pre-activations (``sq_*``) -- the high-temperature limit of the former;
* an explicit scene-to-event route: per-scene posteriors p(e|s_k) mixed by
  the predicted scene distribution give a compound event distribution p(e),
  which is aligned with the teacher's per-sample probabilities (first term)
  and with the event-relevance direction of the true scene (second term,
  cosine distance against the dominant eigenvector of that scene's Gram
  matrix of per-sample event probability rows).

Vector inputs are one sample and reduce by summing over events; matrix
inputs are batches and reduce by the mean over rows of those sums.
Gradients flow only through the student/scene side; teacher probabilities
and posterior tables are constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .config import LossConfig
from .errors import (DegenerateInputError, DomainError, InputError,
                     MissingPosteriorsError, ShapeError, TableError)
from .linalg import power_iteration
from .tensor import Tensor

PROB_CLAMP = 1e-7  # teacher probabilities before logit inversion


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_probs(arr: np.ndarray, name: str) -> None:
    if np.any((arr < 0) | (arr > 1)):
        raise DomainError(f"{name} outside [0, 1]")


def binary_kl(p, q) -> Tensor:
    """Elementwise KL between Bernoulli(p) and Bernoulli(q).

    C(p, q) = p ln(p/q) + (1-p) ln((1-p)/(1-q)), with both arguments of every
    log clamped at the global floor, so saturated probabilities stay finite.
    """
    p, q = _const(p), _const(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"binary_kl shapes differ: {p.data.shape} vs {q.data.shape}")
    _check_probs(p.data, "p")
    _check_probs(q.data, "q")
    one = Tensor(1.0)
    left = tz.mul(p, tz.sub(tz.log(p), tz.log(q)))
    right = tz.mul(tz.sub(one, p), tz.sub(tz.log(tz.sub(one, p)), tz.log(tz.sub(one, q))))
    return tz.add(left, right)


def _reduce_eventwise(c: Tensor) -> Tensor:
    """Sum over events; mean over the batch when there is one."""
    if c.data.ndim == 1:
        return tz.tsum(c)
    if c.data.ndim == 2:
        return tz.tmean(tz.tsum(c, axis=1))
    raise ShapeError(f"expected a vector or a batch of vectors, got {c.data.shape}")


def scene_ce(scene_logits: Tensor, labels) -> Tensor:
    """Cross-entropy -log softmax(logits)[t]; mean over a batch."""
    scene_logits = _const(scene_logits)
    single = scene_logits.data.ndim == 1
    logits = tz.reshape(scene_logits, (1, -1)) if single else scene_logits
    if logits.data.ndim != 2:
        raise ShapeError(f"scene logits must be 1-d or 2-d, got {scene_logits.data.shape}")
    n, k = logits.data.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any((labels < 0) | (labels >= k)):
        raise DomainError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = tz.tsum(tz.mul(tz.softmax(logits), Tensor(onehot)), axis=1)
    return tz.scale(tz.tmean(tz.log(picked)), -1.0)


def kl_distill(teacher_probs, student_logits, tau: float = 1.0) -> Tensor:
    """Sum of binary KLs between recorded teacher probabilities and the
    tempered student sigmoid; the teacher side is used as recorded."""
    if tau <= 0:
        raise DomainError("temperature must be > 0")
    teacher = _const(teacher_probs)
    student = _const(student_logits)
    if teacher.data.shape != student.data.shape:
        raise ShapeError(f"teacher {teacher.data.shape} vs student "
                         f"{student.data.shape}")
    q = tz.sigmoid(tz.scale(student, 1.0 / tau))
    return _reduce_eventwise(binary_kl(teacher, q))


def sq_distill(teacher_pre, student_pre) -> Tensor:
    """Squared Euclidean distance between pre-activations."""
    a, b = _const(teacher_pre), _const(student_pre)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"pre-activation shapes differ: {a.data.shape} vs {b.data.shape}")
    d = tz.sub(a, b)
    return _reduce_eventwise(tz.mul(d, d))


def prob_to_logit(p: np.ndarray) -> np.ndarray:
    """Invert a recorded sigmoid probability back to its pre-activation."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# explicit scene-event relation

@dataclass
class ScenePosteriorTable:
    """Per-scene event marginals and event-relevance directions.

    ``posteriors`` row k is the mean teacher event-probability vector over
    the scene's training samples; ``relevance`` row k is the unit dominant
    eigenvector of the Gram matrix of those per-sample rows.
    """

    posteriors: np.ndarray   # (K, E)
    counts: np.ndarray       # (K,)
    relevance: np.ndarray    # (K, E), unit rows, entrywise >= 0

    @property
    def scenes(self) -> int:
        return self.posteriors.shape[0]

    @property
    def events(self) -> int:
        return self.posteriors.shape[1]

    def save(self, path: str | Path) -> None:
        payload = {"posteriors": self.posteriors.tolist(),
                   "counts": self.counts.tolist(),
                   "relevance": self.relevance.tolist(),
                   "events": self.events}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @staticmethod
    def load(path: str | Path) -> "ScenePosteriorTable":
        path = Path(path)
        if not path.exists():
            raise MissingPosteriorsError(f"posterior table not found: {path}")
        raw = json.loads(path.read_text())
        return ScenePosteriorTable(
            posteriors=np.asarray(raw["posteriors"], dtype=np.float64),
            counts=np.asarray(raw["counts"], dtype=np.int64),
            relevance=np.asarray(raw["relevance"], dtype=np.float64))


def scene_posteriors(records, scenes: int) -> ScenePosteriorTable:
    """Build the table from training records carrying cached teacher probs."""
    rows: dict[int, list[np.ndarray]] = {k: [] for k in range(scenes)}
    for rec in records:
        if rec.split != "train":
            continue
        if rec.teacher is None:
            raise TableError(f"record {rec.id} has no cached teacher "
                             f"probabilities; pretrain the teacher first")
        rows[rec.scene].append(np.asarray(rec.teacher, dtype=np.float64))
    empty = [k for k, v in rows.items() if not v]
    if empty:
        raise TableError(f"scenes without training samples: {empty}")

    posteriors, counts, relevance = [], [], []
    for k in range(scenes):
        stacked = np.vstack(rows[k])
        _check_probs(stacked, f"teacher probabilities for scene {k}")
        posteriors.append(stacked.mean(axis=0))
        counts.append(stacked.shape[0])
        _, d = power_iteration(stacked.T @ stacked)
        relevance.append(d)
    return ScenePosteriorTable(posteriors=np.array(posteriors),
                               counts=np.array(counts, dtype=np.int64),
                               relevance=np.array(relevance))


def compound_event_dist(scene_probs, table: ScenePosteriorTable) -> Tensor:
    """p(e) = sum_k p(s_k) p(e|s_k): the mixture of posterior rows."""
    sp = _const(scene_probs)
    single = sp.data.ndim == 1
    mat = tz.reshape(sp, (1, -1)) if single else sp
    if mat.data.ndim != 2 or mat.data.shape[1] != table.scenes:
        raise ShapeError(f"scene probabilities {sp.data.shape} do not match "
                         f"{table.scenes} scenes")
    sums = mat.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise DomainError("scene probabilities must sum to 1")
    out = tz.matmul(mat, Tensor(table.posteriors))
    return tz.reshape(out, (-1,)) if single else out


def l_e1(teacher_probs, scene_probs, table: ScenePosteriorTable) -> Tensor:
    """Align the compound event distribution with the teacher's soft responses."""
    return _reduce_eventwise(binary_kl(_const(teacher_probs),
                                       compound_event_dist(scene_probs, table)))


def _cosine_distance(direction: np.ndarray, p_e: Tensor) -> Tensor:
    """1 - cos(direction, p_e), row-wise; mean over a batch."""
    single = p_e.data.ndim == 1
    mat = tz.reshape(p_e, (1, -1)) if single else p_e
    d = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    if d.shape != mat.data.shape:
        raise ShapeError(f"direction {d.shape} does not match {mat.data.shape}")
    pnorm_sq = tz.tsum(tz.mul(mat, mat), axis=1)
    if np.any(pnorm_sq.data <= 0.0):
        raise DegenerateInputError("event distribution is all-zero")
    dnorm = np.linalg.norm(d, axis=1)
    if np.any(dnorm == 0.0):
        raise DegenerateInputError("relevance direction is all-zero")
    dot = tz.tsum(tz.mul(mat, Tensor(d)), axis=1)
    sim = tz.div(dot, tz.mul(tz.sqrt(pnorm_sq), Tensor(dnorm)))
    return tz.tmean(tz.sub(Tensor(np.ones(mat.data.shape[0])), sim))


def l_e2(d_t, p_e) -> Tensor:
    """Cosine distance between the true scene's event relevance and p(e)."""
    return _cosine_distance(np.asarray(d_t, dtype=np.float64), _const(p_e))


def l_e(teacher_probs, scene_probs, labels, table: ScenePosteriorTable,
        beta: float) -> Tensor:
    """First-term alignment plus beta times the relevance cosine term."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any((labels < 0) | (labels >= table.scenes)):
        raise DomainError("scene label out of range")
    p_e = compound_event_dist(scene_probs, table)
    first = _reduce_eventwise(binary_kl(_const(teacher_probs), p_e))
    directions = table.relevance[labels]
    if p_e.data.ndim == 1:
        directions = directions[0]
    second = _cosine_distance(directions, p_e)
    return tz.add(first, tz.scale(second, beta))


def total_loss(scene_logits: Tensor, event_logits: Tensor | None, labels,
               teacher_probs, cfg: LossConfig,
               table: ScenePosteriorTable | None = None) -> Tensor:
    """Scene loss plus alpha times the configured transfer term.

    ``event_logits`` must already come from the head the approach targets
    (audio-only for ``*_na``, fused for ``*_nva``). With
    ``include_scene_loss`` off, the transfer term alone is the objective.
    """
    cfg.validate()
    approach = cfg.approach
    if approach == "none" or (cfg.alpha == 0.0 and cfg.include_scene_loss):
        return scene_ce(scene_logits, labels)

    if approach in ("kl_na", "kl_nva", "sq_na", "sq_nva"):
        if event_logits is None:
            raise InputError(f"approach {approach} needs event logits")
        if teacher_probs is None:
            raise InputError(f"approach {approach} needs teacher probabilities")
        if approach.startswith("kl"):
            term = kl_distill(teacher_probs, event_logits, cfg.temperature)
        else:
            term = sq_distill(prob_to_logit(np.asarray(teacher_probs)), event_logits)
    elif approach == "le":
        if table is None:
            raise MissingPosteriorsError("approach le needs a posterior table")
        if teacher_probs is None:
            raise InputError("approach le needs teacher probabilities")
        term = l_e(teacher_probs, tz.softmax(scene_logits), labels, table, cfg.beta)
    else:  # pragma: no cover - guarded by validate()
        raise InputError(f"unknown approach {approach}")

    if not cfg.include_scene_loss:
        return term
    return tz.add(scene_ce(scene_logits, labels), tz.scale(term, cfg.alpha))
