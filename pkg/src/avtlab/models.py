"""The networks: visual and audio encoders, fusion heads, frozen teacher, CAM.

Encoders are stacks of stride-2 3x3 conv + relu blocks ending in global
average pooling, so a D-channel final block yields a D-vector per input and
a D x h x w activation grid for class activation maps. The fusion model
concatenates both encoder outputs and applies affine heads: a scene head
(consumed through softmax) and an event head (consumed through sigmoid).

A masked modality contributes a zero feature vector and is never executed,
so its branch receives no gradients at all; with the matching half of the
scene head zeroed this is exactly the unimodal model on the other branch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .errors import DomainError, InputError, ShapeError, StateError
from .tensor import Tensor
from .tensorio import load_tensor, save_tensor

AUDIO_HEAD_APPROACHES = ("kl_na", "sq_na")


def encoder_channels(depth: int, out_dim: int) -> list[int]:
    return [max(4, out_dim >> (depth - 1 - i)) for i in range(depth)]


class Encoder:
    """Conv blocks halving the spatial grid each step, then global pooling."""

    def __init__(self, in_channels: int, depth: int, out_dim: int,
                 rng: np.random.Generator, prefix: str):
        if depth < 1:
            raise ShapeError("encoder depth must be >= 1")
        chans = encoder_channels(depth, out_dim)
        if chans[-1] != out_dim:
            raise ShapeError(f"feature dim {out_dim} too small for depth {depth}")
        self.prefix = prefix
        self.blocks: list[tuple[Tensor, Tensor]] = []
        prev = in_channels
        for i, ch in enumerate(chans):
            std = np.sqrt(2.0 / (prev * 9))
            w = Tensor(rng.normal(0.0, std, (ch, prev, 3, 3)), requires_grad=True)
            b = Tensor(np.zeros(ch), requires_grad=True)
            self.blocks.append((w, b))
            prev = ch
        self.out_dim = out_dim

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (features, final activation maps)."""
        h = x
        for w, b in self.blocks:
            h = tz.relu(tz.add_channel_bias(tz.conv2d(h, w, stride=2), b))
        return tz.global_avg_pool(h), h

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.blocks):
            out.append((f"{self.prefix}.block{i}.w", w))
            out.append((f"{self.prefix}.block{i}.b", b))
        return out

    def copy_from(self, other: "Encoder") -> None:
        if len(self.blocks) != len(other.blocks):
            raise StateError("encoder depths differ")
        for (w, b), (ow, ob) in zip(self.blocks, other.blocks):
            if w.data.shape != ow.data.shape:
                raise StateError("encoder channel layouts differ")
            w.data = ow.data.copy()
            b.data = ob.data.copy()


@dataclass
class ModelDims:
    scenes: int
    events: int
    feature_dim: int = 64
    image_depth: int = 4
    audio_depth: int = 5


@dataclass
class ForwardResult:
    scene_logits: Tensor
    event_logits: Tensor | None
    visual_maps: Tensor | None


class FusionModel:
    """Visual + audio encoders with scene and event heads.

    ``event_head`` selects which representation feeds the event head:
    ``fused`` (the concatenation) or ``audio`` (the audio features alone).
    Heads start at zero, so an untrained model predicts uniform scenes.
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator,
                 event_head: str = "fused"):
        if event_head not in ("fused", "audio"):
            raise InputError(f"unknown event head {event_head!r}")
        d = dims.feature_dim
        self.dims = dims
        self.event_head = event_head
        self.visual = Encoder(3, dims.image_depth, d, rng, "visual")
        self.audio = Encoder(1, dims.audio_depth, d, rng, "audio")
        self.scene_w = Tensor(np.zeros((2 * d, dims.scenes)), requires_grad=True)
        self.scene_b = Tensor(np.zeros(dims.scenes), requires_grad=True)
        event_in = d if event_head == "audio" else 2 * d
        self.event_w = Tensor(np.zeros((event_in, dims.events)), requires_grad=True)
        self.event_b = Tensor(np.zeros(dims.events), requires_grad=True)

    def init_from_teacher(self, teacher: "FrozenTeacher") -> None:
        """Start the audio pathway at the pretrained teacher's weights."""
        self.audio.copy_from(teacher.encoder)
        d = self.dims.feature_dim
        if teacher.event_w.data.shape != (d, self.dims.events):
            raise StateError("teacher head does not match model dimensions")
        if self.event_head == "audio":
            self.event_w.data = teacher.event_w.data.copy()
        else:
            self.event_w.data = np.vstack([np.zeros((d, self.dims.events)),
                                           teacher.event_w.data])
        self.event_b.data = teacher.event_b.data.copy()

    def forward(self, images: np.ndarray | None, audio_feats: np.ndarray | None,
                mask: str = "none") -> ForwardResult:
        """Run the fusion pathway; a masked branch contributes zeros."""
        if mask not in ("none", "image_only", "sound_only"):
            raise InputError(f"unknown modality mask {mask!r}")
        d = self.dims.feature_dim
        maps = None
        if mask == "sound_only":
            n = audio_feats.shape[0]
            v_feat = Tensor(np.zeros((n, d)))
        else:
            if images.ndim != 4 or images.shape[1] != 3:
                raise ShapeError(f"images must be (N,3,H,W), got {images.shape}")
            v_feat, maps = self.visual.forward(Tensor(images))
        if mask == "image_only":
            n = images.shape[0]
            a_feat = Tensor(np.zeros((n, d)))
        else:
            if audio_feats.ndim != 3:
                raise ShapeError(f"audio features must be (N,T,F), got {audio_feats.shape}")
            a_feat, _ = self.audio.forward(Tensor(audio_feats[:, None, :, :]))

        fused = tz.concat([v_feat, a_feat], axis=1)
        scene_logits = tz.add(tz.matmul(fused, self.scene_w), self.scene_b)
        event_in = a_feat if self.event_head == "audio" else fused
        event_logits = tz.add(tz.matmul(event_in, self.event_w), self.event_b)
        return ForwardResult(scene_logits=scene_logits, event_logits=event_logits,
                             visual_maps=maps)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (self.visual.parameters() + self.audio.parameters() +
                [("scene.w", self.scene_w), ("scene.b", self.scene_b),
                 ("event.w", self.event_w), ("event.b", self.event_b)])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            if name not in state:
                raise StateError(f"checkpoint missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise StateError(f"parameter {name} shape mismatch")
            p.data = state[name].copy()


def build_model(dims: ModelDims, approach: str, seed: int,
                teacher: "FrozenTeacher | None" = None,
                init: str = "pretrained_teacher") -> FusionModel:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x3E7)))
    head = "audio" if approach in AUDIO_HEAD_APPROACHES else "fused"
    model = FusionModel(dims, rng, event_head=head)
    if init == "pretrained_teacher":
        if teacher is None:
            raise StateError("pretrained_teacher init requires a teacher snapshot")
        model.init_from_teacher(teacher)
    return model


# ---------------------------------------------------------------------------
# the frozen teacher

class AudioEventNet:
    """Trainable audio encoder + event head used for teacher pretraining."""

    def __init__(self, events: int, feature_dim: int, depth: int,
                 rng: np.random.Generator):
        self.encoder = Encoder(1, depth, feature_dim, rng, "audio")
        self.event_w = Tensor(np.zeros((feature_dim, events)), requires_grad=True)
        self.event_b = Tensor(np.zeros(events), requires_grad=True)

    def forward(self, audio_feats: np.ndarray) -> Tensor:
        feats, _ = self.encoder.forward(Tensor(audio_feats[:, None, :, :]))
        return tz.add(tz.matmul(feats, self.event_w), self.event_b)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.encoder.parameters() + [("event.w", self.event_w),
                                            ("event.b", self.event_b)]


class FrozenTeacher:
    """Immutable audio event recogniser supplying distillation targets."""

    def __init__(self, encoder: Encoder, event_w: np.ndarray, event_b: np.ndarray):
        for _, p in encoder.parameters():
            p.requires_grad = False
        self.encoder = encoder
        self.event_w = Tensor(event_w)
        self.event_b = Tensor(event_b)
        self.snapshot_id = self._checksum()

    @staticmethod
    def from_net(net: AudioEventNet) -> "FrozenTeacher":
        rng = np.random.default_rng(0)
        depth = len(net.encoder.blocks)
        enc = Encoder(1, depth, net.encoder.out_dim, rng, "audio")
        enc.copy_from(net.encoder)
        return FrozenTeacher(enc, net.event_w.data.copy(), net.event_b.data.copy())

    def _checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.parameters():
            digest.update(name.encode())
            digest.update(p.data.tobytes())
        return digest.hexdigest()[:16]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.encoder.parameters() + [("event.w", self.event_w),
                                            ("event.b", self.event_b)]

    def predict_logits(self, audio_feats: np.ndarray) -> np.ndarray:
        with tz.no_grad():
            feats, _ = self.encoder.forward(Tensor(audio_feats[:, None, :, :]))
            out = tz.add(tz.matmul(feats, self.event_w), self.event_b)
        return out.data

    def predict(self, audio_feats: np.ndarray) -> np.ndarray:
        """Sigmoid event probabilities for (N, T, F) audio features."""
        with tz.no_grad():
            logits = self.predict_logits(audio_feats)
            return tz.sigmoid(Tensor(logits)).data

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, p in self.parameters():
            save_tensor(out_dir / f"{name}.avtl", p.data)
        desc = {"kind": "teacher", "snapshot_id": self.snapshot_id,
                "events": int(self.event_b.data.shape[0]),
                "feature_dim": self.encoder.out_dim,
                "depth": len(self.encoder.blocks)}
        (out_dir / "descriptor.json").write_text(json.dumps(desc, indent=2) + "\n")

    @staticmethod
    def load(out_dir: str | Path) -> "FrozenTeacher":
        out_dir = Path(out_dir)
        desc_path = out_dir / "descriptor.json"
        if not desc_path.exists():
            raise StateError(f"no teacher snapshot at {out_dir}")
        desc = json.loads(desc_path.read_text())
        rng = np.random.default_rng(0)
        enc = Encoder(1, desc["depth"], desc["feature_dim"], rng, "audio")
        for name, p in enc.parameters():
            p.data = load_tensor(out_dir / f"{name}.avtl")
        teacher = FrozenTeacher(enc, load_tensor(out_dir / "event.w.avtl"),
                                load_tensor(out_dir / "event.b.avtl"))
        if teacher.snapshot_id != desc["snapshot_id"]:
            raise StateError("teacher snapshot checksum mismatch")
        return teacher


# ---------------------------------------------------------------------------
# class activation maps

def cam(class_idx: int, visual_maps: np.ndarray, scene_w: np.ndarray,
        feature_dim: int) -> np.ndarray:
    """Weight the final visual maps by the class's scene-head coefficients.

    Only the visual half of the scene head participates. The heat map is
    min-max normalised to [0, 1]; a flat map is defined as all zeros.
    """
    if visual_maps.ndim != 3:
        raise ShapeError(f"expected (D,h,w) maps, got {visual_maps.shape}")
    if not 0 <= class_idx < scene_w.shape[1]:
        raise DomainError(f"class {class_idx} out of range")
    weights = scene_w[:feature_dim, class_idx]
    if weights.shape[0] != visual_maps.shape[0]:
        raise ShapeError("scene head does not match map channels")
    heat = np.tensordot(weights, visual_maps, axes=1)
    lo, hi = heat.min(), heat.max()
    if hi - lo < 1e-12:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# model checkpoints

def save_checkpoint(model: FusionModel, out_dir: str | Path,
                    extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, p in model.parameters():
        save_tensor(out_dir / f"{name}.avtl", p.data)
    desc = {"kind": "fusion", "event_head": model.event_head,
            "scenes": model.dims.scenes, "events": model.dims.events,
            "feature_dim": model.dims.feature_dim,
            "image_depth": model.dims.image_depth,
            "audio_depth": model.dims.audio_depth}
    if extra:
        desc.update(extra)
    (out_dir / "descriptor.json").write_text(json.dumps(desc, indent=2) + "\n")


def load_checkpoint(out_dir: str | Path) -> tuple[FusionModel, dict]:
    out_dir = Path(out_dir)
    desc_path = out_dir / "descriptor.json"
    if not desc_path.exists():
        raise StateError(f"no checkpoint at {out_dir}")
    desc = json.loads(desc_path.read_text())
    dims = ModelDims(scenes=desc["scenes"], events=desc["events"],
                     feature_dim=desc["feature_dim"],
                     image_depth=desc["image_depth"],
                     audio_depth=desc["audio_depth"])
    model = FusionModel(dims, np.random.default_rng(0),
                        event_head=desc["event_head"])
    state = {name: load_tensor(out_dir / f"{name}.avtl")
             for name, _ in model.parameters()}
    model.load_state_arrays(state)
    return model, desc
