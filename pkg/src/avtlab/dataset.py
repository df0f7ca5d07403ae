"""Synthetic paired image/sound corpora with geographic bookkeeping.

Each scene owns an event profile (per-event Bernoulli rates), a visual
signature (blob anchor, color, texture frequency) and a coordinate cluster.
A sample draws its events, synthesizes a tone-mixture source recording,
extracts a random 10 s window, renders a 64x64 image, and lands at a jittered
coordinate inside its scene cluster.

Scene draws are intentionally unbalanced (class k weight ~ decay^k) so the
rebalancing path has something to do: classes below ``floor`` are dropped,
classes below ``low`` gain four offset clones per original, each with a
freshly extracted audio window and a newly rendered image.

All randomness is derived from per-sample seed sequences, so regeneration
from the same master seed is byte-identical and clones can replay their
original's source recording.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import audiofeat
from .errors import GenerationError, InputError, MediaIOError, SplitError

SAMPLE_RATE = audiofeat.SAMPLE_RATE
CLIP_SECONDS = 10.0
MIN_SOURCE_SECONDS = 2.0

TONE_BASE_HZ = 200.0
TONE_STEP_HZ = 150.0
TONE_AMP = 0.2
AUDIO_NOISE = 0.05
PIXEL_NOISE = 0.05
OFFSET_DEG = 0.01

# optional distractor tones at random frequencies; a clutter tone landing in
# an event's mel bin is indistinguishable from that event, so clutter caps
# recogniser quality and controls how hard the audio really is
CLUTTER_AMP = 0.12
CLUTTER_FMIN_HZ = 150.0
CLUTTER_FMAX_HZ = 4000.0

SPLITS = ("train", "val", "test")

# rng stream tags, per sample
_T_SCENE, _T_EVENTS, _T_SOURCE, _T_WINDOW, _T_COORDS, _T_IMAGE = range(6)
_T_CLONE_WINDOW = 20
_T_CLONE_IMAGE = 30
_T_SCENESPECS = 999983


@dataclass
class SceneSpec:
    scene_id: int
    name: str
    event_probs: np.ndarray          # (E,) Bernoulli rate per event
    blob_center: tuple[float, float]  # fractional (x, y) in image coords
    blob_color: tuple[float, float, float]
    texture_freq: float
    texture_angle: float
    cluster_center: tuple[float, float]  # (lat, lon)


@dataclass
class SampleRecord:
    id: str
    scene: int
    lat: float
    lon: float
    image: str
    audio: str
    events: list[int]
    split: str = ""
    teacher: list[float] | None = None

    @property
    def origin(self) -> str:
        """Pre-offset identity: clones share their original's origin."""
        return self.id.split("_")[0]

    def to_json(self) -> str:
        out = {"id": self.id, "scene": self.scene, "lat": self.lat,
               "lon": self.lon, "image": self.image, "audio": self.audio,
               "events": self.events, "split": self.split}
        if self.teacher is not None:
            out["teacher"] = self.teacher
        return json.dumps(out)

    @staticmethod
    def from_json(line: str) -> "SampleRecord":
        raw = json.loads(line)
        return SampleRecord(id=raw["id"], scene=raw["scene"], lat=raw["lat"],
                            lon=raw["lon"], image=raw["image"], audio=raw["audio"],
                            events=list(raw["events"]), split=raw.get("split", ""),
                            teacher=raw.get("teacher"))


@dataclass
class Manifest:
    records: list[SampleRecord]
    meta: dict
    root: Path | None = None

    def class_counts(self) -> list[int]:
        counts = [0] * int(self.meta["scenes"])
        for rec in self.records:
            counts[rec.scene] += 1
        return counts

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), *map(int, tags))))


def default_event_profile(scenes: int, events: int) -> np.ndarray:
    """Overlapping signature events, spread so every event stays common.

    Scene k leans on four consecutive events starting at round(k*E/K);
    neighbouring scenes share two or three of them, which keeps the
    audio-to-scene mapping genuinely ambiguous, while the spread keeps each
    event frequent enough that an event recogniser cannot score well by
    ignoring it.
    """
    probs = np.full((scenes, events), 0.05)
    for k in range(scenes):
        base = round(k * events / scenes)
        for j, strength in enumerate((0.9, 0.8, 0.65, 0.5)):
            i = (base + j) % events
            probs[k, i] = max(probs[k, i], strength)
    return probs


# Quadrant anchors in fractional image coordinates; scenes cycle through
# them, so datasets with more than four scenes contain visually confusable
# pairs that only color and texture frequency separate.
_ANCHORS = [(0.25, 0.25), (0.75, 0.75), (0.25, 0.75), (0.75, 0.25)]
_PALETTE = [(0.85, 0.25, 0.25), (0.25, 0.75, 0.35), (0.25, 0.40, 0.85),
            (0.85, 0.75, 0.25), (0.70, 0.30, 0.75), (0.30, 0.75, 0.75)]


def build_scene_specs(scenes: int, events: int, seed: int,
                      event_profile: np.ndarray | None = None,
                      visual_style: str = "varied") -> list[SceneSpec]:
    """Scene parameter sets. ``varied`` gives each scene its own color and
    texture frequency on top of a quadrant anchor; ``blob_only`` shares the
    background texture across scenes so the blob (color at its anchor) is the
    only visual evidence -- position itself cannot be the cue because the
    encoders end in global average pooling."""
    if visual_style not in ("varied", "blob_only"):
        raise GenerationError(f"unknown visual style {visual_style!r}")
    profile = (np.asarray(event_profile, dtype=np.float64)
               if event_profile is not None
               else default_event_profile(scenes, events))
    if profile.shape != (scenes, events):
        raise GenerationError(f"event profile shape {profile.shape} does not "
                              f"match ({scenes}, {events})")
    if np.any((profile < 0) | (profile > 1)) or not np.all(profile.max(axis=1) > 0):
        raise GenerationError("event profile rows must lie in [0,1] with a "
                              "positive entry per scene")
    rng = _rng(seed, _T_SCENESPECS)
    specs = []
    for k in range(scenes):
        if visual_style == "blob_only":
            color = _PALETTE[k % len(_PALETTE)]
            freq = 3.0
            angle = 0.6
        else:
            # signatures repeat after four scenes, so scenes k and k+4 are
            # visual twins: only their sound-event profiles tell them apart
            a = k % len(_ANCHORS)
            color = _PALETTE[a]
            freq = 2.0 + 1.7 * a
            angle = np.pi * a / len(_ANCHORS)
        specs.append(SceneSpec(
            scene_id=k,
            name=f"scene_{k:02d}",
            event_probs=profile[k],
            blob_center=_ANCHORS[k % len(_ANCHORS)],
            blob_color=color,
            texture_freq=freq,
            texture_angle=angle,
            cluster_center=(float(rng.uniform(-50, 50)), float(rng.uniform(-160, 160))),
        ))
    return specs


def extend_clip(samples: np.ndarray, rng: np.random.Generator,
                sample_rate: int = SAMPLE_RATE,
                min_dur: float = CLIP_SECONDS) -> np.ndarray | None:
    """Tile short content to at least ``min_dur`` and cut a random window.

    Returns None (a rejection marker) for content under 2 seconds.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < MIN_SOURCE_SECONDS * sample_rate:
        return None
    target = int(round(min_dur * sample_rate))
    reps = math.ceil(target / samples.size)
    tiled = np.tile(samples, reps)
    start = int(rng.integers(0, tiled.size - target + 1))
    return tiled[start:start + target]


def _synth_source(spec: SceneSpec, active: np.ndarray, rng: np.random.Generator,
                  clutter_tones: int = 0) -> np.ndarray:
    duration = float(rng.uniform(3.0, 14.0))
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    clip = rng.normal(0.0, AUDIO_NOISE, n)
    for i in np.flatnonzero(active):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        clip += TONE_AMP * np.sin(2.0 * np.pi * (TONE_BASE_HZ + TONE_STEP_HZ * i) * t + phase)
    for _ in range(clutter_tones):
        freq = rng.uniform(CLUTTER_FMIN_HZ, CLUTTER_FMAX_HZ)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        clip += CLUTTER_AMP * np.sin(2.0 * np.pi * freq * t + phase)
    return np.clip(clip, -1.0, 1.0)


def _render_image(spec: SceneSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Scene signature as float RGB in [0,1], shape (size, size, 3)."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ca, sa = np.cos(spec.texture_angle), np.sin(spec.texture_angle)
    texture = 0.42 + 0.10 * np.sin(2 * np.pi * spec.texture_freq * (ca * xx + sa * yy) + phase)
    img = np.repeat(texture[:, :, None], 3, axis=2)

    jitter = rng.uniform(-0.05, 0.05, 2)
    cx = (spec.blob_center[0] + jitter[0]) * size
    cy = (spec.blob_center[1] + jitter[1]) * size
    sigma = 0.12 * size
    bump = np.exp(-(((xx * size - cx) ** 2) + ((yy * size - cy) ** 2)) / (2 * sigma ** 2))
    color_jitter = rng.uniform(-0.08, 0.08, 3)
    for c in range(3):
        img[:, :, c] += (0.8 * spec.blob_color[c] + color_jitter[c]) * bump
    img += rng.normal(0.0, PIXEL_NOISE, img.shape)
    return np.clip(img, 0.0, 1.0)


def save_png(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise MediaIOError(f"missing image file {path}") from e


def _write_sample_media(root: Path, rec_id: str, spec: SceneSpec, active: np.ndarray,
                        seed: int, sample_index: int, image_size: int,
                        clutter_tones: int, window_rng, image_rng) -> tuple[str, str]:
    source = _synth_source(spec, active, _rng(seed, sample_index, _T_SOURCE),
                           clutter_tones=clutter_tones)
    window = extend_clip(source, window_rng)
    if window is None:
        raise GenerationError(f"sample {rec_id}: source under 2 s")
    audio_rel = f"media/audio/{rec_id}.wav"
    image_rel = f"media/images/{rec_id}.png"
    audiofeat.write_wav(root / audio_rel, window)
    save_png(root / image_rel, _render_image(spec, image_rng, image_size))
    return image_rel, audio_rel


def generate_synthetic(out_dir: str | Path, scenes: int, events: int, pairs: int,
                       seed: int, image_size: int = 64, class_decay: float = 0.7,
                       event_profile: np.ndarray | None = None,
                       visual_style: str = "varied",
                       clutter_tones: int = 0) -> Manifest:
    """Draw ``pairs`` samples and write their media under ``out_dir``.

    ``clutter_tones`` adds that many unlabeled distractor tones per clip,
    the knob controlling how hard event recognition is.
    """
    if scenes < 2 or events < 2:
        raise GenerationError("need at least two scenes and two events")
    if pairs < 10 * scenes:
        raise GenerationError(f"need at least {10 * scenes} pairs for {scenes} scenes")
    out_dir = Path(out_dir)
    (out_dir / "media" / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "media" / "images").mkdir(parents=True, exist_ok=True)

    specs = build_scene_specs(scenes, events, seed, event_profile, visual_style)
    weights = class_decay ** np.arange(scenes)
    weights /= weights.sum()

    records = []
    for i in range(pairs):
        rec_id = f"s{i:05d}"
        k = int(_rng(seed, i, _T_SCENE).choice(scenes, p=weights))
        spec = specs[k]
        active = (_rng(seed, i, _T_EVENTS).uniform(size=events) < spec.event_probs).astype(int)
        image_rel, audio_rel = _write_sample_media(
            out_dir, rec_id, spec, active, seed, i, image_size, clutter_tones,
            window_rng=_rng(seed, i, _T_WINDOW), image_rng=_rng(seed, i, _T_IMAGE))
        coords = _rng(seed, i, _T_COORDS).uniform(-4.0, 4.0, 2)
        records.append(SampleRecord(
            id=rec_id, scene=k,
            lat=round(spec.cluster_center[0] + coords[0], 6),
            lon=round(spec.cluster_center[1] + coords[1], 6),
            image=image_rel, audio=audio_rel, events=[int(v) for v in active]))

    meta = {"scenes": scenes, "events": events, "pairs": pairs, "seed": seed,
            "image_size": image_size, "class_decay": class_decay,
            "visual_style": visual_style, "clutter_tones": clutter_tones,
            "event_profile": (np.asarray(event_profile).tolist()
                              if event_profile is not None else None)}
    manifest = Manifest(records=records, meta=meta, root=out_dir)
    counts = manifest.class_counts()
    if any(c == 0 for c in counts):
        raise GenerationError(f"class minimums unsatisfiable: counts {counts}")
    meta["class_counts"] = counts
    return manifest


_DIRECTIONS = (("n", OFFSET_DEG, 0.0), ("s", -OFFSET_DEG, 0.0),
               ("e", 0.0, OFFSET_DEG), ("w", 0.0, -OFFSET_DEG))


def balance_by_offset(manifest: Manifest, low: int = 100, floor: int = 10) -> Manifest:
    """Drop classes under ``floor``; clone classes under ``low`` four ways.

    Each clone sits at a +-0.01 degree offset, replays its original's source
    recording to extract a fresh 10 s window, and renders a new image.
    """
    if manifest.root is None:
        raise InputError("manifest has no root directory for media")
    meta = manifest.meta
    seed = int(meta["seed"])
    image_size = int(meta["image_size"])
    clutter_tones = int(meta.get("clutter_tones", 0))
    specs = build_scene_specs(int(meta["scenes"]), int(meta["events"]), seed,
                              meta.get("event_profile"),
                              meta.get("visual_style", "varied"))
    counts = manifest.class_counts()

    records: list[SampleRecord] = []
    for rec in manifest.records:
        if counts[rec.scene] < floor:
            continue
        records.append(rec)
        if counts[rec.scene] >= low:
            continue
        i = int(rec.origin[1:])
        active = np.asarray(rec.events)
        for d, (tag, dlat, dlon) in enumerate(_DIRECTIONS):
            clone_id = f"{rec.id}_{tag}"
            image_rel, audio_rel = _write_sample_media(
                manifest.root, clone_id, specs[rec.scene], active, seed, i,
                image_size, clutter_tones,
                window_rng=_rng(seed, i, _T_CLONE_WINDOW + d),
                image_rng=_rng(seed, i, _T_CLONE_IMAGE + d))
            records.append(SampleRecord(
                id=clone_id, scene=rec.scene,
                lat=round(rec.lat + dlat, 6), lon=round(rec.lon + dlon, 6),
                image=image_rel, audio=audio_rel, events=list(rec.events)))

    out = Manifest(records=records, meta=dict(meta), root=manifest.root)
    out.meta["class_counts"] = out.class_counts()
    return out


def split_disjoint(manifest: Manifest, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
                   seed: int = 0) -> Manifest:
    """Assign whole coordinate groups to train/val/test, stratified by class.

    Offset clones share their original's group and never straddle splits.
    Overall split sizes land within max(2% of records, largest group) of the
    requested ratios.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios {ratios} do not sum to 1")
    total = len(manifest.records)
    if total == 0:
        raise SplitError("empty manifest")

    groups: dict[str, list[SampleRecord]] = {}
    for rec in manifest.records:
        groups.setdefault(rec.origin, []).append(rec)
    max_group = max(len(g) for g in groups.values())
    capacity = max(ratios) * total + max(0.02 * total, max_group)
    for origin, members in groups.items():
        if len(members) > capacity:
            raise SplitError(f"group {origin} ({len(members)} records) exceeds "
                             f"every split's capacity")

    by_class: dict[int, list[str]] = {}
    for origin, members in sorted(groups.items()):
        by_class.setdefault(members[0].scene, []).append(origin)

    assignment: dict[str, str] = {}
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5B117)))
    for cls in sorted(by_class):
        origins = by_class[cls]
        order = rng.permutation(len(origins))
        cls_total = sum(len(groups[o]) for o in origins)
        targets = np.array(ratios) * cls_total
        assigned = np.zeros(3)
        for idx in order:
            origin = origins[idx]
            deficits = targets - assigned
            s = int(np.argmax(deficits))
            assignment[origin] = SPLITS[s]
            assigned[s] += len(groups[origin])

    records = []
    for rec in manifest.records:
        records.append(SampleRecord(**{**rec.__dict__, "split": assignment[rec.origin]}))
    out = Manifest(records=records, meta=dict(manifest.meta), root=manifest.root)

    sizes = {s: len(out.split_records(s)) for s in SPLITS}
    slack = max(0.02 * total, max_group)
    for s, ratio in zip(SPLITS, ratios):
        if abs(sizes[s] - ratio * total) > slack:
            raise SplitError(f"split {s} has {sizes[s]} records, target "
                             f"{ratio * total:.1f} +- {slack:.1f}")
    return out


def build_dataset(out_dir: str | Path, scenes: int, events: int, pairs: int, seed: int,
                  image_size: int = 64, class_decay: float = 0.7,
                  balance_low: int = 100, balance_floor: int = 10,
                  ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
                  event_profile: np.ndarray | None = None,
                  visual_style: str = "varied",
                  clutter_tones: int = 0) -> Manifest:
    """generate -> balance -> split -> save, the full dataset pipeline."""
    manifest = generate_synthetic(out_dir, scenes, events, pairs, seed,
                                  image_size=image_size, class_decay=class_decay,
                                  event_profile=event_profile,
                                  visual_style=visual_style,
                                  clutter_tones=clutter_tones)
    manifest = balance_by_offset(manifest, low=balance_low, floor=balance_floor)
    manifest = split_disjoint(manifest, ratios=ratios, seed=seed)
    save_manifest(manifest)
    return manifest


def save_manifest(manifest: Manifest, path: str | Path | None = None) -> Path:
    if path is None:
        if manifest.root is None:
            raise InputError("no path given and manifest has no root")
        path = manifest.root / "manifest.jsonl"
    path = Path(path)
    with open(path, "w") as fh:
        for rec in manifest.records:
            fh.write(rec.to_json() + "\n")
    with open(path.parent / "dataset.json", "w") as fh:
        json.dump(manifest.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(SampleRecord.from_json(line))
    meta_path = path.parent / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Manifest(records=records, meta=meta, root=path.parent)
