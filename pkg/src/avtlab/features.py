"""In-memory media cache: decoded images and raw log-mel matrices per record.

Computed once per dataset and shared across runs; per-run normalisation is
applied on top when batches are assembled. Images map to [-1, 1] channel
first; audio stays raw until a split-specific normalizer exists.
"""

from __future__ import annotations

import numpy as np

from . import audiofeat
from .dataset import Manifest, load_png
from .errors import MediaIOError


class FeatureStore:
    def __init__(self, images: dict[str, np.ndarray], logmel: dict[str, np.ndarray]):
        self.images = images
        self.logmel = logmel

    @staticmethod
    def build(manifest: Manifest) -> "FeatureStore":
        if manifest.root is None:
            raise MediaIOError("manifest has no root directory")
        images: dict[str, np.ndarray] = {}
        logmel: dict[str, np.ndarray] = {}
        for rec in manifest.records:
            try:
                img = load_png(manifest.root / rec.image)
                samples, rate = audiofeat.read_wav(manifest.root / rec.audio)
            except MediaIOError as e:
                raise MediaIOError(f"record {rec.id}: {e}") from e
            images[rec.id] = np.ascontiguousarray(
                (img.transpose(2, 0, 1) - 0.5) / 0.5)
            logmel[rec.id] = audiofeat.clip_features(samples, rate)
        return FeatureStore(images, logmel)

    def batch(self, records, normalizer: audiofeat.Normalizer | None
              ) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N,3,H,W) images and (N,T,F) normalised audio features."""
        imgs = np.stack([self.images[r.id] for r in records])
        mels = np.stack([self.logmel[r.id] for r in records])
        if normalizer is not None:
            mels = normalizer.apply(mels)
        return imgs, mels

    def fit_normalizer(self, records) -> audiofeat.Normalizer:
        return audiofeat.fit_normalizer([self.logmel[r.id] for r in records])
