import numpy as np
import pytest

from avtlab import tensor as tz
from avtlab.models import FusionModel, ModelDims

# spatial sizes for the tiny gradient-check instances
TINY_IMAGE = 8
TINY_AUDIO = (12, 8)


def tiny_instance(seed, scenes=3, events=4, feature_dim=4, batch=2,
                  min_relu_margin=1e-3):
    """A small random fusion model plus batch, resampled until every relu
    input sits away from its kink (central differences are unreliable there)."""
    for attempt in range(50):
        rng = np.random.default_rng((seed, attempt))
        dims = ModelDims(scenes=scenes, events=events, feature_dim=feature_dim,
                         image_depth=2, audio_depth=2)
        model = FusionModel(dims, rng)
        # heads start at zero; give every parameter a nonzero value so the
        # checked gradients are generic
        for _, p in model.parameters():
            p.data = rng.uniform(-0.6, 0.6, p.data.shape)
        images = rng.uniform(-1, 1, (batch, 3, TINY_IMAGE, TINY_IMAGE))
        audio = rng.uniform(-1, 1, (batch, *TINY_AUDIO))
        labels = rng.integers(0, scenes, batch)
        teacher = rng.uniform(0.15, 0.85, (batch, events))

        tz._relu_margin_probe = [np.inf]
        try:
            model.forward(images, audio)
            margin = tz._relu_margin_probe[0]
        finally:
            tz._relu_margin_probe = None
        if margin >= min_relu_margin:
            return model, images, audio, labels, teacher
    raise RuntimeError("could not find a kink-free instance")


@pytest.fixture
def tiny_fusion():
    return tiny_instance(seed=0)
