"""Shared fixtures: tiny deterministic models and toy datasets."""

import numpy as np
import pytest

from wslc.nncore import Model, ModelSpec, build_model


def onehot_classifier(num_classes, slot_to_class, dtype=np.float32):
    """Model that maps a one-hot pixel pattern to a hard class decision.

    Input images are 1-channel, one pixel set to 1. Slot k (flat pixel
    index) is assigned class slot_to_class[k] with a logit margin large
    enough that softmax underflows to an exact one-hot row. Useful where
    a deterministic hard-label classifier with known outputs is needed.
    """
    slots = len(slot_to_class)
    side = int(np.ceil(np.sqrt(slots)))
    spec = ModelSpec(conv_layers=(), pool=1, embed_dim=side * side,
                     num_classes=num_classes, in_channels=1, input_size=side)
    m = build_model(spec, seed=0, dtype=dtype)
    m.params["fc_embed.w"][:] = np.eye(side * side, dtype=dtype)
    m.params["fc_embed.b"][:] = 0
    w = np.zeros((side * side, num_classes), dtype=dtype)
    for k, c in enumerate(slot_to_class):
        w[k, c] = 1e4
    m.params["fc_out.w"][:] = w
    m.params["fc_out.b"][:] = 0
    return m


def onehot_images(slots, side):
    """One image per slot: zeros except pixel ``slot`` set to 1."""
    imgs = np.zeros((len(slots), 1, side, side))
    for n, k in enumerate(slots):
        imgs[n, 0, k // side, k % side] = 1.0
    return imgs


def solid_color_dataset(num_classes, per_class, size=8, noise=0.05, seed=0):
    """Trivially separable images: one solid color per class plus noise."""
    rng = np.random.default_rng(seed)
    hues = np.linspace(0.0, 1.0, num_classes, endpoint=False)
    colors = np.stack([hues, 1.0 - hues, np.roll(hues, 1)], axis=1)
    images, labels = [], []
    for c in range(num_classes):
        base = np.tile(colors[c][:, None, None], (1, size, size))
        for _ in range(per_class):
            img = base + rng.uniform(-noise, noise, size=(3, size, size))
            images.append(np.clip(img, 0, 1))
            labels.append(c)
    return np.stack(images), np.array(labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
