import numpy as np
import pytest

from ossl.data import LabeledImageSet
from ossl.nn import ModelConfig, build_model


def make_blobs(n_per_class=64, size=8, seed=0, shift=0.0, noise=0.15,
               name="blobs", role="train"):
    """Linearly separable 2-class image set: class 0 lights the top-left
    quadrant, class 1 the bottom-right.  `shift` dims the signal to fake a
    domain-shifted variant."""
    rng = np.random.default_rng(seed)
    h = size // 2
    images = rng.uniform(0, noise, size=(2 * n_per_class, 1, size, size))
    labels = np.zeros(2 * n_per_class, dtype=np.int64)
    for i in range(n_per_class):
        images[i, 0, :h, :h] += 0.8 - shift
        images[n_per_class + i, 0, h:, h:] += 0.8 - shift
        labels[n_per_class + i] = 1
    return LabeledImageSet(np.clip(images, 0, 1).astype(np.float32), labels,
                           name, role, 2)


def tiny_model(seed=0, num_classes=2, dtype="f32", size=8):
    cfg = ModelConfig("tiny_cnn", num_classes, seed, input_spec=(1, size, size),
                      dtype=dtype)
    return build_model(cfg)


def zero_heads(model):
    """Zero every head parameter so all head logits are exactly uniform."""
    for name in ("semantic_head", "rotation_head", "auxiliary_head"):
        for p in model.group(name).params:
            p.data = np.zeros_like(p.data)


def copy_group(src_group, dst_group):
    for s, d in zip(src_group.params, dst_group.params):
        d.data = s.data.copy()


@pytest.fixture
def blobs():
    return make_blobs()


@pytest.fixture
def model2():
    return tiny_model()
