"""Task losses and the two bi-level composite objectives.

All losses are mean cross-entropies in natural-log units.  The upper
objective is semantic + rotation; the lower objective is semantic minus
auxiliary (the published form), with the earlier draft's semantic minus
rotation variant selectable for ablation.  Exclusion of the frozen
semantic head from lower updates is the optimizer's job, not the loss's:
gradients still flow through its ops to reach the backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .rotation import make_rotation_batch
from .tensor import ShapeError, Tensor

__all__ = ["LossBundle", "one_hot", "semantic_loss", "rotation_loss",
           "auxiliary_loss", "upper_loss", "lower_loss", "loss_bundle",
           "LOWER_VARIANTS"]

LOWER_VARIANTS = ("ah", "rh")


@dataclass(frozen=True)
class LossBundle:
    l_ch: float
    l_rh: float
    l_ah: float
    l_upper: float
    l_lower: float


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(
            f"labels outside [0, {num_classes}): min {labels.min()}, max {labels.max()}")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def _check_targets(model, y_c: np.ndarray):
    c = model.config.num_classes
    if y_c.ndim != 2 or y_c.shape[1] != c:
        raise ShapeError(
            f"target width {y_c.shape[-1] if y_c.ndim else y_c.shape} does not "
            f"match model class count {c}")


def semantic_loss(model, x: Tensor, y_c: np.ndarray, feats: Tensor = None) -> Tensor:
    """Mean CE of the semantic head on unrotated images."""
    _check_targets(model, y_c)
    if feats is None:
        feats = nn.forward_features(model, x)
    logits = nn.forward_head(model, feats, "semantic")
    return T.softmax_cross_entropy(logits, y_c)


def auxiliary_loss(model, x: Tensor, y_c: np.ndarray, feats: Tensor = None) -> Tensor:
    """Mean CE of the auxiliary head on unrotated images."""
    _check_targets(model, y_c)
    if feats is None:
        feats = nn.forward_features(model, x)
    logits = nn.forward_head(model, feats, "auxiliary")
    return T.softmax_cross_entropy(logits, y_c)


def rotation_loss(model, x: Tensor) -> Tensor:
    """4-way-averaged CE of the rotation head over all four rotations.

    The uniform mean over the 4N expanded rows equals the quarter-weighted
    sum of the four per-angle cross-entropies.
    """
    batch = make_rotation_batch(x)
    feats = nn.forward_features(model, batch.images)
    logits = nn.forward_head(model, feats, "rotation")
    return T.softmax_cross_entropy(logits, batch.rot_labels)


def upper_loss(model, x: Tensor, y_c: np.ndarray) -> Tensor:
    """Semantic + rotation loss on the same batch."""
    feats = nn.forward_features(model, x)
    return T.add(semantic_loss(model, x, y_c, feats=feats), rotation_loss(model, x))


def lower_loss(model, x: Tensor, y_c: np.ndarray, variant: str = "ah") -> Tensor:
    """Semantic minus auxiliary loss (variant "ah", the published form) or
    semantic minus rotation loss (variant "rh", draft form)."""
    if variant not in LOWER_VARIANTS:
        raise ValueError(f"lower variant must be one of {LOWER_VARIANTS}, got {variant!r}")
    feats = nn.forward_features(model, x)
    l_ch = semantic_loss(model, x, y_c, feats=feats)
    if variant == "ah":
        return T.sub(l_ch, auxiliary_loss(model, x, y_c, feats=feats))
    return T.sub(l_ch, rotation_loss(model, x))


def loss_bundle(model, x: Tensor, y_c: np.ndarray, variant: str = "ah") -> LossBundle:
    """Evaluate all five loss values at the current parameters (no taping)."""
    with T.no_grad():
        feats = nn.forward_features(model, x)
        l_ch = semantic_loss(model, x, y_c, feats=feats).item()
        l_rh = rotation_loss(model, x).item()
        l_ah = auxiliary_loss(model, x, y_c, feats=feats).item()
    l_lower = l_ch - (l_ah if variant == "ah" else l_rh)
    return LossBundle(l_ch, l_rh, l_ah, l_ch + l_rh, l_lower)
