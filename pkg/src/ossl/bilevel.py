"""Alternating upper/lower SGD training with parameter-group masking, plus
the two baseline training modes.

Every step starts from a fresh tape with cleared gradients, so upper and
lower gradients never mix.  The lower step keeps the semantic head on the
tape (gradients flow through it to the backbone) but the optimizer never
applies its update.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import losses, nn
from . import tensor as T
from .data import LabeledImageSet, batch_iter
from .losses import one_hot
from .tensor import Tensor

__all__ = ["SgdConfig", "EpochStats", "TrainRunRecord", "StepReport",
           "NumericError", "MODES", "upper_step", "lower_step",
           "baseline_step", "train", "should_evaluate"]

MODES = ("baseline_ch", "baseline_ch_rh", "ossl")


class NumericError(RuntimeError):
    """Non-finite loss or gradient; the run aborts rather than skipping."""


@dataclass(frozen=True)
class SgdConfig:
    l_r: float = 0.01
    batch_size: int = 128
    n_epoch: int = 30
    shuffle_seed: int = 0
    mode: str = "ossl"
    lower_variant: str = "ah"

    def __post_init__(self):
        if self.l_r <= 0:
            raise ValueError(f"l_r must be > 0, got {self.l_r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_epoch < 0:
            raise ValueError(f"n_epoch must be >= 0, got {self.n_epoch}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lower_variant not in losses.LOWER_VARIANTS:
            raise ValueError(f"lower_variant must be one of {losses.LOWER_VARIANTS}")


@dataclass
class StepReport:
    l_ch: float
    l_rh: Optional[float] = None
    l_ah: Optional[float] = None
    grad_norms: dict = field(default_factory=dict)
    semantic_correct: int = 0
    batch_size: int = 0


@dataclass
class EpochStats:
    epoch: int
    l_ch: Optional[float]
    l_rh: Optional[float]
    l_ah: Optional[float]
    train_acc: float
    test_acc: dict
    wall_ms: float


@dataclass
class TrainRunRecord:
    mode: str
    config_hash: str
    model_seed: int
    shuffle_seed: int
    test_set_names: list
    epochs: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    def final_test_acc(self, name: str) -> Optional[float]:
        for ep in reversed(self.epochs):
            if name in ep.test_acc:
                return ep.test_acc[name]
        return None


def _check_finite(loss_value: float, groups) -> None:
    if not np.isfinite(loss_value):
        raise NumericError("non-finite loss value")
    for g in groups:
        for i, p in enumerate(g.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(
                    f"non-finite gradient in group {g.name}, tensor {i}")


def _apply_sgd(groups, l_r: float) -> dict:
    norms = {}
    for g in groups:
        if g.frozen:
            continue
        sq = 0.0
        for p in g.params:
            if p.grad is None:
                continue
            sq += float(np.sum(np.square(p.grad.astype(np.float64))))
            p.data = p.data - p.grad.astype(p.data.dtype) * p.data.dtype.type(l_r)
        norms[g.name] = float(np.sqrt(sq))
    return norms


def _semantic_forward(model, x: Tensor, y: np.ndarray):
    feats = nn.forward_features(model, x)
    logits = nn.forward_head(model, feats, "semantic")
    loss = T.softmax_cross_entropy(logits, y)
    correct = int(np.sum(logits.data.argmax(axis=1) == y.argmax(axis=1)))
    return feats, loss, correct


def upper_step(model, x: Tensor, y: np.ndarray, cfg: SgdConfig) -> StepReport:
    """One SGD step on semantic+rotation loss over {semantic, rotation,
    backbone}; the auxiliary head is untouched."""
    T.reset_tape()
    model.zero_grad()
    feats, l_ch, correct = _semantic_forward(model, x, y)
    l_rh = losses.rotation_loss(model, x)
    loss = T.add(l_ch, l_rh)
    T.backward(loss)
    groups = [model.group("semantic_head"), model.group("rotation_head"),
              model.group("backbone")]
    _check_finite(loss.item(), groups)
    norms = _apply_sgd(groups, cfg.l_r)
    return StepReport(l_ch.item(), l_rh=l_rh.item(), grad_norms=norms,
                      semantic_correct=correct, batch_size=x.shape[0])


def lower_step(model, x: Tensor, y: np.ndarray, cfg: SgdConfig) -> StepReport:
    """One SGD step on the lower objective over {auxiliary, backbone}; the
    semantic and rotation heads are bitwise unchanged."""
    T.reset_tape()
    model.zero_grad()
    feats, l_ch, correct = _semantic_forward(model, x, y)
    if cfg.lower_variant == "ah":
        l_other = losses.auxiliary_loss(model, x, y, feats=feats)
    else:
        l_other = losses.rotation_loss(model, x)
    loss = T.sub(l_ch, l_other)
    T.backward(loss)
    groups = [model.group("auxiliary_head"), model.group("backbone")]
    _check_finite(loss.item(), groups)
    norms = _apply_sgd(groups, cfg.l_r)
    rep = StepReport(l_ch.item(), grad_norms=norms,
                     semantic_correct=correct, batch_size=x.shape[0])
    if cfg.lower_variant == "ah":
        rep.l_ah = l_other.item()
    return rep


def baseline_step(model, x: Tensor, y: np.ndarray, cfg: SgdConfig) -> StepReport:
    """Single SGD step for the two baseline modes."""
    T.reset_tape()
    model.zero_grad()
    feats, l_ch, correct = _semantic_forward(model, x, y)
    if cfg.mode == "baseline_ch_rh":
        l_rh = losses.rotation_loss(model, x)
        loss = T.add(l_ch, l_rh)
        groups = [model.group("semantic_head"), model.group("rotation_head"),
                  model.group("backbone")]
    else:
        l_rh = None
        loss = l_ch
        groups = [model.group("semantic_head"), model.group("backbone")]
    T.backward(loss)
    _check_finite(loss.item(), groups)
    norms = _apply_sgd(groups, cfg.l_r)
    return StepReport(l_ch.item(),
                      l_rh=None if l_rh is None else l_rh.item(),
                      grad_norms=norms, semantic_correct=correct,
                      batch_size=x.shape[0])


def should_evaluate(epoch: int, n_epoch: int) -> bool:
    return (epoch >= 49 and epoch % 10 == 0) or epoch == n_epoch


def _evaluate_sets(model, test_sets: dict) -> dict:
    # local import: eval depends on this module's types for reporting
    from .eval import accuracy
    return {name: accuracy(model, ds, "semantic").accuracy
            for name, ds in test_sets.items()}


def train(model, train_set: LabeledImageSet, test_sets: dict,
          cfg: SgdConfig, config_hash: str = "",
          checkpoint_path=None) -> TrainRunRecord:
    """Run the full training loop and return the per-epoch record.

    In ossl mode every mini-batch gets an upper step followed by a lower
    step on the same batch; baseline modes take a single step.
    """
    spec = model.config.input_spec
    if train_set.images.shape[1:] != spec:
        raise nn.ModelError(
            f"train set shape {train_set.images.shape[1:]} does not match "
            f"model input spec {spec}")
    if train_set.class_count != model.config.num_classes:
        raise nn.ModelError(
            f"train set has {train_set.class_count} classes, model expects "
            f"{model.config.num_classes}")

    record = TrainRunRecord(mode=cfg.mode, config_hash=config_hash,
                            model_seed=model.config.init_seed,
                            shuffle_seed=cfg.shuffle_seed,
                            test_set_names=list(test_sets))
    c = model.config.num_classes
    dtype = model.config.np_dtype

    for epoch in range(1, cfg.n_epoch + 1):
        t0 = time.perf_counter()
        sums = {"l_ch": 0.0, "l_rh": 0.0, "l_ah": 0.0}
        counts = {"l_ch": 0, "l_rh": 0, "l_ah": 0}
        correct = 0
        seen = 0
        for xb, yb in batch_iter(train_set, cfg.batch_size, cfg.shuffle_seed, epoch):
            x = Tensor(xb.astype(dtype))
            y = one_hot(yb, c, dtype=dtype)
            if cfg.mode == "ossl":
                rep = upper_step(model, x, y, cfg)
                rep2 = lower_step(model, x, y, cfg)
                if rep2.l_ah is not None:
                    sums["l_ah"] += rep2.l_ah * rep2.batch_size
                    counts["l_ah"] += rep2.batch_size
            else:
                rep = baseline_step(model, x, y, cfg)
            sums["l_ch"] += rep.l_ch * rep.batch_size
            counts["l_ch"] += rep.batch_size
            if rep.l_rh is not None:
                sums["l_rh"] += rep.l_rh * rep.batch_size
                counts["l_rh"] += rep.batch_size
            correct += rep.semantic_correct
            seen += rep.batch_size
        T.reset_tape()

        test_acc = _evaluate_sets(model, test_sets) \
            if should_evaluate(epoch, cfg.n_epoch) else {}
        wall_ms = (time.perf_counter() - t0) * 1000.0

        def mean(key):
            return sums[key] / counts[key] if counts[key] else None

        record.epochs.append(EpochStats(
            epoch=epoch, l_ch=mean("l_ch"), l_rh=mean("l_rh"),
            l_ah=mean("l_ah"), train_acc=correct / seen if seen else 0.0,
            test_acc=test_acc, wall_ms=wall_ms))

    if checkpoint_path is not None:
        nn.save_checkpoint(model, checkpoint_path)
        record.checkpoint_path = str(checkpoint_path)
    return record
