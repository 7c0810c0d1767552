"""Accuracy measurement, embedding export, and exact t-SNE.

t-SNE here is the exact O(M^2) algorithm: per-point Gaussian bandwidths
found by bisection so each conditional distribution hits the target
perplexity, symmetrized affinities, Student-t low-dimensional kernel, and
momentum gradient descent with early exaggeration.  Initial coordinates
are drawn per point from a counter-based stream keyed by the point index,
so permuting input rows permutes output rows identically.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import LabeledImageSet
from .rotation import make_rotation_batch
from .tensor import Tensor

__all__ = ["EvalResult", "TsneConfig", "TsneResult", "EvalError",
           "accuracy", "rotation_accuracy", "export_embeddings",
           "load_embeddings", "tsne", "report_table", "ReportTable"]

_EMB_MAGIC = b"OSSLEMB1"
_TSNE_MAX_POINTS = 2500
_EVAL_BATCH = 256


class EvalError(ValueError):
    """Mismatched evaluation inputs or malformed embedding file."""


@dataclass
class EvalResult:
    dataset: str
    head: str
    accuracy: float
    n: int
    per_class_accuracy: np.ndarray
    confusion: np.ndarray


def _argmax_eval(logits: np.ndarray, labels: np.ndarray, k: int):
    pred = logits.argmax(axis=1)          # ties -> lowest class index
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return pred, confusion


def _batched_features(model, images: np.ndarray) -> np.ndarray:
    dtype = model.config.np_dtype
    out = []
    with T.no_grad():
        for start in range(0, len(images), _EVAL_BATCH):
            x = Tensor(images[start:start + _EVAL_BATCH].astype(dtype))
            out.append(nn.forward_features(model, x).data)
    if not out:
        return np.zeros((0, model.feature_dim), dtype=dtype)
    return np.concatenate(out)


def accuracy(model, dataset: LabeledImageSet, head: str = "semantic") -> EvalResult:
    """Argmax accuracy of a C-way head over a labeled set."""
    if head not in ("semantic", "auxiliary"):
        raise EvalError(f"head must be semantic or auxiliary, got {head!r}")
    c = model.config.num_classes
    if dataset.class_count != c:
        raise EvalError(
            f"dataset has {dataset.class_count} classes, model expects {c}")
    dtype = model.config.np_dtype
    confusion = np.zeros((c, c), dtype=np.int64)
    with T.no_grad():
        for start in range(0, len(dataset), _EVAL_BATCH):
            x = Tensor(dataset.images[start:start + _EVAL_BATCH].astype(dtype))
            feats = nn.forward_features(model, x)
            logits = nn.forward_head(model, feats, head).data
            labels = dataset.labels[start:start + _EVAL_BATCH]
            _, conf = _argmax_eval(logits, labels, c)
            confusion += conf
    return _result_from_confusion(dataset.name, head, confusion)


def rotation_accuracy(model, dataset: LabeledImageSet) -> EvalResult:
    """4-way rotation-head accuracy over all four rotations of every image."""
    confusion = np.zeros((4, 4), dtype=np.int64)
    dtype = model.config.np_dtype
    with T.no_grad():
        for start in range(0, len(dataset), _EVAL_BATCH):
            chunk = dataset.images[start:start + _EVAL_BATCH].astype(dtype)
            batch = make_rotation_batch(chunk)
            feats = nn.forward_features(model, batch.images)
            logits = nn.forward_head(model, feats, "rotation").data
            labels = batch.rot_labels.argmax(axis=1)
            _, conf = _argmax_eval(logits, labels, 4)
            confusion += conf
    return _result_from_confusion(dataset.name, "rotation", confusion)


def _result_from_confusion(name: str, head: str, confusion: np.ndarray) -> EvalResult:
    total = int(confusion.sum())
    row = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(row > 0, np.diag(confusion) / np.maximum(row, 1), 0.0)
    acc = float(np.trace(confusion)) / total if total else 0.0
    return EvalResult(name, head, acc, total, per_class, confusion)


# ---------------------------------------------------------------------------
# embeddings (OSSLEMB1: magic, u32 M, u32 D, f32 rows, u16 labels; LE)

def export_embeddings(model, dataset: LabeledImageSet, path) -> np.ndarray:
    feats = _batched_features(model, dataset.images).astype("<f4")
    m, d = feats.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_EMB_MAGIC)
            fh.write(struct.pack("<II", m, d))
            fh.write(np.ascontiguousarray(feats).tobytes())
            fh.write(dataset.labels.astype("<u2").tobytes())
    except OSError as exc:
        raise EvalError(f"cannot write embeddings to {path}: {exc}") from exc
    return feats


def load_embeddings(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _EMB_MAGIC:
        raise EvalError(f"bad magic {raw[:8]!r} in {path}, expected {_EMB_MAGIC!r}")
    if len(raw) < 16:
        raise EvalError(f"truncated embedding header in {path}")
    m, d = struct.unpack("<II", raw[8:16])
    want = 16 + 4 * m * d + 2 * m
    if len(raw) != want:
        raise EvalError(
            f"embedding payload mismatch in {path}: {len(raw)} bytes, expected {want}")
    feats = np.frombuffer(raw, dtype="<f4", count=m * d, offset=16).reshape(m, d)
    labels = np.frombuffer(raw, dtype="<u2", offset=16 + 4 * m * d).astype(np.int64)
    return feats.astype(np.float32), labels


# ---------------------------------------------------------------------------
# exact t-SNE

@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0


@dataclass
class TsneResult:
    coords: np.ndarray            # M x 2
    kl: list = field(default_factory=list)   # KL(P||Q) per iteration
    entropy_bits: np.ndarray = None          # per-point conditional entropy


def _conditional_affinities(sq_dists: np.ndarray, perplexity: float,
                            tol: float = 1e-5, max_steps: int = 50):
    """Bisect per-point Gaussian precision until the conditional entropy
    matches log2(perplexity) within tol bits."""
    m = sq_dists.shape[0]
    target = np.log2(perplexity)
    p = np.zeros((m, m), dtype=np.float64)
    entropies = np.zeros(m, dtype=np.float64)
    for i in range(m):
        d = np.delete(sq_dists[i], i)
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            w = np.exp(-d * beta)
            s = w.sum()
            if s <= 0:
                s = 1e-300
            pi = w / s
            h = -np.sum(pi * np.log2(np.maximum(pi, 1e-300)))
            if abs(h - target) <= tol:
                break
            if h > target:
                beta_lo = beta
                beta = beta * 2.0 if np.isinf(beta_hi) else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = 0.5 * (beta + beta_lo)
        entropies[i] = h
        p[i, np.arange(m) != i] = pi
    return p, entropies


def tsne(embeddings: np.ndarray, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact t-SNE projection of an M x D matrix to M x 2 coordinates."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise EvalError(f"embeddings must be 2-d, got shape {x.shape}")
    m = x.shape[0]
    if m < 10:
        raise EvalError(f"t-SNE needs at least 10 points, got {m}")
    if m > _TSNE_MAX_POINTS:
        raise EvalError(f"exact t-SNE capped at {_TSNE_MAX_POINTS} points, got {m}")
    if not 1.0 < cfg.perplexity < m / 3.0:
        raise EvalError(
            f"perplexity must satisfy 1 < perplexity < M/3 "
            f"(M={m}), got {cfg.perplexity}")

    sq = np.sum(x * x, axis=1)
    sq_dists = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    p_cond, entropies = _conditional_affinities(sq_dists, cfg.perplexity)
    p = (p_cond + p_cond.T) / (2.0 * m)
    p = np.maximum(p, 1e-300)

    # per-point seeded init, keyed by the point's content so permuting the
    # input rows permutes the initial (and hence final) coordinates
    y = np.empty((m, 2), dtype=np.float64)
    for i in range(m):
        digest = hashlib.blake2b(x[i].tobytes(), digest_size=8).digest()
        key = int.from_bytes(digest, "little")
        rng = np.random.Generator(np.random.Philox(
            key=np.uint64(key), counter=[0, 0, 0, np.uint64(cfg.seed)]))
        y[i] = rng.normal(0.0, 1e-4, size=2)

    velocity = np.zeros_like(y)
    kl_track = []
    for it in range(1, cfg.iterations + 1):
        exag = cfg.early_exaggeration if it <= cfg.exaggeration_iters else 1.0
        momentum = 0.5 if it <= cfg.exaggeration_iters else 0.8

        ysq = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(
            ysq[:, None] + ysq[None, :] - 2.0 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-300)

        pq = (p * exag - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)

        velocity = momentum * velocity - cfg.learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)

        kl_track.append(float(np.sum(p * np.log(p / q))))

    return TsneResult(coords=y, kl=kl_track, entropy_bits=entropies)


# ---------------------------------------------------------------------------
# comparison table

@dataclass
class ReportTable:
    modes: list                 # row labels
    datasets: list              # column labels
    cells: list                 # rows of formatted "%.2f" percentages (or "")
    is_max: list                # parallel rows of booleans

    def as_csv(self) -> str:
        lines = ["mode," + ",".join(self.datasets)]
        for mode, row, flags in zip(self.modes, self.cells, self.is_max):
            lines.append(mode + "," + ",".join(
                f"{v}*" if f else v for v, f in zip(row, flags)))
        return "\n".join(lines) + "\n"

    def as_text(self) -> str:
        widths = [max(len(self.datasets[j]), 8) for j in range(len(self.datasets))]
        mode_w = max((len(m) for m in self.modes), default=4)
        head = "mode".ljust(mode_w) + "  " + "  ".join(
            d.rjust(w) for d, w in zip(self.datasets, widths))
        lines = [head]
        for mode, row, flags in zip(self.modes, self.cells, self.is_max):
            cells = [(f"{v}*" if f else v).rjust(w)
                     for v, f, w in zip(row, flags, widths)]
            lines.append(mode.ljust(mode_w) + "  " + "  ".join(cells))
        return "\n".join(lines) + "\n"


_MODE_ORDER = ("baseline_ch", "baseline_ch_rh", "ossl")


def report_table(records: list) -> ReportTable:
    """Comparison table: one row per training mode, one column per OOD test
    set, cells are final accuracies in percent (column maxima flagged)."""
    if not records:
        raise EvalError("report_table: no records given")
    modes = [m for m in _MODE_ORDER if any(r.mode == m for r in records)]
    datasets: list = []
    for r in records:
        for name in r.test_set_names:
            if name not in datasets:
                datasets.append(name)
    values = np.full((len(modes), len(datasets)), np.nan)
    for r in records:
        if r.mode not in modes:
            continue
        i = modes.index(r.mode)
        for j, name in enumerate(datasets):
            acc = r.final_test_acc(name)
            if acc is not None:
                values[i, j] = acc * 100.0
    cells = [[("" if np.isnan(values[i, j]) else f"{values[i, j]:.2f}")
              for j in range(len(datasets))] for i in range(len(modes))]
    is_max = [[False] * len(datasets) for _ in modes]
    for j in range(len(datasets)):
        col = values[:, j]
        if np.all(np.isnan(col)):
            continue
        best = np.nanargmax(col)
        is_max[best][j] = True
    return ReportTable(modes, datasets, cells, is_max)
