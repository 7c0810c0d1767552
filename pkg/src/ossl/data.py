"""Dataset ingestion and preprocessing.

Three on-disk formats are understood:
  * IDX          -- the de facto MNIST container (big-endian)
  * CIFAR binary -- 3073-byte records: 1 label byte + 3072 channel-major pixels
  * OSSLRAW1     -- little-endian raw-tensor interchange format used for
                    converted sets (USPS, SVHN, CIFAR-10.1)

Loaders emit images scaled to [0,1]; preprocessing (grayscale, resize,
normalize) maps a set into the model's input space.  Batch iteration is a
pure function of (shuffle_seed, epoch).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "LabeledImageSet",
    "PreprocessSpec",
    "FormatError",
    "load_idx",
    "load_cifar_bin",
    "load_raw_tensor",
    "save_raw_tensor",
    "preprocess",
    "channel_stats",
    "batch_iter",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801
_RAW_MAGIC = b"OSSLRAW1"
_CIFAR_RECORD = 3073


class FormatError(ValueError):
    """Malformed dataset file (bad magic, truncation, length mismatch)."""


@dataclass
class LabeledImageSet:
    images: np.ndarray       # [M,C,H,W] float32
    labels: np.ndarray       # [M] int64 in [0, class_count)
    name: str
    role: str                # "train" or "ood_test"
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be [M,C,H,W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError(
                f"label count {self.labels.shape} does not match image count "
                f"{self.images.shape[0]}")
        if self.labels.size and (self.labels.min() < 0 or
                                 self.labels.max() >= self.class_count):
            raise FormatError(
                f"labels outside [0, {self.class_count}): "
                f"min {self.labels.min()}, max {self.labels.max()}")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class PreprocessSpec:
    target_shape: Optional[tuple] = None        # (C,H,W); None keeps shape
    grayscale: bool = False
    resize: str = "none"                        # none | nearest | bilinear
    normalize: Optional[list] = None            # per-channel (mean, std)

    def __post_init__(self):
        if self.resize not in ("none", "nearest", "bilinear"):
            raise FormatError(f"unknown resize mode {self.resize!r}")
        if self.normalize is not None:
            for mean, std in self.normalize:
                if std <= 0:
                    raise FormatError(f"normalize std must be > 0, got {std}")


# ---------------------------------------------------------------------------
# IDX

def _read_u32_be(fh, offset_name: str) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated file while reading {offset_name} "
                          f"at byte offset {fh.tell() - len(raw)}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path, name: str = "idx", role: str = "train",
             class_count: int = 10) -> LabeledImageSet:
    """Parse an IDX image/label file pair (big-endian MNIST container)."""
    with open(images_path, "rb") as fh:
        magic = _read_u32_be(fh, "image magic")
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} at byte offset 0 of {images_path} "
                f"(expected 0x{_IDX_IMAGES_MAGIC:08x})")
        m = _read_u32_be(fh, "image count")
        h = _read_u32_be(fh, "row count")
        w = _read_u32_be(fh, "column count")
        payload = fh.read()
    if len(payload) != m * h * w:
        raise FormatError(
            f"image payload is {len(payload)} bytes at byte offset 16, "
            f"expected {m * h * w}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(m, 1, h, w)
    images = images.astype(np.float32) / 255.0

    with open(labels_path, "rb") as fh:
        magic = _read_u32_be(fh, "label magic")
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} at byte offset 0 of {labels_path} "
                f"(expected 0x{_IDX_LABELS_MAGIC:08x})")
        ml = _read_u32_be(fh, "label count")
        raw = fh.read()
    if len(raw) != ml:
        raise FormatError(
            f"label payload is {len(raw)} bytes at byte offset 8, expected {ml}")
    if ml != m:
        raise FormatError(
            f"label count {ml} does not match image count {m}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return LabeledImageSet(images, labels, name, role, class_count)


# ---------------------------------------------------------------------------
# CIFAR binary

def load_cifar_bin(paths, name: str = "cifar", role: str = "train",
                   class_count: int = 10) -> LabeledImageSet:
    """Parse CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, bytes)) or not isinstance(paths, Sequence):
        paths = [paths]
    chunks_img, chunks_lbl = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % _CIFAR_RECORD:
            raise FormatError(
                f"{path}: file length {len(raw)} is not a multiple of "
                f"{_CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        chunks_lbl.append(rec[:, 0].astype(np.int64))
        chunks_img.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if chunks_img:
        images = np.concatenate(chunks_img).astype(np.float32) / 255.0
        labels = np.concatenate(chunks_lbl)
    else:
        images = np.zeros((0, 3, 32, 32), dtype=np.float32)
        labels = np.zeros((0,), dtype=np.int64)
    return LabeledImageSet(images, labels, name, role, class_count)


# ---------------------------------------------------------------------------
# OSSLRAW1

def save_raw_tensor(dataset: LabeledImageSet, path) -> None:
    m, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<IIIII", m, c, h, w, dataset.class_count))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())


def load_raw_tensor(path, name: str = None, role: str = "ood_test") -> LabeledImageSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _RAW_MAGIC:
        raise FormatError(
            f"bad magic {raw[:8]!r} at byte offset 0 of {path} "
            f"(expected {_RAW_MAGIC!r})")
    if len(raw) < 28:
        raise FormatError(f"truncated header: {len(raw)} bytes, need 28")
    m, c, h, w, class_count = struct.unpack("<IIIII", raw[8:28])
    img_bytes = 4 * m * c * h * w
    want = 28 + img_bytes + 2 * m
    if len(raw) != want:
        raise FormatError(
            f"payload length mismatch: file is {len(raw)} bytes, header "
            f"implies {want}")
    images = np.frombuffer(raw, dtype="<f4", count=m * c * h * w, offset=28)
    images = images.reshape(m, c, h, w).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u2", offset=28 + img_bytes).astype(np.int64)
    return LabeledImageSet(images, labels, name or str(path), role, class_count)


# ---------------------------------------------------------------------------
# preprocessing

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _resize_nearest(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    c, h, w = img.shape
    ri = (np.arange(th) * h) // th
    ci = (np.arange(tw) * w) // tw
    return img[:, ri[:, None], ci[None, :]]


def _resize_bilinear(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def preprocess(dataset: LabeledImageSet, spec: PreprocessSpec) -> LabeledImageSet:
    """Grayscale, resize, and normalize a set; labels are untouched."""
    images = dataset.images
    if spec.grayscale:
        if images.shape[1] != 3:
            raise FormatError(
                f"grayscale conversion needs 3 channels, got {images.shape[1]}")
        images = np.tensordot(images, _LUMA, axes=([1], [0]))[:, None]
    if spec.resize != "none":
        if spec.target_shape is None:
            raise FormatError("resize requested but no target_shape given")
        _, th, tw = spec.target_shape
        fn = _resize_nearest if spec.resize == "nearest" else _resize_bilinear
        images = np.stack([fn(img, th, tw) for img in images]) if len(images) \
            else np.zeros((0, images.shape[1], th, tw), dtype=np.float32)
    if spec.target_shape is not None and images.shape[1:] != tuple(spec.target_shape):
        raise FormatError(
            f"preprocessed shape {images.shape[1:]} does not match target "
            f"{tuple(spec.target_shape)}")
    if spec.normalize is not None:
        if len(spec.normalize) != images.shape[1]:
            raise FormatError(
                f"{len(spec.normalize)} normalization pairs for "
                f"{images.shape[1]} channels")
        mean = np.array([m for m, _ in spec.normalize], dtype=np.float32)
        std = np.array([s for _, s in spec.normalize], dtype=np.float32)
        images = (images - mean[:, None, None]) / std[:, None, None]
    return LabeledImageSet(images.astype(np.float32), dataset.labels.copy(),
                           dataset.name, dataset.role, dataset.class_count)


def channel_stats(dataset: LabeledImageSet) -> list:
    """Per-channel (mean, std) pairs, for normalizing with train statistics."""
    return [(float(dataset.images[:, c].mean()), float(dataset.images[:, c].std()))
            for c in range(dataset.images.shape[1])]


# ---------------------------------------------------------------------------
# batching

def batch_iter(dataset: LabeledImageSet, batch_size: int, shuffle_seed: int,
               epoch: int) -> Iterator[tuple]:
    """Yield (images, labels) batches over a seeded per-epoch permutation.

    The permutation is a pure function of (shuffle_seed, epoch); the final
    short batch is included.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    m = len(dataset)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(shuffle_seed),
                                               counter=[0, 0, 0, np.uint64(epoch)]))
    order = rng.permutation(m)
    for start in range(0, m, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
