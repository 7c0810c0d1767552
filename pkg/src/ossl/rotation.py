"""Rotation pretext pipeline: exact 90-degree image rotations and the
4-fold expanded batch with one-hot rotation labels.

Rotations are pure pixel permutations (counterclockwise for r=1), so they
commute with per-pixel normalization and conserve the pixel multiset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError

__all__ = ["RotationBatch", "RotationError", "rotate90", "make_rotation_batch",
           "rotation_labels"]

NUM_ROTATIONS = 4


class RotationError(ValueError):
    """Invalid rotation index or non-square batch."""


def rotate90(img, r: int):
    """Rotate a [C,H,W] image counterclockwise by r*90 degrees (r in 0..3)."""
    if not isinstance(r, (int, np.integer)) or not 0 <= r <= 3:
        raise RotationError(f"rotation index must be in 0..3, got {r!r}")
    is_tensor = isinstance(img, Tensor)
    arr = img.data if is_tensor else np.asarray(img)
    if arr.ndim != 3:
        raise ShapeError(f"rotate90: image must be [C,H,W], got shape {arr.shape}")
    out = np.ascontiguousarray(np.rot90(arr, k=int(r), axes=(1, 2)))
    return Tensor(out) if is_tensor else out


def rotation_labels(n: int, dtype=np.float32) -> np.ndarray:
    """One-hot labels for n source images in canonical 0,90,180,270 order."""
    eye = np.eye(NUM_ROTATIONS, dtype=dtype)
    return np.tile(eye, (n, 1))


@dataclass
class RotationBatch:
    images: Tensor          # [4N,C,H,W]; rows 4k..4k+3 rotate source image k
    rot_labels: np.ndarray  # one-hot [4N,4]
    source_index: list      # row -> index of origin image in the input batch


def make_rotation_batch(x) -> RotationBatch:
    """Expand a square [N,C,H,W] batch into all four rotations per image."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"make_rotation_batch: input must be [N,C,H,W], got {arr.shape}")
    n, c, h, w = arr.shape
    if h != w:
        raise RotationError(f"make_rotation_batch: images must be square, got {h}x{w}")
    out = np.empty((4 * n, c, h, w), dtype=arr.dtype)
    out[0::4] = arr
    out[1::4] = np.rot90(arr, k=1, axes=(2, 3))
    out[2::4] = np.rot90(arr, k=2, axes=(2, 3))
    out[3::4] = np.rot90(arr, k=3, axes=(2, 3))
    labels = rotation_labels(n, dtype=arr.dtype if arr.dtype == np.float64 else np.float32)
    source = [k for k in range(n) for _ in range(NUM_ROTATIONS)]
    return RotationBatch(Tensor(out), labels, source)
