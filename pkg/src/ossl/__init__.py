"""OSSL: bi-level multi-task training with rotation self-supervision for
out-of-distribution image classification."""

from . import bilevel, cli, data, eval, losses, nn, rotation, tensor

__all__ = ["tensor", "nn", "rotation", "losses", "bilevel", "data", "eval", "cli"]
__version__ = "0.1.0"
