"""Patch-to-image aggregation and the two training objectives.

All functions reduce over the last axis, so a ``[B, Np]`` input pools
``B`` images at once.  Plain sequences are promoted to float64 tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Tensor, absolute


def _tensor(values) -> Tensor:
    if isinstance(values, Tensor):
        return values
    return Tensor(np.asarray(values, dtype=np.float64))


def _target(q_t, like: Tensor):
    if isinstance(q_t, Tensor):
        return q_t
    q = np.asarray(q_t, dtype=like.dtype)
    return Tensor(q[..., None] if q.ndim and like.data.ndim > 1 else q)


def pool_average(y) -> Tensor:
    y = _tensor(y)
    if y.shape[-1] == 0:
        raise ValueError("cannot pool an empty set of patches")
    return y.mean(axis=-1)


def pool_weighted(y, alpha_star) -> tuple[Tensor, Tensor]:
    """Return ``(q_hat, p)`` with ``p = alpha* / sum(alpha*)`` and ``q_hat = sum(p * y)``."""
    y, alpha_star = _tensor(y), _tensor(alpha_star)
    if y.shape != alpha_star.shape:
        raise ValueError(f"quality/weight shapes differ: {y.shape} vs {alpha_star.shape}")
    if y.shape[-1] == 0:
        raise ValueError("cannot pool an empty set of patches")
    if np.any(alpha_star.data <= 0):
        raise ValueError("patch weights must be strictly positive")
    p = alpha_star / alpha_star.sum(axis=-1, keepdims=True)
    return (p * y).sum(axis=-1), p


def loss_simple(y, q_t) -> Tensor:
    """Mean absolute deviation of every patch quality from its image target."""
    y = _tensor(y)
    if y.shape[-1] == 0:
        raise ValueError("cannot compute a loss over zero patches")
    return absolute(y - _target(q_t, y)).mean(axis=-1)


def loss_weighted(q_hat, q_t) -> Tensor:
    q_hat = _tensor(q_hat)
    q_t = q_t if isinstance(q_t, Tensor) else Tensor(np.asarray(q_t, dtype=q_hat.dtype))
    return absolute(q_hat - q_t)


@dataclass
class ImagePrediction:
    image_id: str
    q_hat: float
    patch_qualities: np.ndarray
    patch_coords: np.ndarray
    normalized_weights: np.ndarray | None = None
    stabilized_weights: np.ndarray | None = None
    mode: str = "random"
    image_shape: tuple[int, int] = field(default=(0, 0))
