"""Contrastive loss terms and their gradients w.r.t. the two descriptors.

The positive term is the plain Euclidean distance between the pair's
descriptors; the negative term is the hinge max(0, mu - distance).  At the
non-differentiable points (zero distance, distance exactly mu) the
subgradient is taken to be zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

_ZERO_DIST = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """mu is the hinge margin for negative pairs."""

    mu: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu <= 0:
            raise InvalidParameterError("margin mu must be positive")


def _check_pair(f1: np.ndarray, f2: np.ndarray):
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape:
        raise InvalidParameterError(f"descriptor shapes differ: {f1.shape} vs {f2.shape}")
    return f1, f2


def positive_loss_batch(f1: np.ndarray, f2: np.ndarray):
    """Rowwise distance loss over (B, d) descriptor arrays.
    Returns (values (B,), g1 (B, d), g2 (B, d))."""
    f1, f2 = _check_pair(np.atleast_2d(f1), np.atleast_2d(f2))
    diff = f1 - f2
    values = np.linalg.norm(diff, axis=1)
    live = values > _ZERO_DIST
    g1 = np.zeros_like(diff)
    g1[live] = diff[live] / values[live, None]
    values = np.where(live, values, 0.0)
    return values, g1, -g1


def negative_loss_batch(f1: np.ndarray, f2: np.ndarray, cfg: LossConfig):
    """Rowwise hinge loss max(0, mu - distance) over (B, d) arrays."""
    f1, f2 = _check_pair(np.atleast_2d(f1), np.atleast_2d(f2))
    diff = f1 - f2
    dist = np.linalg.norm(diff, axis=1)
    values = np.maximum(0.0, cfg.mu - dist)
    live = (dist > _ZERO_DIST) & (values > 0.0)
    g1 = np.zeros_like(diff)
    g1[live] = -diff[live] / dist[live, None]
    return values, g1, -g1


def positive_loss(f1: np.ndarray, f2: np.ndarray):
    """Distance loss for one pair: (value, g1, g2)."""
    values, g1, g2 = positive_loss_batch(f1, f2)
    return float(values[0]), g1[0], g2[0]


def negative_loss(f1: np.ndarray, f2: np.ndarray, cfg: LossConfig):
    """Hinge loss for one pair: (value, g1, g2)."""
    values, g1, g2 = negative_loss_batch(f1, f2, cfg)
    return float(values[0]), g1[0], g2[0]


def batch_objective(positives, negatives, cfg: LossConfig):
    """Sum of positive losses plus negative losses over lists of (f1, f2)
    pairs; no averaging.  Returns (total, positive gradient pairs, negative
    gradient pairs), gradients in input order."""
    total = 0.0
    pos_grads = []
    for f1, f2 in positives:
        value, g1, g2 = positive_loss(f1, f2)
        total += value
        pos_grads.append((g1, g2))
    neg_grads = []
    for f1, f2 in negatives:
        value, g1, g2 = negative_loss(f1, f2, cfg)
        total += value
        neg_grads.append((g1, g2))
    return total, pos_grads, neg_grads
