"""Noised positive/negative point sampling around ground-truth boxes.

Positive offsets satisfy |dx| < l1*w/2 and |dy| < l1*h/2.  Negative offsets
fall in the band l1*w/2 < |dx| < l2*w/2 (same for y).  When l1 == l2 that band
is empty, so negatives sit exactly on |dx| = l1*w/2 with a random sign.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box
from .tensor import ConfigurationError

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class DenoisingConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    groups_per_image: int = 3
    seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ConfigurationError(f"lambda1 must be >= 0, got {self.lambda1}")
        if self.lambda2 < self.lambda1:
            raise ConfigurationError(f"lambda2 ({self.lambda2}) must be >= lambda1 ({self.lambda1})")
        if self.groups_per_image < 1:
            raise ConfigurationError("groups_per_image must be positive")


@dataclass
class NoisePoint:
    x: float
    y: float
    polarity: str
    source_box_index: int
    score: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    @property
    def positive(self) -> bool:
        return self.polarity == POSITIVE


def _open_unit(rng: np.random.Generator, size) -> np.ndarray:
    # strictly inside (0, 1): keeps the band inequalities strict
    return rng.integers(1, 2**53, size=size, dtype=np.int64) / 2.0**53


def sample_offsets(rng: np.random.Generator, half_extent: np.ndarray, lambda1: float, lambda2: float,
                   negative: bool) -> np.ndarray:
    """Signed offsets for an array of half extents (w/2 or h/2)."""
    half_extent = np.asarray(half_extent, dtype=np.float64)
    u = _open_unit(rng, half_extent.shape)
    sign = np.where(rng.random(half_extent.shape) < 0.5, -1.0, 1.0)
    if not negative:
        mag = u * lambda1 * half_extent
    elif lambda2 > lambda1:
        mag = (lambda1 + u * (lambda2 - lambda1)) * half_extent
    else:
        mag = lambda1 * half_extent
    return sign * mag


def sample_group(gt_boxes: Sequence[Box], cfg: DenoisingConfig, rng_state=None) -> list[NoisePoint]:
    """One positive and one negative point per box per group.

    Order is group-major, then box, then (positive, negative).  ``rng_state``
    may be a ``numpy.random.Generator`` or an integer seed; ``None`` uses
    ``cfg.seed``.
    """
    if not gt_boxes:
        return []
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(
        cfg.seed if rng_state is None else rng_state)
    b = np.array([g.as_array() for g in gt_boxes])
    n = len(b)
    points: list[NoisePoint] = []
    for _ in range(cfg.groups_per_image):
        pdx = sample_offsets(rng, b[:, 2] / 2, cfg.lambda1, cfg.lambda2, False)
        pdy = sample_offsets(rng, b[:, 3] / 2, cfg.lambda1, cfg.lambda2, False)
        ndx = sample_offsets(rng, b[:, 2] / 2, cfg.lambda1, cfg.lambda2, True)
        ndy = sample_offsets(rng, b[:, 3] / 2, cfg.lambda1, cfg.lambda2, True)
        for i in range(n):
            cx, cy = b[i, 0], b[i, 1]
            points.append(NoisePoint(float(np.clip(cx + pdx[i], 0, 1)), float(np.clip(cy + pdy[i], 0, 1)),
                                     POSITIVE, i, dx=float(pdx[i]), dy=float(pdy[i])))
            points.append(NoisePoint(float(np.clip(cx + ndx[i], 0, 1)), float(np.clip(cy + ndy[i], 0, 1)),
                                     NEGATIVE, i, dx=float(ndx[i]), dy=float(ndy[i])))
    return points


def group_sizes(n_boxes: int, cfg: DenoisingConfig) -> list[int]:
    return [2 * n_boxes] * cfg.groups_per_image if n_boxes else []


def denoising_attention_mask(n_general: int, n_specific: int, group_sizes: Sequence[int]) -> np.ndarray:
    """Self-attention block mask over [denoising | general | specific] queries.

    True means blocked.  Denoising groups see only themselves and the matching
    queries; matching queries never see any denoising query.
    """
    if n_general < 0 or n_specific < 0 or any(g < 0 for g in group_sizes):
        raise ConfigurationError("sizes must be nonnegative")
    n_dn = int(sum(group_sizes))
    total = n_dn + n_general + n_specific
    mask = np.zeros((total, total), dtype=bool)
    if n_dn == 0:
        return mask
    mask[n_dn:, :n_dn] = True
    mask[:n_dn, :n_dn] = True
    start = 0
    for g in group_sizes:
        mask[start:start + g, start:start + g] = False
        start += g
    return mask
