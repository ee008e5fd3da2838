"""Simulated attention-map point prompts.

Stands in for a vision-language model that first names the categories in an
image and keeps one attention stack per generated name.  Objects leave
Gaussian peaks in the stack of their (possibly hallucinated) label, heads are
aggregated, layers are propagated into a refined saliency map, and local
maxima become scored point prompts carrying that label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import peak_nms
from .world import Scene

FLOW_EPS = 1e-8


@dataclass
class AttentionStack:
    maps: np.ndarray  # [layers, heads, H, W], nonnegative
    sources: list[tuple[float, float, int]] = field(default_factory=list)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 4:
            raise ValueError(f"attention stack must be 4-D, got {self.maps.shape}")
        if not np.all(np.isfinite(self.maps)) or np.any(self.maps < 0):
            raise ValueError("attention maps must be finite and nonnegative")


@dataclass
class PromptPoint:
    x: float
    y: float
    score: float
    proposed_label: int = -1

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"prompt point ({self.x}, {self.y}) outside the unit square")


@dataclass(frozen=True)
class PromptConfig:
    fidelity: float = 0.9
    threshold: float = 0.3
    max_points: int = 20
    label_noise: float = 0.1
    layers: int = 3
    heads: int = 4
    grid: int = 16


def _blob(grid: int, x: float, y: float, sx: float, sy: float) -> np.ndarray:
    c = (np.arange(grid) + 0.5) / grid
    gx = np.exp(-0.5 * ((c - x) / sx) ** 2)
    gy = np.exp(-0.5 * ((c - y) / sy) ** 2)
    return gy[:, None] * gx[None, :]


@dataclass
class _Peak:
    x: float
    y: float
    sx: float
    sy: float
    amps: np.ndarray  # per layer
    heads: np.ndarray  # bool mask over heads
    label: int


def _draw_peaks(scene: Scene, fidelity: float, seed: int, n_categories: int, label_noise: float, layers: int,
                heads: int, grid: int) -> tuple[np.ndarray, list[_Peak]]:
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError("fidelity must lie in [0, 1]")
    rng = np.random.default_rng([int(seed), int(scene.image_id), 31337])
    background = 0.02 + 0.02 * rng.random((layers, heads, grid, grid))
    head_p = 0.5 * (1.0 + fidelity)
    peaks: list[_Peak] = []

    def peak(x, y, sx, sy, amp, label):
        mask = rng.random(heads) < head_p
        if not mask.any():
            mask[rng.integers(heads)] = True
        peaks.append(_Peak(float(x), float(y), sx, sy, amp * rng.uniform(0.85, 1.0, layers), mask, int(label)))

    for box, label in zip(scene.gt_boxes, scene.gt_labels):
        if rng.random() >= fidelity:
            continue
        x = box.cx + rng.uniform(-1, 1) * box.w / 8
        y = box.cy + rng.uniform(-1, 1) * box.h / 8
        if rng.random() < label_noise and n_categories > 1:
            label = int((label + 1 + rng.integers(n_categories - 1)) % n_categories)
        peak(x, y, max(box.w / 5, 1.0 / grid), max(box.h / 5, 1.0 / grid), 1.0, label)
    n_distract = rng.poisson((1.0 - fidelity) * max(1, len(scene.gt_boxes)))
    for _ in range(n_distract):
        x, y = rng.uniform(0.05, 0.95, size=2)
        s = rng.uniform(0.03, 0.08)
        peak(x, y, s, s, rng.uniform(0.6, 1.0), rng.integers(n_categories))
    return background, peaks


def _render(background: np.ndarray, peaks: list[_Peak]) -> AttentionStack:
    maps = background.copy()
    grid = maps.shape[-1]
    for pk in peaks:
        blob = _blob(grid, pk.x, pk.y, pk.sx, pk.sy)
        for li, a in enumerate(pk.amps):
            for hi in np.nonzero(pk.heads)[0]:
                maps[li, hi] = np.maximum(maps[li, hi], a * blob)
    return AttentionStack(maps, [(pk.x, pk.y, pk.label) for pk in peaks])


def synthesize_attention(scene: Scene, fidelity: float, seed: int, n_categories: int = 12,
                         label_noise: float = 0.1, layers: int = 3, heads: int = 4,
                         grid: int = 16) -> AttentionStack:
    """Synthetic attention stack for ``scene`` with every peak in one stack.

    Each object is attended with probability ``fidelity``; when attended, each
    head carries its peak with probability (1 + fidelity) / 2.  Roughly
    ``(1 - fidelity) * max(1, n_objects)`` distractor peaks land at random.
    ``sources`` lists (x, y, generated label) per peak.
    """
    return _render(*_draw_peaks(scene, fidelity, seed, n_categories, label_noise, layers, heads, grid))


def synthesize_category_stacks(scene: Scene, fidelity: float, seed: int, n_categories: int = 12,
                               label_noise: float = 0.1, layers: int = 3, heads: int = 4,
                               grid: int = 16) -> dict[int, AttentionStack]:
    """One stack per generated category, holding only the peaks generated under that label.

    The peaks are the same draws as :func:`synthesize_attention`; a
    hallucinated label moves its peak into the wrong category's stack.
    """
    background, peaks = _draw_peaks(scene, fidelity, seed, n_categories, label_noise, layers, heads, grid)
    labels = sorted({pk.label for pk in peaks})
    return {c: _render(background, [pk for pk in peaks if pk.label == c]) for c in labels}


def aggregate_heads(stack: AttentionStack | np.ndarray) -> np.ndarray:
    """Per-layer weighted mean over heads, weights proportional to each head's peak/mean ratio."""
    maps = stack.maps if isinstance(stack, AttentionStack) else np.asarray(stack, dtype=np.float64)
    peak = maps.max(axis=(2, 3))
    mean = maps.mean(axis=(2, 3))
    ratio = np.where(mean > 0, peak / np.where(mean > 0, mean, 1.0), 0.0)
    total = ratio.sum(axis=1, keepdims=True)
    weights = np.where(total > 0, ratio / np.where(total > 0, total, 1.0), 1.0 / maps.shape[1])
    return np.einsum("lh,lhij->lij", weights, maps)


def _max_normalize(a: np.ndarray) -> np.ndarray:
    m = a.max()
    return a / m if m > 0 else a


def attention_flow(per_layer: np.ndarray) -> np.ndarray:
    """Propagate layer maps by element-wise products, renormalizing to max 1 each step."""
    per_layer = np.asarray(per_layer, dtype=np.float64)
    if per_layer.ndim != 3 or per_layer.shape[0] < 1:
        raise ValueError("need at least one layer map")
    refined = _max_normalize(per_layer[0])
    for nxt in per_layer[1:]:
        refined = _max_normalize(refined * nxt + FLOW_EPS)
    return refined


def sample_prompt_points(refined: np.ndarray, threshold: float = 0.3, max_points: int = 20,
                         radius: int = 2) -> list[PromptPoint]:
    """Thresholded local maxima, suppressed within ``radius`` cells, best first.

    Each point sits at the value-weighted centroid of its 3x3 neighborhood.
    """
    refined = np.asarray(refined, dtype=np.float64)
    if not 0.0 < threshold < 1.0 or max_points < 1:
        raise ValueError("threshold must lie in (0, 1) and max_points >= 1")
    h, w = refined.shape
    points = []
    for flat in peak_nms(refined, float(threshold), int(radius))[:max_points]:
        i, j = divmod(int(flat), w)
        i0, i1, j0, j1 = max(i - 1, 0), min(i + 2, h), max(j - 1, 0), min(j + 2, w)
        patch = refined[i0:i1, j0:j1]
        ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
        mass = patch.sum()
        cy = ((ii * patch).sum() / mass + 0.5) / h
        cx = ((jj * patch).sum() / mass + 0.5) / w
        points.append(PromptPoint(float(np.clip(cx, 0, 1)), float(np.clip(cy, 0, 1)), float(refined[i, j])))
    return points


def simulate_prompts(scene: Scene, cfg: PromptConfig, seed: int, n_categories: int) -> list[PromptPoint]:
    """Point prompts from each generated category's refined map, best first across categories."""
    stacks = synthesize_category_stacks(scene, cfg.fidelity, seed, n_categories, cfg.label_noise,
                                        cfg.layers, cfg.heads, cfg.grid)
    points = []
    for label, stack in stacks.items():
        for p in sample_prompt_points(attention_flow(aggregate_heads(stack)), cfg.threshold, cfg.max_points):
            p.proposed_label = label
            points.append(p)
    points.sort(key=lambda p: -p.score)  # stable: ties keep category order
    return points[:cfg.max_points]


def load_prompt_file(path) -> dict[int, list[PromptPoint]]:
    """User-supplied prompts: one object ``{image_id, points: [{x, y, score, label}]}`` or a list of them."""
    doc = json.loads(Path(path).read_text())
    rows = doc if isinstance(doc, list) else [doc]
    out: dict[int, list[PromptPoint]] = {}
    for row in rows:
        pts = [PromptPoint(float(p["x"]), float(p["y"]), float(p.get("score", 1.0)), int(p.get("label", -1)))
               for p in row["points"]]
        out[int(row["image_id"])] = sorted(pts, key=lambda p: -p.score)
    return out
