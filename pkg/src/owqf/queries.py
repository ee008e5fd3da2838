"""Point features, initial boxes, ranked learnable queries and specific queries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Box, inverse_sigmoid
from .nn import MLP, LayerNorm, Linear, Module, param
from .tensor import ConfigurationError, NumericError, Tensor
from .world import FeaturePyramid

DEFAULT_POINT_SIZE = 0.1


@dataclass
class QueryBank:
    """Query partitions in decoder order: denoising, general, specific.

    Boxes are center-form tensors of shape [n, 4]; ``general_source[i]`` is
    the index of the point that seeded general query i.
    """

    general_queries: Tensor
    general_boxes: Tensor
    specific_queries: Tensor
    specific_boxes: Tensor
    general_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    general_source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    dn_queries: Tensor | None = None
    dn_boxes: Tensor | None = None
    dn_group_sizes: list[int] = field(default_factory=list)

    @property
    def n_dn(self) -> int:
        return 0 if self.dn_queries is None else self.dn_queries.shape[0]

    @property
    def n_general(self) -> int:
        return self.general_queries.shape[0]

    @property
    def n_specific(self) -> int:
        return self.specific_queries.shape[0]

    def general_box_list(self) -> list[Box]:
        return [Box(*b) for b in self.general_boxes.data]

    def specific_box_list(self) -> list[Box]:
        return [Box(*b) for b in self.specific_boxes.data]

    def replace(self, queries: Tensor, boxes: Tensor) -> "QueryBank":
        """New bank with the same partition sizes from concatenated [dn|general|specific] rows."""
        a, b = self.n_dn, self.n_dn + self.n_general
        return QueryBank(
            queries[a:b], boxes[a:b], queries[b:], boxes[b:],
            self.general_scores, self.general_source,
            queries[:a] if self.n_dn else None, boxes[:a] if self.n_dn else None,
            list(self.dn_group_sizes))


def _grid_coords(coord: np.ndarray, n: int):
    u = np.clip(np.asarray(coord, dtype=np.float64) * n - 0.5, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.intp), max(n - 2, 0))
    return i0, u - i0


def interpolate_points(fp: FeaturePyramid, xs, ys) -> np.ndarray:
    """Bilinear features at many points: returns [P, levels, d].

    Cell (i, j) of a level with side H x W is centered at ((j+0.5)/W, (i+0.5)/H);
    coordinates beyond the outermost centers clamp to the border.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if np.any((xs < 0) | (xs > 1) | (ys < 0) | (ys > 1)) or not np.all(np.isfinite(xs) & np.isfinite(ys)):
        raise ValueError("point coordinates must lie in [0, 1]^2")
    out = []
    for lv in fp.levels:
        h, w = lv.shape[:2]
        j0, fx = _grid_coords(xs, w)
        i0, fy = _grid_coords(ys, h)
        j1 = np.minimum(j0 + 1, w - 1)
        i1 = np.minimum(i0 + 1, h - 1)
        fx, fy = fx[:, None], fy[:, None]
        out.append(lv[i0, j0] * (1 - fx) * (1 - fy) + lv[i0, j1] * fx * (1 - fy)
                   + lv[i1, j0] * (1 - fx) * fy + lv[i1, j1] * fx * fy)
    return np.stack(out, axis=1)


def interpolate_point_feature(fp: FeaturePyramid, x: float, y: float) -> Tensor:
    return Tensor(interpolate_points(fp, [x], [y])[0])


def rank_order(scores: Sequence[float], n_bank: int) -> np.ndarray:
    """Point indices by descending score (stable on ties), truncated to ``n_bank``.

    Position i of the result is the point paired with learnable query i.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    return order[: max(0, int(n_bank))]


class ClassificationHead(Module):
    """Alignment logits between queries and projected text embeddings."""

    def __init__(self, rng, d: int, d_text: int, prior: float = 0.01):
        self.query_proj = Linear(rng, d, d)
        self.text_proj = Linear(rng, d_text, d)
        self.bias = param(np.array([-np.log((1 - prior) / prior)]))
        self._scale = 1.0 / np.sqrt(d)

    def __call__(self, queries: Tensor, text: Tensor) -> Tensor:
        t = self.text_proj(text)
        return (self.query_proj(queries) @ t.T) * self._scale + self.bias


class QueryBuilder(Module):
    """Trainable pieces that turn points and pyramid tokens into initial queries."""

    def __init__(self, rng, d: int, n_learnable: int = 900, n_specific: int = 300,
                 add_point_feature: bool = False):
        self.adapter = Linear(rng, d, d)
        self.adapter_norm = LayerNorm(d)
        self.point_box_head = MLP(rng, d, d, 4, zero_last=True)
        self.learnable = param(rng.normal(0.0, 1.0, size=(n_learnable, d)))
        self.enc_proj = Linear(rng, d, d)
        self.enc_box_head = MLP(rng, d, d, 4, zero_last=True)
        self.specific_bank = param(rng.normal(0.0, 1.0, size=(n_specific, d)))
        self._add_point_feature = add_point_feature

    @property
    def n_learnable(self) -> int:
        return self.learnable.shape[0]

    @property
    def n_specific(self) -> int:
        return self.specific_bank.shape[0]

    def adapt(self, point_features: Tensor) -> Tensor:
        """Mean over pyramid levels, then linear + layer norm: [P, L, d] -> [P, d]."""
        return self.adapter_norm(self.adapter(point_features.mean(axis=1)))

    def point_boxes(self, point_features: Tensor, xs, ys, cls_head: ClassificationHead, text: Tensor):
        """Initial boxes [P,4] and score logits [P] for points with features [P, L, d].

        The box head's center offset is added to the point, and sides start from
        a 0.1 x 0.1 prior; a zero head returns exactly that prior box.
        """
        f = self.adapt(point_features)
        n = len(xs)
        prior = np.stack([np.asarray(xs, float), np.asarray(ys, float),
                          np.full(n, DEFAULT_POINT_SIZE), np.full(n, DEFAULT_POINT_SIZE)], axis=1)
        boxes = T.sigmoid(Tensor(inverse_sigmoid(prior)) + self.point_box_head(f))
        logits = cls_head(f, text)
        score_logit = _rowmax(logits)
        if not np.all(np.isfinite(boxes.data)) or not np.all(np.isfinite(score_logit.data)):
            raise NumericError("non-finite activations in point head")
        return boxes, score_logit, f

    def general_partition(self, point_features: Tensor, boxes: Tensor, scores, ranked: bool = True):
        """Pair score-ranked points with learnable queries (or query 0 for all when not ranked)."""
        order = rank_order(scores, self.n_learnable)
        m = len(order)
        bank_idx = np.arange(m) if ranked else np.zeros(m, dtype=np.intp)
        queries = self.learnable[bank_idx]
        if self._add_point_feature and m:
            queries = queries + self.adapt(point_features[order])
        return queries, boxes[order], np.asarray(scores, float)[order], order

    def specific_partition(self, fp: FeaturePyramid, cls_head: ClassificationHead, text: Tensor,
                           n_select: int | None = None):
        """Top-scoring pyramid locations become anchors for the specific queries.

        Returns (queries [S,d], boxes [S,4], proposal logits [S,C], selected token indices).
        """
        s = self.n_specific if n_select is None else n_select
        tokens = fp.tokens()
        if s < 1 or s > tokens.shape[0]:
            raise ConfigurationError(f"n_specific={s} must lie in [1, {tokens.shape[0]}] pyramid locations")
        if s > self.n_specific:
            raise ConfigurationError(f"n_specific={s} exceeds the specific bank size {self.n_specific}")
        enc = self.enc_proj(Tensor(tokens))
        logits = cls_head(enc, text)
        score = logits.data.max(axis=1)
        idx = np.argsort(-score, kind="stable")[:s]
        anchors = fp.token_boxes()[idx]
        prior = anchors.copy()
        prior[:, 2:] = np.clip(anchors[:, 2:] * 2.0, 0.02, 0.9)
        sel = enc[idx]
        boxes = T.sigmoid(Tensor(inverse_sigmoid(prior)) + self.enc_box_head(sel))
        return self.specific_bank[np.arange(s)], boxes, logits[idx], idx


def _rowmax(x: Tensor) -> Tensor:
    if x.shape[1] == 0:
        return Tensor(np.full(x.shape[0], -np.inf))
    j = np.argmax(x.data, axis=1)
    return x[np.arange(x.shape[0]), j]


def point_to_initial_box(point_feature: Tensor, builder: QueryBuilder, cls_head: ClassificationHead,
                         text: Tensor, x: float, y: float) -> tuple[Box, float]:
    """Single-point convenience wrapper: (initial box, sigmoid score)."""
    pf = point_feature if point_feature.ndim == 3 else point_feature.reshape(1, *point_feature.shape)
    with T.no_grad():
        boxes, score_logit, _ = builder.point_boxes(pf, [x], [y], cls_head, text)
    return Box(*boxes.data[0]), float(1.0 / (1.0 + np.exp(-score_logit.data[0])))
