"""Bipartite matching and the training objective.

Total loss = 0.5 * (grounding_general + grounding_specific) + generation
+ dn_weight * denoising.  Each grounding term matches its own partition to the
ground truth with the Hungarian method; denoising queries already know their
targets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .geometry import pairwise_iou
from .kernels import linear_sum_assignment
from .tensor import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        vals = (self.w_class, self.w_l1, self.w_giou)
        if not all(np.isfinite(v) and v >= 0 for v in vals) or not any(vals):
            raise ValueError(f"cost weights must be finite, nonnegative and not all zero: {vals}")


@dataclass
class Terms:
    """One grounding or denoising evaluation: weighted total plus its parts."""

    loss: Tensor
    cls: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    assignment: tuple = field(default_factory=lambda: (np.zeros(0, np.intp), np.zeros(0, np.intp)))

    @property
    def value(self) -> float:
        return float(self.loss.data)


def hungarian_match(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-total-cost assignment of min(P, G) (prediction, ground truth) pairs."""
    return linear_sum_assignment(np.asarray(cost.data if isinstance(cost, Tensor) else cost))


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = FOCAL_ALPHA) -> Tensor:
    """Summed sigmoid focal loss (gamma = 2) with a hand-written backward."""
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    p = 1.0 / (1.0 + np.exp(-np.clip(x, -700, 700)))
    nlp = np.logaddexp(0.0, -x)  # -log p
    nlq = np.logaddexp(0.0, x)  # -log(1 - p)
    q = 1.0 - p
    wp, wn = alpha * t, (1 - alpha) * (1 - t)
    value = (wp * q * q * nlp + wn * p * p * nlq).sum()

    def bw(g):
        dpos = -2.0 * p * q * q * nlp - q * q * q
        dneg = 2.0 * p * p * q * nlq + p * p * p
        return (g * (wp * dpos + wn * dneg),)

    return T.op(value, (logits,), bw)


def box_regression(pred: Tensor, target) -> tuple[Tensor, Tensor]:
    """Summed L1 distance and summed (1 - GIoU) between matched box rows."""
    return (pred - Tensor(target)).abs().sum(), _giou_loss(pred, np.asarray(target, dtype=np.float64))


def _giou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    cx, cy, w, h = pred.data.T
    x1, x2, y1, y2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    tx1, tx2 = target[:, 0] - target[:, 2] / 2, target[:, 0] + target[:, 2] / 2
    ty1, ty2 = target[:, 1] - target[:, 3] / 2, target[:, 1] + target[:, 3] / 2
    raw_w = np.minimum(x2, tx2) - np.maximum(x1, tx1)
    raw_h = np.minimum(y2, ty2) - np.maximum(y1, ty1)
    iw, ih = np.maximum(raw_w, 0.0), np.maximum(raw_h, 0.0)
    inter = iw * ih
    union = w * h + target[:, 2] * target[:, 3] - inter
    ew = np.maximum(x2, tx2) - np.minimum(x1, tx1)
    eh = np.maximum(y2, ty2) - np.minimum(y1, ty1)
    enc = ew * eh
    value = (1.0 - (inter / union - (enc - union) / enc)).sum()

    def bw(g):
        # d(giou)/d(inter), d(giou)/d(area), d(giou)/d(enclose); loss = -giou
        d_inter = -(1.0 / union + inter / union**2 - 1.0 / enc)
        d_area = -(-inter / union**2 + 1.0 / enc)
        d_enc = -(-union / enc**2)
        pos_w, pos_h = (raw_w > 0) * 1.0, (raw_h > 0) * 1.0
        dx1 = -d_inter * ih * pos_w * (x1 >= tx1) - d_enc * eh * (x1 <= tx1)
        dx2 = d_inter * ih * pos_w * (x2 <= tx2) + d_enc * eh * (x2 >= tx2)
        dy1 = -d_inter * iw * pos_h * (y1 >= ty1) - d_enc * ew * (y1 <= ty1)
        dy2 = d_inter * iw * pos_h * (y2 <= ty2) + d_enc * ew * (y2 >= ty2)
        grad = np.stack([dx1 + dx2, dy1 + dy2,
                         (dx2 - dx1) / 2 + d_area * h, (dy2 - dy1) / 2 + d_area * w], axis=1)
        return (g * grad,)

    return T.op(value, (pred,), bw)


def _missing_prediction_cost(n_gt: int, alpha: float = FOCAL_ALPHA) -> float:
    # a ground truth with no prediction scores like a positive at logit 0
    return n_gt * alpha * 0.25 * np.log(2.0)


def match_cost(boxes: np.ndarray, logits: np.ndarray, gt_boxes: np.ndarray, gt_labels,
               weights: CostWeights) -> np.ndarray:
    prob = 1.0 / (1.0 + np.exp(-logits[:, np.asarray(gt_labels, dtype=np.intp)]))
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    g = pairwise_iou(boxes, gt_boxes, generalized=True)
    return weights.w_class * (1.0 - prob) + weights.w_l1 * l1 + weights.w_giou * (1.0 - g)


def grounding_loss(boxes: Tensor, logits: Tensor, gt_boxes, gt_labels, weights: CostWeights = CostWeights(),
                   assignment=None) -> Terms:
    """Hungarian-matched alignment + L1 + GIoU loss, normalized by the ground-truth count."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.intp).reshape(-1)
    n_pred, n_gt = boxes.shape[0], len(gt_labels)
    norm = float(max(n_gt, 1))
    if n_pred == 0:
        c = _missing_prediction_cost(n_gt) / norm
        return Terms(Tensor(weights.w_class * c), cls=c)
    if assignment is None:
        if n_gt:
            assignment = hungarian_match(match_cost(boxes.data, logits.data, gt_boxes, gt_labels, weights))
        else:
            assignment = (np.zeros(0, np.intp), np.zeros(0, np.intp))
    pi, gi = assignment
    target = np.zeros(logits.shape)
    target[pi, gt_labels[gi]] = 1.0
    cls = focal_loss(logits, target) * (1.0 / norm)
    loss = cls * weights.w_class
    l1v = gv = 0.0
    if len(pi):
        l1, gl = box_regression(boxes[pi], gt_boxes[gi])
        l1, gl = l1 * (1.0 / norm), gl * (1.0 / norm)
        loss = loss + l1 * weights.w_l1 + gl * weights.w_giou
        l1v, gv = float(l1.data), float(gl.data)
    return Terms(loss, float(cls.data), l1v, gv, (pi, gi))


def denoising_loss(boxes: Tensor, logits: Tensor, points: Sequence, gt_boxes, gt_labels,
                   weights: CostWeights = CostWeights()) -> Terms:
    """Known-target loss for denoising queries.

    Positive points learn their source label and box; negative points learn
    "no object" and have no box term.  Normalized by the positive count.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.intp).reshape(-1)
    if boxes.shape[0] != len(points):
        raise ConsistencyError(f"{boxes.shape[0]} denoising predictions for {len(points)} points")
    if not points:
        return Terms(Tensor(0.0))
    src = np.array([p.source_box_index for p in points], dtype=np.intp)
    if np.any(src < 0) or np.any(src >= len(gt_labels)):
        raise ConsistencyError("denoising point refers to a missing ground-truth box")
    pos = np.array([p.positive for p in points])
    norm = float(max(pos.sum(), 1))
    target = np.zeros(logits.shape)
    target[np.nonzero(pos)[0], gt_labels[src[pos]]] = 1.0
    cls = focal_loss(logits, target) * (1.0 / norm)
    loss = cls * weights.w_class
    l1v = gv = 0.0
    if pos.any():
        idx = np.nonzero(pos)[0]
        l1, gl = box_regression(boxes[idx], gt_boxes[src[idx]])
        l1, gl = l1 * (1.0 / norm), gl * (1.0 / norm)
        loss = loss + l1 * weights.w_l1 + gl * weights.w_giou
        l1v, gv = float(l1.data), float(gl.data)
    return Terms(loss, float(cls.data), l1v, gv)


def zero_generation(gt_captions=None, predicted_captions=None) -> float:
    return 0.0


@dataclass
class LossReport:
    grounding_general: float
    grounding_specific: float
    denoising: float
    generation: float
    total: float
    breakdown: dict = field(default_factory=dict)
    loss: Tensor | None = field(default=None, repr=False)


def total_loss(grounding_general: Terms | None, grounding_specific: Terms, denoising: Terms | None = None,
               generation_hook: Callable = zero_generation, captions=(None, None),
               dn_weight: float = 1.0, n_general: int | None = None,
               include_empty_general: bool = False) -> LossReport:
    """Combine terms.

    With no general queries (``n_general == 0``) the general grounding term
    is only the classification placeholder for unmatched ground truths; it is
    dropped unless ``include_empty_general`` is set, leaving the specific term
    at full weight.
    """
    if grounding_general is not None and n_general == 0 and not include_empty_general:
        grounding_general = None
    gen = generation_hook(*captions)
    gen_t = gen if isinstance(gen, Tensor) else Tensor(float(gen))
    if grounding_general is None:
        loss = grounding_specific.loss
        gg = 0.0
    else:
        loss = (grounding_general.loss + grounding_specific.loss) * 0.5
        gg = grounding_general.value
    loss = loss + gen_t
    dn = 0.0
    if denoising is not None:
        loss = loss + denoising.loss * dn_weight
        dn = denoising.value
    breakdown = {}
    for name, t in (("general", grounding_general), ("specific", grounding_specific), ("denoising", denoising)):
        if t is not None:
            breakdown[name] = {"class": t.cls, "l1": t.l1, "giou": t.giou}
    return LossReport(gg, grounding_specific.value, dn, float(gen_t.data), float(loss.data), breakdown, loss)
