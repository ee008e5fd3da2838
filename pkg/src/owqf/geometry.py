"""Normalized center-size boxes, overlap metrics and logit-space refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor

MIN_SIDE = 1e-4
LOGIT_EPS = 1e-6


@dataclass(frozen=True)
class Box:
    """Axis-aligned box (cx, cy, w, h) in [0, 1] image coordinates.

    Construction clamps the center into [0, 1] and each side into [1e-4, 1].
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise NumericError(f"non-finite box {vals}")
        object.__setattr__(self, "cx", min(max(float(self.cx), 0.0), 1.0))
        object.__setattr__(self, "cy", min(max(float(self.cy), 0.0), 1.0))
        object.__setattr__(self, "w", min(max(float(self.w), MIN_SIDE), 1.0))
        object.__setattr__(self, "h", min(max(float(self.h), MIN_SIDE), 1.0))

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def area(self) -> float:
        return self.w * self.h

    def contains(self, x: float, y: float) -> bool:
        return abs(x - self.cx) < self.w / 2 and abs(y - self.cy) < self.h / 2


@dataclass(frozen=True)
class BoxDelta:
    dcx: float
    dcy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dcx, self.dcy, self.dw, self.dh])


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (enclose - union) / enclose


def to_corners(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2,
                     b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], axis=1)


def from_corners(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.stack([(c[:, 0] + c[:, 2]) / 2, (c[:, 1] + c[:, 3]) / 2,
                     c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]], axis=1)


def pairwise_iou(a, b, generalized: bool = False) -> np.ndarray:
    """IoU (or GIoU) between every row of ``a`` [N,4] and ``b`` [M,4], center form."""
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    if not generalized:
        return out
    elt = np.minimum(ca[:, None, :2], cb[None, :, :2])
    erb = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    enclose = np.prod(erb - elt, axis=-1)
    return out - (enclose - union) / enclose


def giou_tensor(pred: Tensor, target) -> Tensor:
    """Row-wise GIoU between predicted boxes (Tensor [K,4]) and fixed targets [K,4]."""
    t = to_corners(target)
    cx, cy, w, h = (pred[:, i] for i in range(4))
    x1, y1, x2, y2 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    tx1, ty1, tx2, ty2 = (Tensor(t[:, i]) for i in range(4))
    iw = T.relu(T.minimum(x2, tx2) - T.maximum(x1, tx1))
    ih = T.relu(T.minimum(y2, ty2) - T.maximum(y1, ty1))
    inter = iw * ih
    union = w * h + Tensor((t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1])) - inter
    enclose = (T.maximum(x2, tx2) - T.minimum(x1, tx1)) * (T.maximum(y2, ty2) - T.minimum(y1, ty1))
    return inter / union - (enclose - union) / enclose


def inverse_sigmoid(x, eps: float = LOGIT_EPS):
    x = np.clip(np.asarray(x, dtype=np.float64), eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


def inverse_sigmoid_tensor(x: Tensor, eps: float = LOGIT_EPS) -> Tensor:
    x = T.clip(x, eps, 1.0 - eps)
    return T.log(x / (1.0 - x))


def _squash(z: np.ndarray) -> np.ndarray:
    out = 1.0 / (1.0 + np.exp(-np.clip(z, -700, 700)))
    out[2:] = np.clip(out[2:], MIN_SIDE, 1.0)
    return out


def apply_delta(b: Box, d: BoxDelta) -> Box:
    """Add ``d`` to ``b`` in logit space, squash with a sigmoid and clamp."""
    delta = d.as_array()
    if not np.all(np.isfinite(delta)):
        raise NumericError(f"non-finite box delta {tuple(delta)}")
    return Box(*_squash(inverse_sigmoid(b.as_array()) + delta))


def refine_boxes(boxes: Tensor, delta: Tensor) -> Tensor:
    """Differentiable batched form of :func:`apply_delta` on [K,4] tensors."""
    if not np.all(np.isfinite(delta.data)):
        raise NumericError("non-finite box delta")
    out = T.sigmoid(inverse_sigmoid_tensor(boxes) + delta)
    return T.clip(out, MIN_SIDE, 1.0)
