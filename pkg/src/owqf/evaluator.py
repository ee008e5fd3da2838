"""Fixed-AP evaluation with frequency buckets and open-ended label mapping."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .geometry import Box, pairwise_iou
from .kernels import greedy_match
from .losses import ConsistencyError
from .tensor import ConfigurationError, NumericError
from .world import BUCKETS, CategoryTable, Scene

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
OPEN_SET = "open-set"
OPEN_ENDED = "open-ended"
SCHEMA = 1


@dataclass
class Detection:
    image_id: int
    box: Box
    score: float
    label: int = -1
    embedding: np.ndarray | None = field(default=None, repr=False)
    similarity: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise NumericError(f"non-finite detection score {self.score}")
        if not isinstance(self.box, Box):
            self.box = Box(*self.box)

    def to_json(self) -> dict:
        return {"image_id": int(self.image_id), "box": [float(v) for v in self.box.as_array()],
                "score": float(self.score), "label": int(self.label)}


@dataclass
class EvalReport:
    ap: float
    ap_r: float | None
    ap_c: float | None
    ap_f: float | None
    per_category: dict[int, float]
    mode: str = OPEN_SET

    def to_json(self) -> dict:
        def r(v):
            return None if v is None else round(float(v), 12)

        return {"schema": SCHEMA, "mode": self.mode, "ap": r(self.ap), "ap_r": r(self.ap_r),
                "ap_c": r(self.ap_c), "ap_f": r(self.ap_f),
                "per_category": {str(k): r(v) for k, v in sorted(self.per_category.items())}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(tp), envelope[np.minimum(idx, len(tp) - 1)], 0.0)
    return float(q.mean())


def class_ap(dets: Sequence[Detection], gt: Sequence[tuple[int, np.ndarray]], thresholds=IOU_THRESHOLDS,
             cap: int = 1000) -> float:
    """AP of one class, averaged over IoU thresholds; ``gt`` holds (image_id, box array)."""
    if not gt:
        return float("nan")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)[:cap]
    if not order:
        return 0.0
    d = [dets[i] for i in order]
    det_boxes = np.array([x.box.as_array() for x in d])
    gt_boxes = np.array([b for _, b in gt])
    ious = pairwise_iou(det_boxes, gt_boxes)
    same = np.array([x.image_id for x in d])[:, None] == np.array([i for i, _ in gt])[None, :]
    ious = np.where(same, ious, -1.0)
    tp = greedy_match(ious, np.asarray(thresholds, dtype=np.float64))
    return float(np.mean([interpolated_ap(tp[t], len(gt)) for t in range(len(thresholds))]))


def fixed_ap(dets: Iterable[Detection], gts: Sequence[Scene], table: CategoryTable,
             iou_thresholds=IOU_THRESHOLDS, per_class_cap: int = 1000, mode: str = OPEN_SET) -> EvalReport:
    """Fixed AP: per class, the top ``per_class_cap`` detections over the whole dataset."""
    n_cat = len(table)
    by_class: dict[int, list[Detection]] = {c: [] for c in range(n_cat)}
    for det in dets:
        if not 0 <= det.label < n_cat:
            raise ConsistencyError(f"detection label {det.label} not in the category table")
        by_class[det.label].append(det)
    gt_by_class: dict[int, list] = {c: [] for c in range(n_cat)}
    for scene in gts:
        for box, label in zip(scene.gt_boxes, scene.gt_labels):
            gt_by_class[label].append((scene.image_id, box.as_array()))
    per_cat = {}
    for c in range(n_cat):
        if gt_by_class[c]:
            per_cat[c] = class_ap(by_class[c], gt_by_class[c], iou_thresholds, per_class_cap)
    ap = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    buckets = {}
    for b in BUCKETS:
        vals = [v for c, v in per_cat.items() if table.buckets[c] == b]
        buckets[b] = float(np.mean(vals)) if vals else None
    return EvalReport(ap, buckets["rare"], buckets["common"], buckets["frequent"], per_cat, mode)


def open_ended_map(dets: Sequence[Detection], table: CategoryTable) -> list[Detection]:
    """Label each detection with the category of highest cosine similarity (lowest index on ties)."""
    emb = table.embeddings / np.linalg.norm(table.embeddings, axis=1, keepdims=True)
    out = []
    for det in dets:
        v = np.asarray(det.embedding, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise NumericError("detection embedding has zero or non-finite norm")
        sims = emb @ (v / n)
        k = int(np.argmax(sims))
        out.append(Detection(det.image_id, det.box, det.score, k, det.embedding, float(sims[k])))
    return out


def resolve_mode(mode: str | None, predefined: Sequence[int] | None) -> str:
    """Empty list means open-ended; an explicit open-set request needs a nonempty list."""
    predefined = list(predefined or [])
    if mode is None:
        return OPEN_SET if predefined else OPEN_ENDED
    if mode not in (OPEN_SET, OPEN_ENDED):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if mode == OPEN_SET and not predefined:
        raise ConfigurationError("open-set mode needs a nonempty category list; "
                                 "use --mode open-ended to detect without one")
    return mode


def evaluate_mode(model, dataset, mode: str | None, predefined_list: Sequence[int] | None = None,
                  per_class_cap: int = 1000, prompts: dict | None = None) -> EvalReport:
    """Run ``model.detect`` over ``dataset`` and score the result.

    ``model.detect(scene, mode, predefined, prompts)`` returns detections with
    category labels (open-set) or label embeddings (open-ended).
    """
    mode = resolve_mode(mode, predefined_list)
    dets: list[Detection] = []
    for scene in dataset.scenes:
        pts = None if prompts is None else prompts.get(scene.image_id, [])
        found = model.detect(scene, mode, list(predefined_list or []), pts)
        if mode == OPEN_ENDED:
            found = open_ended_map(found, dataset.table)
        dets.extend(found)
    return fixed_ap(dets, dataset.scenes, dataset.table, per_class_cap=per_class_cap, mode=mode)


def predictions_json(dets: Sequence[Detection]) -> str:
    return json.dumps({"schema": SCHEMA, "predictions": [d.to_json() for d in dets]}, sort_keys=True) + "\n"


def load_predictions(text: str) -> list[Detection]:
    doc = json.loads(text)
    rows = doc["predictions"] if isinstance(doc, dict) else doc
    return [Detection(int(r["image_id"]), Box(*r["box"]), float(r["score"]), int(r["label"])) for r in rows]
