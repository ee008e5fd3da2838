"""Procedural scenes and the synthetic backbone that renders them.

A world fixes a category vocabulary (unit text embeddings with a frequency
bucket each) and two projection matrices.  Each object writes a windowed
mixture of its category embedding and a geometry code into every pyramid
level, on top of Gaussian background noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box, pairwise_iou

BUCKETS = ("rare", "common", "frequent")
NOISE_SIGMA = 0.1
SEMANTIC_AMPLITUDE = 1.5
GEOMETRY_AMPLITUDE = 1.0
MIN_SIZE, MAX_SIZE = 0.15, 0.4
MAX_OVERLAP = 0.3


def _embedding(embedding_seed: int, d_text: int) -> np.ndarray:
    v = np.random.default_rng(embedding_seed).standard_normal(d_text)
    return v / np.linalg.norm(v)


@dataclass
class CategoryTable:
    names: list[str]
    buckets: list[str]
    embedding_seeds: list[int]
    d_text: int
    embeddings: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.stack([_embedding(s, self.d_text) for s in self.embedding_seeds])

    def __len__(self):
        return len(self.names)

    @classmethod
    def build(cls, counts=(2, 4, 6), d_text: int = 16, seed: int = 0) -> "CategoryTable":
        buckets = [b for b, n in zip(BUCKETS, counts) for _ in range(n)]
        names = [f"{b}_{i}" for i, b in enumerate(buckets)]
        seeds = [int(seed) * 1000 + i for i in range(len(buckets))]
        return cls(names, buckets, seeds, d_text)

    def ids_in(self, bucket: str) -> list[int]:
        return [i for i, b in enumerate(self.buckets) if b == bucket]

    def to_json(self) -> list[dict]:
        return [{"id": i, "name": n, "bucket": b, "embedding_seed": s}
                for i, (n, b, s) in enumerate(zip(self.names, self.buckets, self.embedding_seeds))]

    @classmethod
    def from_json(cls, rows: list[dict], d_text: int) -> "CategoryTable":
        rows = sorted(rows, key=lambda r: r["id"])
        return cls([r["name"] for r in rows], [r["bucket"] for r in rows],
                   [int(r["embedding_seed"]) for r in rows], d_text)


@dataclass
class Scene:
    image_id: int
    gt_boxes: list[Box]
    gt_labels: list[int]
    seed: int = 0

    def boxes_array(self) -> np.ndarray:
        return np.array([b.as_array() for b in self.gt_boxes]).reshape(-1, 4)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "seed": self.seed,
                "boxes": [[round(v, 12) for v in b.as_array().tolist()] for b in self.gt_boxes],
                "labels": list(self.gt_labels)}

    @classmethod
    def from_json(cls, row: dict) -> "Scene":
        return cls(int(row["image_id"]), [Box(*b) for b in row["boxes"]],
                   [int(x) for x in row["labels"]], int(row.get("seed", 0)))


def scene_seed(dataset_seed: int, image_id: int) -> int:
    return int(np.random.SeedSequence([int(dataset_seed), int(image_id)]).generate_state(1)[0])


def generate_scene(seed: int, n_objects: int, category_mix=(0.1, 0.3, 0.6),
                   table: CategoryTable | None = None, image_id: int = 0) -> Scene:
    """Random non-degenerate boxes with pairwise IoU <= 0.3.

    Each object's bucket is drawn from ``category_mix`` (rare, common,
    frequent), then a category uniformly within the bucket.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    table = table or CategoryTable.build()
    rng = np.random.default_rng(seed)
    mix = np.asarray(category_mix, dtype=np.float64)
    mix = mix / mix.sum()
    by_bucket = [table.ids_in(b) for b in BUCKETS]
    boxes: list[np.ndarray] = []
    labels: list[int] = []
    for _ in range(n_objects):
        bucket = int(rng.choice(3, p=mix))
        pool = by_bucket[bucket] or [i for ids in by_bucket for i in ids]
        label = int(pool[rng.integers(len(pool))])
        for _attempt in range(100):
            w, h = rng.uniform(MIN_SIZE, MAX_SIZE, size=2)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            cand = np.array([cx, cy, w, h])
            if not boxes or pairwise_iou(cand[None], np.array(boxes)).max() <= MAX_OVERLAP:
                boxes.append(cand)
                labels.append(label)
                break
    return Scene(image_id, [Box(*b) for b in boxes], labels, int(seed))


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]

    @property
    def d(self) -> int:
        return self.levels[0].shape[-1]

    def tokens(self) -> np.ndarray:
        return np.concatenate([lv.reshape(-1, lv.shape[-1]) for lv in self.levels], axis=0)

    def token_boxes(self) -> np.ndarray:
        """Cell-center anchors (cx, cy, cell_w, cell_h) for every flattened token."""
        out = []
        for lv in self.levels:
            h, w = lv.shape[:2]
            ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
            out.append(np.stack([xs.ravel(), ys.ravel(), np.full(h * w, 1.0 / w), np.full(h * w, 1.0 / h)], 1))
        return np.concatenate(out, axis=0)


class World:
    """Category vocabulary plus the fixed projections used for rendering."""

    def __init__(self, table: CategoryTable, d: int = 32, n_levels: int = 2, base_grid: int = 16,
                 seed: int = 0):
        if n_levels < 2 or base_grid // 2 ** (n_levels - 1) < 2:
            raise ValueError("need at least 2 levels with side >= 2")
        self.table = table
        self.d = d
        self.n_levels = n_levels
        self.base_grid = base_grid
        self.seed = seed
        rng = np.random.default_rng([int(seed), 7919])
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self.semantic = q[:, : min(table.d_text, d)] if table.d_text <= d else \
            rng.standard_normal((d, table.d_text)) / np.sqrt(d)
        self.geometric = rng.standard_normal((d, 4)) / np.sqrt(d)

    def render(self, scene: Scene) -> FeaturePyramid:
        rng = np.random.default_rng([int(self.seed), int(scene.image_id), 104729])
        levels = []
        for lv in range(self.n_levels):
            side = self.base_grid // 2 ** lv
            ys, xs = np.meshgrid((np.arange(side) + 0.5) / side, (np.arange(side) + 0.5) / side, indexing="ij")
            feat = NOISE_SIGMA * rng.standard_normal((side, side, self.d))
            for box, label in zip(scene.gt_boxes, scene.gt_labels):
                hx = max(box.w / 2, 1.0 / side)
                hy = max(box.h / 2, 1.0 / side)
                ux = np.clip(np.abs(xs - box.cx) / hx, 0, 1)
                uy = np.clip(np.abs(ys - box.cy) / hy, 0, 1)
                win = np.cos(0.5 * np.pi * ux) * np.cos(0.5 * np.pi * uy)
                sem = self.semantic @ self.table.embeddings[label]
                geo = self.geometric @ np.array([0.0, 0.0, box.w, box.h])
                rel = np.stack([(box.cx - xs) / box.w, (box.cy - ys) / box.h], -1) @ self.geometric[:, :2].T
                feat += win[..., None] * (SEMANTIC_AMPLITUDE * sem + GEOMETRY_AMPLITUDE * (geo + rel))
            levels.append(feat)
        return FeaturePyramid(levels)


def render_features(scene: Scene, d: int = 32, levels: int = 2, table: CategoryTable | None = None,
                    world_seed: int = 0, base_grid: int = 16) -> FeaturePyramid:
    return World(table or CategoryTable.build(), d, levels, base_grid, world_seed).render(scene)


@dataclass
class Dataset:
    table: CategoryTable
    scenes: list[Scene]
    seed: int = 0

    def __len__(self):
        return len(self.scenes)


def generate_dataset(seed: int, n_images: int, table: CategoryTable, n_objects=(0, 6),
                     category_mix=(0.1, 0.3, 0.6), first_id: int = 0) -> Dataset:
    lo, hi = n_objects
    scenes = []
    for image_id in range(first_id, first_id + n_images):
        s = scene_seed(seed, image_id)
        k = int(np.random.default_rng([s, 1]).integers(lo, hi + 1))
        scenes.append(generate_scene(s, k, category_mix, table, image_id))
    return Dataset(table, scenes, seed)


def write_dataset(ds: Dataset, lines_path: Path, table_path: Path):
    Path(lines_path).parent.mkdir(parents=True, exist_ok=True)
    with open(lines_path, "w") as f:
        for s in ds.scenes:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    with open(table_path, "w") as f:
        json.dump({"schema": 1, "d_text": ds.table.d_text, "categories": ds.table.to_json()}, f,
                  indent=1, sort_keys=True)


def read_table(table_path: Path) -> CategoryTable:
    doc = json.loads(Path(table_path).read_text())
    return CategoryTable.from_json(doc["categories"], int(doc["d_text"]))


def read_scenes(lines_path: Path) -> list[Scene]:
    with open(lines_path) as f:
        return [Scene.from_json(json.loads(line)) for line in f if line.strip()]


def split_by_bucket(labels: Sequence[int], table: CategoryTable) -> dict[str, int]:
    out = {b: 0 for b in BUCKETS}
    for lab in labels:
        out[table.buckets[lab]] += 1
    return out
