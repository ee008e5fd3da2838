import json

import numpy as np
import pytest

from owqf.queries import interpolate_points
from owqf.world import BUCKETS, NOISE_SIGMA, CategoryTable, Scene, World, generate_dataset, generate_scene, \
    read_scenes, read_table, render_features, scene_seed, split_by_bucket, write_dataset
from owqf.geometry import Box, pairwise_iou


@pytest.fixture(scope="module")
def table():
    return CategoryTable.build((2, 4, 6), 16, 7)


def test_empty_scene(table):
    s = generate_scene(1, 0, table=table)
    assert s.gt_boxes == [] and s.gt_labels == []


def test_scene_determinism_and_validity(table):
    a, b = generate_scene(5, 6, table=table), generate_scene(5, 6, table=table)
    assert a == b
    assert all(0 <= lab < len(table) for lab in a.gt_labels)
    arr = a.boxes_array()
    iou = pairwise_iou(arr, arr) - np.eye(len(arr))
    assert iou.max() <= 0.3 + 1e-12
    assert np.all(arr[:, 2:] >= 0.15 - 1e-12)


def test_embeddings_unit_norm(table):
    assert np.allclose(np.linalg.norm(table.embeddings, axis=1), 1.0)


def test_bucket_frequencies(table):
    labels = []
    for i in range(1000):
        labels += generate_scene(scene_seed(11, i), 3, (0.1, 0.3, 0.6), table, i).gt_labels
    counts = split_by_bucket(labels, table)
    n = sum(counts.values())
    for bucket, p in zip(BUCKETS, (0.1, 0.3, 0.6)):
        assert abs(counts[bucket] / n - p) <= 0.03


def test_empty_scene_renders_noise(table):
    fp = render_features(Scene(0, [], []), d=32, levels=2, table=table)
    assert len(fp.levels) == 2 and fp.levels[1].shape[:2] == (8, 8)
    for lv in fp.levels:
        assert abs(lv.mean()) <= 0.02
        assert lv.std() == pytest.approx(NOISE_SIGMA, rel=0.1)


def test_single_object_peak_inside_box(table):
    world = World(table, d=32, seed=3)
    rng = np.random.default_rng(0)
    for k in range(20):
        box = Box(*rng.uniform(0.25, 0.75, 2), *rng.uniform(0.15, 0.4, 2))
        fp = world.render(Scene(k, [box], [int(rng.integers(len(table)))]))
        coarse = fp.levels[-1]
        side = coarse.shape[0]
        i, j = np.unravel_index(np.argmax(np.linalg.norm(coarse, axis=-1)), coarse.shape[:2])
        assert box.contains((j + 0.5) / side, (i + 0.5) / side)
        center = interpolate_points(fp, [box.cx], [box.cy])[0, -1]
        assert np.linalg.norm(center) > np.sqrt(32) * NOISE_SIGMA + 3 * NOISE_SIGMA


def test_render_determinism(table):
    s = generate_scene(3, 4, table=table, image_id=3)
    w = World(table, d=16, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(w.render(s).levels, w.render(s).levels))


def test_linear_probe_separates_categories():
    table = CategoryTable.build((2, 3, 3), 16, 2)
    world = World(table, d=32, seed=2)
    ds = generate_dataset(2, 300, table, (1, 4), (1 / 3, 1 / 3, 1 / 3))
    feats, labels = [], []
    for s in ds.scenes:
        fp = world.render(s)
        f = interpolate_points(fp, [b.cx for b in s.gt_boxes], [b.cy for b in s.gt_boxes])
        feats.append(f.reshape(len(s.gt_boxes), -1))
        labels += s.gt_labels
    x = np.concatenate(feats)
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.eye(len(table))[labels]
    n = len(x) * 2 // 3
    w, *_ = np.linalg.lstsq(x[:n], y[:n], rcond=None)
    acc = (np.argmax(x[n:] @ w, axis=1) == np.array(labels[n:])).mean()
    assert acc > 0.9


def test_dataset_round_trip(tmp_path, table):
    ds = generate_dataset(4, 20, table, (0, 6))
    write_dataset(ds, tmp_path / "d.jsonl", tmp_path / "t.json")
    scenes = read_scenes(tmp_path / "d.jsonl")
    assert len(scenes) == 20 and all(0 <= len(s.gt_boxes) <= 6 for s in scenes)
    for a, b in zip(ds.scenes, scenes):
        assert a.gt_labels == b.gt_labels
        assert np.allclose(a.boxes_array(), b.boxes_array(), atol=1e-12)
    t2 = read_table(tmp_path / "t.json")
    assert np.array_equal(t2.embeddings, table.embeddings)
    row = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(row) == {"image_id", "seed", "boxes", "labels"}
