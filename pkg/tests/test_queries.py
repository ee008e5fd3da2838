import numpy as np
import pytest

from owqf import tensor as T
from owqf.model import Detector, ModelConfig
from owqf.nn import Adam
from owqf.queries import ClassificationHead, QueryBuilder, interpolate_point_feature, interpolate_points, \
    point_to_initial_box, rank_order
from owqf.tensor import ConfigurationError, Tape, Tensor, grad_check
from owqf.world import CategoryTable, FeaturePyramid, Scene, World, generate_dataset, generate_scene


def _pyramid(rng, sides=(6, 3), d=5):
    return FeaturePyramid([rng.standard_normal((s, s, d)) for s in sides])


def _scalar_bilinear(level, x, y):
    h, w, d = level.shape
    u = min(max(x * w - 0.5, 0.0), w - 1.0)
    v = min(max(y * h - 0.5, 0.0), h - 1.0)
    j0, i0 = min(int(np.floor(u)), w - 2), min(int(np.floor(v)), h - 2)
    fx, fy = u - j0, v - i0
    out = np.zeros(d)
    for c in range(d):
        out[c] = (level[i0, j0, c] * (1 - fx) * (1 - fy) + level[i0, j0 + 1, c] * fx * (1 - fy)
                  + level[i0 + 1, j0, c] * (1 - fx) * fy + level[i0 + 1, j0 + 1, c] * fx * fy)
    return out


def test_interpolation_on_node_and_midpoint():
    rng = np.random.default_rng(0)
    fp = _pyramid(rng)
    lv = fp.levels[0]
    node = interpolate_point_feature(fp, (2 + 0.5) / 6, (4 + 0.5) / 6).data[0]
    assert np.allclose(node, lv[4, 2], atol=1e-12)
    mid = interpolate_points(fp, [3 / 6], [2 / 6])[0, 0]
    assert np.allclose(mid, (lv[1, 2] + lv[1, 3] + lv[2, 2] + lv[2, 3]) / 4, atol=1e-12)


def test_interpolation_matches_scalar_reference():
    rng = np.random.default_rng(1)
    fp = _pyramid(rng, (8, 4, 2))
    xs, ys = rng.random(200), rng.random(200)
    xs[:3], ys[:3] = [0.0, 1.0, 0.5], [1.0, 0.0, 0.0]
    got = interpolate_points(fp, xs, ys)
    for p in range(200):
        for li, lv in enumerate(fp.levels):
            assert np.max(np.abs(got[p, li] - _scalar_bilinear(lv, xs[p], ys[p]))) < 1e-10
    with pytest.raises(ValueError):
        interpolate_points(fp, [1.2], [0.5])


def test_rank_examples():
    assert rank_order([0.2, 0.9, 0.5], 10).tolist() == [1, 2, 0]
    assert rank_order([0.1, 0.5, 0.3, 0.9, 0.2], 3).tolist() == [3, 1, 2]
    assert rank_order([0.4, 0.7], 900).tolist() == [1, 0]
    assert rank_order([0.5, 0.5, 0.5], 2).tolist() == [0, 1]


def test_rank_argsort_invariance():
    rng = np.random.default_rng(2)
    transforms = [lambda s: 3.0 * s + 1.0, np.exp, lambda s: s ** 3, np.arctan]
    for _ in range(1000):
        s = rng.normal(size=int(rng.integers(1, 30)))
        base = rank_order(s, 20)
        for f in transforms:
            assert np.array_equal(rank_order(f(s), 20), base)


@pytest.mark.parametrize("m", [4, 5, 6])
def test_general_partition_boundary_sizes(m):
    n = 5
    rng = np.random.default_rng(3)
    qb = QueryBuilder(rng, 8, n_learnable=n, n_specific=4)
    feats = Tensor(rng.standard_normal((m, 2, 8)))
    scores = rng.random(m)
    boxes = Tensor(rng.random((m, 4)))
    q, b, sc, order = qb.general_partition(feats, boxes, scores, ranked=True)
    assert q.shape == (min(m, n), 8) and len(order) == min(m, n)
    assert np.array_equal(q.data, qb.learnable.data[:min(m, n)])
    kept = set(order.tolist())
    dropped = [i for i in range(m) if i not in kept]
    assert all(scores[i] <= scores[order].min() for i in dropped)
    assert np.array_equal(b.data, boxes.data[order])
    q0, *_ = qb.general_partition(feats, boxes, scores, ranked=False)
    assert np.array_equal(q0.data, np.repeat(qb.learnable.data[:1], min(m, n), axis=0))


def test_zero_box_head_centers_prior_on_point():
    rng = np.random.default_rng(4)
    qb = QueryBuilder(rng, 8, 10, 4)
    head = ClassificationHead(rng, 8, 6)
    text = Tensor(rng.standard_normal((3, 6)))
    f = Tensor(rng.standard_normal((2, 8)))
    box, score = point_to_initial_box(f, qb, head, text, 0.3, 0.7)
    assert np.allclose(box.as_array(), [0.3, 0.7, 0.1, 0.1], atol=1e-12)
    box2, score2 = point_to_initial_box(f, qb, head, text, 0.3, 0.7)
    assert box2 == box and score2 == score and 0 < score < 1


def test_point_score_gradient():
    rng = np.random.default_rng(5)
    qb = QueryBuilder(rng, 8, 10, 4)
    qb.point_box_head.fc2.weight.data = rng.normal(0, 0.1, qb.point_box_head.fc2.weight.shape)
    head = ClassificationHead(rng, 8, 6)
    text = Tensor(rng.standard_normal((3, 6)))
    feats = Tensor(rng.standard_normal((3, 2, 8)))
    params = [qb.adapter.weight, qb.adapter_norm.gain, head.query_proj.weight, qb.point_box_head.fc2.weight]

    def f():
        boxes, score, _ = qb.point_boxes(feats, [0.2, 0.5, 0.8], [0.4, 0.4, 0.6], head, text)
        return T.sigmoid(score).sum() + boxes.sum()
    assert grad_check(f, params) < 1e-4


def test_specific_partition_shapes_and_errors():
    rng = np.random.default_rng(6)
    table = CategoryTable.build((1, 1, 2), 6, 0)
    fp = World(table, d=8, seed=0).render(generate_scene(1, 2, table=table))
    qb = QueryBuilder(rng, 8, 10, 12)
    head = ClassificationHead(rng, 8, 6)
    text = Tensor(table.embeddings)
    q, b, logits, idx = qb.specific_partition(fp, head, text)
    assert q.shape == (12, 8) and b.shape == (12, 4) and logits.shape == (12, 4)
    again = qb.specific_partition(fp, head, text)[3]
    assert np.array_equal(idx, again)
    with pytest.raises(ConfigurationError):
        qb.specific_partition(fp, head, text, n_select=13)
    with pytest.raises(ConfigurationError):
        qb.specific_partition(fp, head, text, n_select=0)


@pytest.mark.slow
def test_top_location_inside_object_after_training():
    table = CategoryTable.build((1, 1, 2), 8, 1)
    world = World(table, d=16, seed=1)
    ds = generate_dataset(1, 40, table, (1, 1))
    model = Detector(ModelConfig(dim=16, heads=2, layers=1, d_text=8, n_learnable=4, n_specific=16), seed=0)
    params = model.set_stage("pretrain")
    opt = Adam(params, lr=3e-3)
    fps = [world.render(s) for s in ds.scenes]
    for step in range(30):
        opt.zero_grad()
        for s, fp in list(zip(ds.scenes, fps))[step % 5 * 8:(step % 5 + 1) * 8]:
            with Tape() as tape:
                rep = model.loss(model.forward(fp, table.embeddings), s.boxes_array(), s.gt_labels)
            tape.backward(rep.loss, np.full_like(rep.loss.data, 1 / 8))
        opt.step()
    hits = 0
    for i in range(20):
        scene = generate_scene(100 + i, 1, table=table, image_id=1000 + i)
        fp = world.render(scene)
        with T.no_grad():
            _, _, _, idx = model.builder.specific_partition(fp, model.decoder.cls_head, Tensor(table.embeddings), 1)
        cx, cy = fp.token_boxes()[idx[0], :2]
        hits += scene.gt_boxes[0].contains(cx, cy)
    assert hits >= 18
