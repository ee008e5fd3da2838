import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owqf.geometry import Box, BoxDelta, apply_delta, giou, giou_tensor, iou, pairwise_iou, refine_boxes
from owqf.losses import _giou_loss
from owqf.tensor import NumericError, Tensor, grad_check

boxes = st.builds(Box, st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.6), st.floats(0.01, 0.6))


def test_iou_examples():
    a = Box(0.3, 0.3, 0.2, 0.2)
    assert iou(a, a) == pytest.approx(1.0)
    # corner boxes (0,0,2,2) and (1,1,3,3) scaled by 1/4
    s = 0.25
    assert iou(Box.from_corners(0, 0, 2 * s, 2 * s), Box.from_corners(s, s, 3 * s, 3 * s)) == pytest.approx(1 / 7)
    assert iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0


def test_giou_examples():
    a = Box(0.5, 0.5, 0.3, 0.4)
    assert giou(a, a) == pytest.approx(1.0)
    s = 1 / 3
    g = giou(Box.from_corners(0, 0, s, s), Box.from_corners(2 * s, 2 * s, 3 * s, 3 * s))
    assert g == pytest.approx(-7 / 9)
    touching = giou(Box.from_corners(0.1, 0.1, 0.3, 0.3), Box.from_corners(0.3, 0.1, 0.5, 0.3))
    assert touching == pytest.approx(0.0, abs=1e-12)


def test_box_clamps():
    b = Box(1.5, -0.2, 0.0, 3.0)
    assert (b.cx, b.cy, b.w, b.h) == (1.0, 0.0, 1e-4, 1.0)
    with pytest.raises(NumericError):
        Box(math.nan, 0.5, 0.1, 0.1)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_overlap_properties(a, b):
    v, g = iou(a, b), giou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert -1.0 <= g <= v + 1e-12
    assert v == pytest.approx(iou(b, a))
    x1, y1, x2, y2 = a.corners()
    assert x1 <= x2 and y1 <= y2
    assert pairwise_iou([a.as_array()], [b.as_array()])[0, 0] == pytest.approx(v, abs=1e-12)
    assert pairwise_iou([a.as_array()], [b.as_array()], generalized=True)[0, 0] == pytest.approx(g, abs=1e-12)


def test_apply_delta_identity_and_boundary():
    b = Box(0.37, 0.61, 0.2, 0.15)
    out = apply_delta(b, BoxDelta(0, 0, 0, 0))
    assert np.max(np.abs(out.as_array() - b.as_array())) < 1e-12
    far = apply_delta(Box(0.5, 0.5, 0.2, 0.2), BoxDelta(1e6, 0, 0, 0))
    assert far.cx == 1.0 and 0.0 <= far.cy <= 1.0
    with pytest.raises(NumericError):
        apply_delta(b, BoxDelta(math.inf, 0, 0, 0))


def _scalar_refine(v, d):
    out = []
    for i, (x, dx) in enumerate(zip(v, d)):
        x = min(max(x, 1e-6), 1 - 1e-6)
        y = 1.0 / (1.0 + math.exp(-(math.log(x / (1 - x)) + dx)))
        out.append(min(max(y, 1e-4), 1.0) if i >= 2 else y)
    return out


def test_apply_delta_matches_scalar_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = Box(*rng.uniform(0.05, 0.95, 2), *rng.uniform(0.01, 0.9, 2))
        d = rng.normal(0, 2, 4)
        got = apply_delta(b, BoxDelta(*d)).as_array()
        assert np.max(np.abs(got - _scalar_refine(b.as_array(), d))) < 1e-10


def test_refine_boxes_tensor_matches_scalar_and_gradient():
    rng = np.random.default_rng(1)
    b = rng.uniform(0.1, 0.8, (5, 4))
    d = Tensor(rng.normal(0, 1, (5, 4)), requires_grad=True)
    out = refine_boxes(Tensor(b), d).data
    for i in range(5):
        assert np.max(np.abs(out[i] - _scalar_refine(b[i], d.data[i]))) < 1e-10
    assert grad_check(lambda: refine_boxes(Tensor(b), d).sum(), [d]) < 1e-6


def test_giou_tensor_and_fused_loss_agree():
    rng = np.random.default_rng(2)
    pred = Tensor(np.column_stack([rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.4, (6, 2))]),
                  requires_grad=True)
    tgt = np.column_stack([rng.uniform(0.2, 0.8, (6, 2)), rng.uniform(0.05, 0.4, (6, 2))])
    ref = np.array([giou(Box(*p), Box(*t)) for p, t in zip(pred.data, tgt)])
    assert np.allclose(giou_tensor(pred, tgt).data, ref, atol=1e-12)
    assert _giou_loss(pred, tgt).data == pytest.approx((1 - ref).sum(), abs=1e-12)
    assert grad_check(lambda: _giou_loss(pred, tgt), [pred]) < 1e-6
    assert grad_check(lambda: giou_tensor(pred, tgt).sum(), [pred]) < 1e-6


@settings(max_examples=100, deadline=None)
@given(boxes)
def test_corner_round_trip(b):
    c = Box.from_corners(*b.corners())
    assert np.allclose(c.as_array(), b.as_array(), atol=1e-12)
