import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcfuse.boxcodec import (TJ4D_ANCHORS, VOD_ANCHORS, Box3D, BoxDelta, LossWeights, classification_loss, decode,
                             decode_box, direction_loss, direction_targets, encode, encode_box, generate_anchors,
                             localization_loss, smooth_l1, total_loss)
from rcfuse.errors import NoPositives, NonPositiveDimension
from rcfuse.pillars import TJ4D_GRID, BevGridSpec

A = Box3D(1.0, 2.0, -0.5, 3.0, 4.0, 1.5, 0.3)


def test_encode_examples():
    assert encode_box(A, A).to_array().tolist() == [0.0] * 7
    gt = Box3D(2.0, 2.0, -0.5, 3.0, 4.0, 1.5, 0.3)
    assert encode_box(gt, A).dx == pytest.approx(0.2, abs=1e-12)
    gt = Box3D(1.0, 2.0, -0.5, 3.0 * math.e, 4.0, 1.5, 0.3)
    assert encode_box(gt, A).dw == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(NonPositiveDimension):
        Box3D(0, 0, 0, 0.0, 1, 1)


def test_decode_examples():
    assert decode_box(BoxDelta(0, 0, 0, 0, 0, 0, 0), A) == A
    out = decode_box(BoxDelta(0, 0, 0, 0, 0, 0, 1.0), A)
    assert out.theta == pytest.approx(0.3 + math.pi / 2)


def test_decode_clamps_and_flags(caplog):
    with caplog.at_level(logging.WARNING):
        boxes, clamped = decode(np.array([[0, 0, 0, 0, 0, 0, 1.5]]), A.to_array()[None], return_clamped=True)
    assert clamped.tolist() == [True]
    assert boxes[0, 6] == pytest.approx(0.3 + math.pi / 2)
    assert "clamped" in caplog.text


@settings(max_examples=200, deadline=None)
@given(st.floats(-np.pi / 2, np.pi / 2), st.floats(-20, 20), st.floats(0.2, 5))
def test_round_trip_within_half_turn(dyaw, dx, scale):
    gt = Box3D(A.x + dx, A.y - dx / 2, A.z + 0.1, A.w * scale, A.l / scale, A.h * 1.1, A.theta + dyaw)
    back = decode_box(encode_box(gt, A), A)
    assert np.abs(back.to_array() - gt.to_array()).max() <= 1e-9


def test_yaw_beyond_half_turn_is_principal_value():
    gt = Box3D(A.x, A.y, A.z, A.w, A.l, A.h, A.theta + 2.0)
    back = decode_box(encode_box(gt, A), A)
    assert back.theta == pytest.approx(A.theta + math.pi - 2.0)


def test_anchor_presets_and_layout():
    g = BevGridSpec((0.0, 1.6), (-0.8, 0.8), (-1.0, 1.0), (0.16, 0.16))
    a = generate_anchors(g, TJ4D_ANCHORS)
    assert set(a) == {"Car", "Pedestrian", "Cyclist", "Truck"}
    assert a["Car"].shape == (10, 10, 2, 7)
    assert a["Car"][0, 0, 1].tolist() == pytest.approx([0.08, -0.72, 0.0, 1.84, 4.56, 1.7, math.pi / 2])
    assert generate_anchors(TJ4D_GRID, VOD_ANCHORS, stride=2)["Car"].shape == (248, 216, 2, 7)


def test_smooth_l1_and_localization():
    assert smooth_l1(0.5) == 0.125 and smooth_l1(2.0) == 1.5 and smooth_l1(-2.0) == 1.5
    assert localization_loss(np.zeros((3, 7))) == 0.0
    r = np.zeros((1, 7))
    r[0, 2] = 0.5
    assert localization_loss(r) == 0.125
    r[0, 2] = 2.0
    assert localization_loss(r) == 1.5
    with pytest.raises(NoPositives):
        localization_loss(np.zeros((0, 7)))


def test_focal_examples():
    assert classification_loss([[1.0, 0.0]], [0]) == 0.0
    val = classification_loss([[0.5]], [[1]], alpha=1.0, gamma=2.0)
    assert abs(val - 0.25 * math.log(2)) <= 1e-9 and abs(val - 0.173287) < 1e-6
    for p in (0.1, 0.6, 0.93):
        assert classification_loss([[p]], [[1]], alpha=1.0, gamma=0.0) == pytest.approx(-math.log(p))
    with pytest.raises(NoPositives):
        classification_loss(np.zeros((0, 3)), np.zeros(0, int))


def test_focal_negatives_and_clamp(caplog):
    # non-target entry with p = 0.2: (1 - alpha) * p^gamma * -ln(1 - p)
    val = classification_loss([[0.9, 0.2]], [0], alpha=0.25, gamma=2.0)
    expect = 0.25 * 0.1 ** 2 * -math.log(0.9) + 0.75 * 0.2 ** 2 * -math.log(0.8)
    assert val == pytest.approx(expect, rel=1e-12)
    with caplog.at_level(logging.WARNING):
        assert np.isfinite(classification_loss([[0.0]], [[1]]))
    assert "clamped" in caplog.text


def test_direction_loss():
    assert direction_targets([0.1, 3.5, -0.1]).tolist() == [0, 1, 1]
    assert direction_loss([0.5, 0.5], [0.1, 3.5]) == pytest.approx(math.log(2))
    assert direction_loss([1e-30], [0.2]) == pytest.approx(0.0, abs=1e-11)  # probability floor 1e-12


def test_total_loss():
    assert total_loss(0, 0, 0) == 0.0
    assert total_loss(1, 2, 3, LossWeights(1, 1, 1)) == 6.0
    assert total_loss(1, 2, float("nan"), LossWeights(1, 1, 0)) == 3.0
    w = LossWeights()
    assert (w.beta1, w.beta2, w.beta3, w.alpha, w.gamma) == (2.0, 1.0, 0.2, 0.25, 2.0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


def test_vectorised_encode_matches_scalar():
    rng = np.random.default_rng(0)
    an = np.column_stack([rng.normal(size=(20, 3)), rng.uniform(0.5, 3, (20, 3)), rng.uniform(-3, 3, 20)])
    gt = an + np.column_stack([rng.normal(0, 0.3, (20, 3)), np.zeros((20, 3)), rng.normal(0, 0.3, 20)])
    vec = encode(gt, an)
    for i in range(20):
        assert np.allclose(vec[i], encode_box(Box3D.from_array(gt[i]), Box3D.from_array(an[i])).to_array())
