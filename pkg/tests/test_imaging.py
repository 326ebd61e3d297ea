"""Tests for thresholding, overlap metrics, masked BCE, and mask/probmap I/O.

Reference values are computed by independent brute-force oracles (explicit
per-pixel loops) rather than by the library functions under test.
"""

import math

import numpy as np
import pytest
import torch

from poise.imaging import (
    KeypointSet,
    ShapeError,
    binarize,
    iou,
    load_image_png,
    load_keypoints_json,
    load_mask_png,
    load_probmap_png,
    mean_iou,
    save_image_png,
    save_keypoints_json,
    save_mask_png,
    save_probmap_png,
    weighted_bce,
)


# ---------------------------------------------------------------- oracles


def binarize_oracle(prob, threshold):
    """Per-pixel loop: 1 where prob >= threshold."""
    out = np.zeros(prob.shape, dtype=np.uint8)
    for r in range(prob.shape[0]):
        for c in range(prob.shape[1]):
            if prob[r, c] >= threshold:
                out[r, c] = 1
    return out


def iou_oracle(a, b, empty_value=1.0):
    inter = 0
    union = 0
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            pa, pb = bool(a[r, c]), bool(b[r, c])
            if pa and pb:
                inter += 1
            if pa or pb:
                union += 1
    if union == 0:
        return empty_value
    return inter / union


def wbce_oracle(pred, target, weights, eps=1e-7):
    num = 0.0
    den = 0.0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            p = min(max(pred[r, c], eps), 1.0 - eps)
            t = target[r, c]
            ce = -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))
            num += weights[r, c] * ce
            den += weights[r, c]
    return num / max(den, eps)


# ---------------------------------------------------------------- binarize


def test_binarize_matches_oracle_on_random_map():
    rng = np.random.default_rng(0)
    prob = rng.uniform(0.0, 1.0, size=(8, 8))
    for threshold in (0.25, 0.5, 0.75):
        got = binarize(prob, threshold)
        want = binarize_oracle(prob, threshold)
        assert got.dtype == np.uint8
        assert np.array_equal(got, want)


def test_binarize_threshold_is_inclusive():
    prob = np.array([[0.5, 0.49999], [0.50001, 0.0]])
    out = binarize(prob, 0.5)
    assert out.tolist() == [[1, 0], [1, 0]]


def test_binarize_rejects_bad_threshold_and_range():
    prob = np.full((2, 2), 0.5)
    with pytest.raises(ValueError):
        binarize(prob, 0.0)
    with pytest.raises(ValueError):
        binarize(prob, 1.0)
    with pytest.raises(ValueError):
        binarize(np.array([[1.5]]), 0.5)
    with pytest.raises(ShapeError):
        binarize(np.zeros(4), 0.5)


def test_binarize_idempotent_property():
    rng = np.random.default_rng(123)
    for _ in range(25):
        prob = rng.uniform(0.0, 1.0, size=(6, 7))
        once = binarize(prob, 0.5)
        twice = binarize(once.astype(np.float64), 0.5)
        assert np.array_equal(once, twice)


# ---------------------------------------------------------------- iou


def test_iou_known_small_case():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[1:3, 1:3] = 1  # 4 px
    b[2:4, 2:4] = 1  # 4 px, overlap 1 px at (2, 2)
    # intersection 1, union 7
    assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)
    assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-12)


def test_iou_empty_conventions():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert iou(z, z) == 1.0
    assert iou(z, z, empty_value=0.0) == 0.0
    o = z.copy()
    o[0, 0] = 1
    assert iou(z, o) == 0.0


def test_iou_properties_random_masks():
    rng = np.random.default_rng(7)
    for _ in range(30):
        a = (rng.uniform(size=(9, 5)) < 0.4).astype(np.uint8)
        b = (rng.uniform(size=(9, 5)) < 0.4).astype(np.uint8)
        va = iou(a, b)
        assert va == pytest.approx(iou(b, a), abs=0)  # symmetric
        assert 0.0 <= va <= 1.0
        assert iou(a, a) == 1.0
        assert va == pytest.approx(iou_oracle(a, b), abs=1e-12)


def test_iou_shape_mismatch():
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))


def test_mean_iou_matches_per_pair_average():
    rng = np.random.default_rng(99)
    pairs = []
    vals = []
    for _ in range(10):
        a = (rng.uniform(size=(7, 7)) < 0.5).astype(np.uint8)
        b = (rng.uniform(size=(7, 7)) < 0.5).astype(np.uint8)
        pairs.append((a, b))
        vals.append(iou_oracle(a, b))
    assert mean_iou(pairs) == pytest.approx(float(np.mean(vals)), abs=1e-12)
    with pytest.raises(ValueError):
        mean_iou([])


# ---------------------------------------------------------------- weighted bce


def test_wbce_uniform_half_prediction_is_log_two():
    pred = np.full((5, 5), 0.5)
    target = np.zeros((5, 5))
    w = np.ones((5, 5))
    assert weighted_bce(pred, target, w) == pytest.approx(math.log(2.0), abs=1e-12)


def test_wbce_perfect_prediction_is_near_zero():
    target = np.array([[0.0, 1.0], [1.0, 0.0]])
    loss = weighted_bce(target, target, np.ones((2, 2)))
    assert loss < 1e-6


def test_wbce_all_zero_weights_gives_zero():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.01, 0.99, size=(4, 4))
    target = (rng.uniform(size=(4, 4)) < 0.5).astype(float)
    assert weighted_bce(pred, target, np.zeros((4, 4))) == 0.0


def test_wbce_matches_oracle_random():
    rng = np.random.default_rng(17)
    for _ in range(10):
        pred = rng.uniform(0.0, 1.0, size=(6, 6))
        target = (rng.uniform(size=(6, 6)) < 0.5).astype(float)
        w = (rng.uniform(size=(6, 6)) < 0.7).astype(float)
        assert weighted_bce(pred, target, w) == pytest.approx(
            wbce_oracle(pred, target, w), rel=1e-10, abs=1e-12
        )


def test_wbce_weight_scale_invariance():
    rng = np.random.default_rng(29)
    pred = rng.uniform(0.05, 0.95, size=(5, 5))
    target = (rng.uniform(size=(5, 5)) < 0.5).astype(float)
    w = rng.uniform(0.0, 1.0, size=(5, 5))
    assert weighted_bce(pred, target, w) == pytest.approx(
        weighted_bce(pred, target, 3.7 * w), rel=1e-10
    )


def test_wbce_torch_matches_numpy_and_is_differentiable():
    rng = np.random.default_rng(5)
    pred = rng.uniform(0.02, 0.98, size=(6, 6))
    target = (rng.uniform(size=(6, 6)) < 0.5).astype(float)
    w = (rng.uniform(size=(6, 6)) < 0.6).astype(float)

    tp = torch.tensor(pred, dtype=torch.float64, requires_grad=True)
    loss = weighted_bce(tp, torch.tensor(target, dtype=torch.float64), torch.tensor(w))
    assert torch.is_tensor(loss)
    assert loss.item() == pytest.approx(weighted_bce(pred, target, w), rel=1e-10)
    loss.backward()
    assert tp.grad is not None


def test_wbce_gradient_vanishes_exactly_on_zero_weight_pixels():
    # Finite differences: perturbing a zero-weight pixel must not move the loss.
    rng = np.random.default_rng(11)
    pred = rng.uniform(0.1, 0.9, size=(5, 5))
    target = (rng.uniform(size=(5, 5)) < 0.5).astype(float)
    w = (rng.uniform(size=(5, 5)) < 0.5).astype(float)
    base = weighted_bce(pred, target, w)
    h = 1e-4
    for r in range(5):
        for c in range(5):
            bumped = pred.copy()
            bumped[r, c] += h
            fd = (weighted_bce(bumped, target, w) - base) / h
            if w[r, c] == 0.0:
                assert abs(fd) < 1e-5
            # analytic grad of masked BCE wrt p: w * (p - t) / (p (1 - p)) / sum w
            else:
                p, t = pred[r, c], target[r, c]
                expect = w[r, c] * (p - t) / (p * (1.0 - p)) / w.sum()
                assert fd == pytest.approx(expect, rel=1e-2)


def test_wbce_torch_grad_zero_on_masked_pixels():
    rng = np.random.default_rng(13)
    pred = torch.tensor(rng.uniform(0.1, 0.9, size=(4, 4)), requires_grad=True)
    target = torch.tensor((rng.uniform(size=(4, 4)) < 0.5).astype(float))
    w = torch.tensor((rng.uniform(size=(4, 4)) < 0.5).astype(float))
    weighted_bce(pred, target, w).backward()
    assert torch.all(pred.grad[w == 0] == 0)


# ---------------------------------------------------------------- keypoints


def test_keypointset_validation_and_bbox():
    coords = np.array([[10.0, 20.0], [30.0, 25.0], [50.0, 22.0]])
    kps = KeypointSet(coords, np.array([True, True, False]), skeleton=((0, 1), (1, 2)))
    assert kps.num_joints == 3
    # bbox over visible joints only
    r0, c0, r1, c1 = kps.bbox()
    assert (r0, c0, r1, c1) == (10.0, 20.0, 30.0, 25.0)
    assert kps.bbox_height() == 20.0
    with pytest.raises(ShapeError):
        KeypointSet(np.zeros((3, 3)), np.ones(3, dtype=bool), skeleton=())
    with pytest.raises(ValueError):
        KeypointSet(np.array([[0.0, np.nan]]), np.array([True]), skeleton=())


def test_keypointset_shift_and_clamp():
    kps = KeypointSet(np.array([[0.0, 0.0], [5.0, 5.0]]), np.array([True, True]), skeleton=((0, 1),))
    moved = kps.shifted(2.0, -1.0)
    assert moved.coords.tolist() == [[2.0, -1.0], [7.0, 4.0]]
    clamped = moved.clamped(6, 4)
    assert clamped.coords.tolist() == [[2.0, 0.0], [5.0, 3.0]]


# ---------------------------------------------------------------- png round trips


def test_mask_png_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mask = (rng.uniform(size=(17, 13)) < 0.5).astype(np.uint8)
    p = tmp_path / "m.png"
    save_mask_png(p, mask)
    back = load_mask_png(p)
    assert back.dtype == np.uint8
    assert np.array_equal(back, mask)


def test_probmap_png_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(2)
    prob = rng.uniform(0.0, 1.0, size=(9, 11))
    p = tmp_path / "p.png"
    save_probmap_png(p, prob)
    back = load_probmap_png(p)
    # 16-bit quantization: worst case half a step
    assert np.max(np.abs(back - prob)) <= 0.5 / 65535 + 1e-12
    save_probmap_png(p, back)
    again = load_probmap_png(p)
    assert np.array_equal(again, back)  # stable after first quantization


def test_image_png_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.uniform(0.0, 1.0, size=(8, 6, 3))
    p = tmp_path / "x.png"
    save_image_png(p, img)
    back = load_image_png(p)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_keypoints_json_round_trip(tmp_path):
    coords = np.array([[1.25, 2.5], [3.0, 4.75]])
    kps = KeypointSet(coords, np.array([True, False]), skeleton=((0, 1),))
    p = tmp_path / "k.json"
    save_keypoints_json(p, kps)
    back = load_keypoints_json(p)
    assert np.array_equal(back.coords, kps.coords)
    assert np.array_equal(back.visibility, kps.visibility)
    assert back.skeleton == kps.skeleton
