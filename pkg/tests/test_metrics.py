import numpy as np
import pytest
from hypothesis import given, strategies as st

from dam.metrics import aggregate, compute_iou, episode_counts


def test_perfect_predictor_scores_one():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:5, 3:7] = 1
    rows = [episode_counts(c, gt, gt) for c in (0, 1, 2)]
    m = aggregate(rows, (0, 1, 2))
    assert m.miou == 1.0 and m.fbiou == 1.0


def test_all_background_predictor():
    gt = np.zeros((4, 4), np.uint8)
    gt[:, :1] = 1  # 4 of 16 pixels
    m = aggregate([episode_counts(0, np.zeros_like(gt), gt)], (0,))
    assert m.miou == 0.0
    assert m.bg_iou == pytest.approx(12 / 16)
    assert m.fbiou == pytest.approx(0.375)


def test_top_half_vs_left_half():
    top = np.zeros((10, 10), np.uint8)
    top[:5] = 1
    left = np.zeros((10, 10), np.uint8)
    left[:, :5] = 1
    i, u = compute_iou(top, left)
    assert (i, u) == (25, 75)
    assert aggregate([episode_counts(3, top, left)]).miou == pytest.approx(1 / 3)


def test_empty_union_counts_as_one():
    z = np.zeros((3, 3), np.uint8)
    m = aggregate([episode_counts(5, z, z)], (5,))
    assert m.per_category_iou == {5: 1.0}


def test_iou_is_dataset_level_not_episode_mean():
    a = np.zeros((10, 10), np.uint8)
    a[:1, :1] = 1  # tiny object, missed
    b = np.zeros((10, 10), np.uint8)
    b[:5] = 1  # large object, hit
    rows = [episode_counts(0, np.zeros_like(a), a), episode_counts(0, b, b)]
    assert aggregate(rows).miou == pytest.approx(50 / 51)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="prediction"):
        compute_iou(np.zeros((2, 2)), np.zeros((3, 3)))


@given(st.integers(0, 2**32 - 1))
def test_iou_bounds_and_symmetry(seed):
    r = np.random.default_rng(seed)
    p, g = r.random((6, 6)) < 0.4, r.random((6, 6)) < 0.4
    i, u = compute_iou(p, g)
    assert (i, u) == compute_iou(g, p)
    assert 0 <= i <= u <= 36
