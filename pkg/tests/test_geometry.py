import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rapt.geometry import (
    BoundingBox,
    Proposal,
    decode_deltas,
    encode_deltas,
    iou,
    iou_matrix,
    rasterize_visibility,
    spatial_pool,
    spatial_pool_batch,
)

from oracles import box_iou


coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 300, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return BoundingBox(x, y, x + w, y + h)


class TestBoundingBox:
    @pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, math.nan, 1),
                                        (0, 0, math.inf, 1)])
    def test_rejects_invalid(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)

    def test_xywh_round_trip(self):
        b = BoundingBox.from_xywh(3, 4, 10, 20)
        assert b == BoundingBox(3, 4, 13, 24)
        assert b.to_xywh() == [3, 4, 10, 20]
        assert b.center == (8, 14)


class TestIoU:
    def test_identical(self):
        b = BoundingBox(1, 2, 5, 9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0

    def test_half_overlap(self):
        assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 0, 3, 2)) == pytest.approx(2 / 6)

    def test_touching_edges_is_zero(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(1, 0, 2, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(box_iou(a.as_array(), b.as_array()), abs=1e-12)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 50, (6, 2))
        a = np.c_[a, a + rng.uniform(1, 30, (6, 2))]
        b = rng.uniform(0, 50, (4, 2))
        b = np.c_[b, b + rng.uniform(1, 30, (4, 2))]
        m = iou_matrix(a, b)
        for i in range(6):
            for j in range(4):
                assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-12)

    def test_matrix_empty(self):
        assert iou_matrix(np.zeros((0, 4)), np.ones((3, 4))).shape == (0, 3)


class TestRasterize:
    def test_full_visibility(self):
        b = BoundingBox(10, 10, 50, 90)
        assert rasterize_visibility(b, b).all()

    def test_absent_visible_box(self):
        m = rasterize_visibility(BoundingBox(0, 0, 4, 4), None, 7, 7)
        assert m.shape == (7, 7) and m.all()

    def test_left_half(self):
        m = rasterize_visibility(BoundingBox(0, 0, 2, 2), BoundingBox(0, 0, 1, 2), 2, 2)
        np.testing.assert_array_equal(m, [[1, 0], [1, 0]])

    def test_top_rows(self):
        m = rasterize_visibility(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 5), 4, 4)
        np.testing.assert_array_equal(m, [[1] * 4, [1] * 4, [0] * 4, [0] * 4])

    def test_empty_rasterization_falls_back_to_ones(self):
        # visible strip falls between cell centers
        m = rasterize_visibility(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 0.1), 2, 2)
        assert m.all()

    @settings(max_examples=200)
    @given(boxes(), boxes(), st.integers(1, 9), st.integers(1, 9))
    def test_never_all_zero(self, box, vis, h, w):
        m = rasterize_visibility(box, vis, h, w)
        assert m.shape == (h, w) and m.any()
        assert set(np.unique(m)) <= {0, 1}


class TestSpatialPool:
    def test_hand_example(self):
        roi = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_allclose(spatial_pool(roi, np.array([[1, 1], [0, 0]])), [1.5])

    def test_constant_roi(self):
        roi = np.full((3, 7, 7), 2.5)
        mask = np.zeros((7, 7), dtype=np.uint8)
        mask[2, 3] = 1
        np.testing.assert_allclose(spatial_pool(roi, mask), [2.5] * 3)

    def test_all_ones_is_global_average(self):
        roi = np.random.default_rng(0).normal(size=(5, 7, 7))
        np.testing.assert_allclose(spatial_pool(roi, np.ones((7, 7))), roi.mean(axis=(1, 2)))

    def test_invariant_to_masked_bins(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            roi = rng.normal(size=(4, 7, 7))
            mask = (rng.random((7, 7)) < 0.5).astype(np.uint8)
            mask[0, 0] = 1
            perturbed = roi.copy()
            perturbed[:, mask == 0] = rng.normal(size=(4, int((mask == 0).sum()))) * 1e6
            np.testing.assert_array_equal(spatial_pool(roi, mask), spatial_pool(perturbed, mask))
            np.testing.assert_array_equal(spatial_pool_batch(roi[None], mask[None])[0],
                                          spatial_pool_batch(perturbed[None], mask[None])[0])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        rois = rng.normal(size=(8, 3, 7, 7))
        masks = (rng.random((8, 7, 7)) < 0.6).astype(np.uint8)
        masks[:, 3, 3] = 1
        batch = spatial_pool_batch(rois, masks)
        for i in range(8):
            np.testing.assert_allclose(batch[i], spatial_pool(rois[i], masks[i]), rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            spatial_pool(np.zeros((2, 7, 7)), np.ones((5, 5)))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            spatial_pool(np.zeros((2, 3, 3)), np.zeros((3, 3)))


def test_delta_round_trip():
    rng = np.random.default_rng(4)
    p = rng.uniform(0, 100, (20, 2))
    p = np.c_[p, p + rng.uniform(5, 50, (20, 2))]
    t = p + rng.uniform(-3, 3, (20, 4))
    np.testing.assert_allclose(decode_deltas(p, encode_deltas(p, t)), t, atol=1e-9)
    np.testing.assert_allclose(encode_deltas(p, p), 0.0, atol=1e-15)


class TestProposal:
    def test_shape_agreement(self):
        with pytest.raises(ValueError):
            Proposal(0, BoundingBox(0, 0, 1, 1), np.zeros((2, 7, 7)), np.ones((5, 5)))

    def test_targets_come_in_pairs(self):
        with pytest.raises(ValueError):
            Proposal(0, BoundingBox(0, 0, 1, 1), np.zeros((2, 7, 7)), np.ones((7, 7)), gt_label=1)
        p = Proposal(0, BoundingBox(0, 0, 1, 1), np.ones((2, 7, 7)), np.ones((7, 7)),
                     gt_label=1, gt_box=BoundingBox(0, 0, 1, 1))
        np.testing.assert_allclose(p.pooled(), [1.0, 1.0])
