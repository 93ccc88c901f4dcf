import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hcseg.metrics import (UE_VARIANTS, boundary_map, confusion_matrix, miou, panoptic_quality, refines,
                           undersegmentation_error)


def ue_oracle(partition, gt, variant):
    """Set-based reference over explicit pixel sets."""
    p, g = partition.reshape(-1), gt.reshape(-1)
    n = p.size
    clusters = {c: {i for i in range(n) if p[i] == c} for c in set(p.tolist())}
    segments = {s: {i for i in range(n) if g[i] == s} for s in set(g.tolist())}
    if variant == "min":
        return sum(min(len(C & S), len(C - S)) for S in segments.values() for C in clusters.values()
                   if C & S) / n
    if variant == "leak_all":
        return (sum(len(C) for S in segments.values() for C in clusters.values() if C & S) - n) / n
    total = 0
    for C in clusters.values():
        best = max(sorted(segments), key=lambda s: (len(C & segments[s]), -s))
        total += len(C - segments[best])
    return total / n


def halves():
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    return gt


class TestUndersegmentation:
    def test_identical_partition(self):
        for v in UE_VARIANTS:
            assert undersegmentation_error(halves() + 7, halves(), v)[0] == 0.0

    def test_one_cluster_two_equal_segments(self):
        ue, leak = undersegmentation_error(np.zeros((4, 4), int), halves())
        assert ue == 0.5
        assert leak.sum() == 8

    def test_min_variant_on_same_fixture(self):
        # both overlaps tie at 8 pixels, so each segment contributes its full half
        assert undersegmentation_error(np.zeros((4, 4), int), halves(), "min")[0] == 1.0

    def test_leak_all_on_same_fixture(self):
        assert undersegmentation_error(np.zeros((4, 4), int), halves(), "leak_all")[0] == 1.0

    @pytest.mark.parametrize("variant", UE_VARIANTS)
    @pytest.mark.parametrize("seed", range(4))
    def test_random_8x8_matches_set_oracle(self, variant, seed):
        rng = np.random.default_rng(seed)
        part = rng.integers(0, 6, size=(8, 8))
        gt = rng.integers(0, 3, size=(8, 8))
        assert undersegmentation_error(part, gt, variant)[0] == pytest.approx(ue_oracle(part, gt, variant),
                                                                              abs=1e-12)

    def test_majority_leak_mask_area(self, rng):
        part = rng.integers(0, 5, size=(6, 6))
        gt = rng.integers(0, 2, size=(6, 6))
        ue, leak = undersegmentation_error(part, gt)
        assert ue == leak.sum() / 36

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            undersegmentation_error(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            undersegmentation_error(np.zeros((2, 2)), np.zeros((2, 2)), "median")

    @given(st.integers(0, 2 ** 31 - 1))
    def test_zero_iff_refines(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 3, size=(5, 5))
        # constructive refinement: split each gt segment further
        fine = gt * 10 + rng.integers(0, 3, size=(5, 5))
        assert refines(fine, gt)
        for v in UE_VARIANTS:
            assert undersegmentation_error(fine, gt, v)[0] == 0.0
        # constructive non-refinement: merge a pixel of one segment into another's cluster
        if len(np.unique(gt)) > 1:
            a = tuple(np.argwhere(gt == gt.flat[0])[0])
            b = tuple(np.argwhere(gt != gt.flat[0])[0])
            bad = fine.copy()
            bad[b] = bad[a]
            assert not refines(bad, gt)
            for v in UE_VARIANTS:
                assert undersegmentation_error(bad, gt, v)[0] > 0.0

    @given(st.integers(0, 2 ** 31 - 1))
    def test_monotone_under_straddling_merge(self, seed):
        rng = np.random.default_rng(seed)
        gt = np.zeros((6, 6), int)
        gt[:, 3:] = 1
        part = rng.integers(0, 8, size=(6, 6))
        left = np.unique(part[gt == 0])
        right = np.unique(part[gt == 1])
        c1, c2 = int(rng.choice(left)), int(rng.choice(right))
        merged = np.where(part == c2, c1, part)
        for v in UE_VARIANTS:
            assert undersegmentation_error(merged, gt, v)[0] >= undersegmentation_error(part, gt, v)[0] - 1e-15


class TestMIoU:
    def test_perfect(self, rng):
        gt = rng.integers(0, 3, size=(5, 5))
        r = miou(gt, gt, 3)
        assert r["miou"] == 1.0 and r["pixel_accuracy"] == 1.0

    def test_complement(self):
        gt = halves()
        r = miou(1 - gt, gt, 2)
        assert r["per_class_iou"] == [0.0, 0.0] and r["miou"] == 0.0

    def test_half_overlapping_squares(self):
        a = np.zeros((4, 4), int)
        a[:2, :2] = 1
        b = np.zeros((4, 4), int)
        b[:2, 1:3] = 1
        iou = miou(a, b, 2)["per_class_iou"][1]
        # counting oracle
        inter = int(((a == 1) & (b == 1)).sum())
        union = int(((a == 1) | (b == 1)).sum())
        assert iou == pytest.approx(inter / union, abs=1e-12) and abs(iou - 1 / 3) <= 1e-12

    def test_absent_class_excluded(self):
        gt = halves()
        r = miou(gt, gt, 4)
        assert r["per_class_iou"][2:] == [None, None] and r["miou"] == 1.0

    def test_out_of_range_prediction(self):
        cm = confusion_matrix(np.array([5, 0]), np.array([0, 0]), 2)
        assert cm.tolist() == [[1, 0, 1], [0, 0, 0]]

    def test_counting_oracle(self, rng):
        pred = rng.integers(0, 3, size=(7, 7))
        gt = rng.integers(0, 3, size=(7, 7))
        r = miou(pred, gt, 3)
        for c in range(3):
            i = int(((pred == c) & (gt == c)).sum())
            u = int(((pred == c) | (gt == c)).sum())
            assert r["per_class_iou"][c] == pytest.approx(i / u, abs=1e-12)
        assert r["pixel_accuracy"] == pytest.approx((pred == gt).mean(), abs=1e-12)


class TestPanopticQuality:
    def test_identical(self, rng):
        lab = rng.integers(0, 3, size=(6, 6))
        inst = rng.integers(0, 2, size=(6, 6))
        r = panoptic_quality(lab, inst, lab, inst)
        assert r["pq"] == 1.0 and r["sq"] == 1.0 and r["rq"] == 1.0

    def test_no_overlap(self):
        lab = halves()
        r = panoptic_quality(lab, np.zeros((4, 4), int), 1 - lab, np.ones((4, 4), int) * 3)
        assert r["pq"] == 0.0

    def test_one_tp_at_point_six_plus_one_fp(self):
        void = 9
        gt_l = np.full((1, 20), void)
        gt_l[0, :10] = 1
        gt_i = (gt_l == 1).astype(int)
        pr_l = np.full((1, 20), void)
        pr_i = np.zeros((1, 20), int)
        pr_l[0, :6], pr_i[0, :6] = 1, 1
        pr_l[0, 6:10], pr_i[0, 6:10] = 2, 2
        r = panoptic_quality(pr_l, pr_i, gt_l, gt_i, void_label=void)
        assert (r["tp"], r["fp"], r["fn"]) == (1, 1, 0)
        assert abs(r["sq"] - 0.6) <= 1e-12
        assert abs(r["pq"] - 0.4) <= 1e-12

    def test_below_half_iou_is_fp_and_fn(self):
        gt_l = np.ones((1, 10), int)
        pr_l = np.zeros((1, 10), int)
        pr_l[0, :5] = 1
        r = panoptic_quality(pr_l, np.zeros((1, 10), int), gt_l, np.zeros((1, 10), int))
        # IoU exactly 0.5 is not a match
        assert r["tp"] == 0 and r["fn"] == 1 and r["fp"] == 2

    def test_mostly_void_prediction_not_fp(self):
        gt_l = np.array([[5, 5, 5, 1]])
        pr_l = np.array([[2, 2, 2, 1]])
        z = np.zeros((1, 4), int)
        r = panoptic_quality(pr_l, z, gt_l, z, void_label=5)
        assert (r["tp"], r["fp"], r["fn"]) == (1, 0, 0)

    def test_batched_pools_counts(self):
        a = np.zeros((2, 4, 4), int)
        r = panoptic_quality(a, a, a, a)
        assert r["tp"] == 2

    @given(st.integers(0, 2 ** 31 - 1))
    def test_bounds_and_product(self, seed):
        rng = np.random.default_rng(seed)
        args = [rng.integers(0, 3, size=(5, 5)) for _ in range(4)]
        r = panoptic_quality(*args)
        for k in ("pq", "sq", "rq"):
            assert 0.0 <= r[k] <= 1.0
        assert r["pq"] == r["sq"] * r["rq"]


class TestBoundaryMap:
    def test_constant(self):
        assert not boundary_map(np.full((5, 5), 3)).any()

    def test_vertical_split(self):
        b = boundary_map(halves())
        assert b[:, 1].all() and b[:, 2].all() and b.sum() == 8

    @given(arrays(np.int64, (6, 7), elements=st.integers(0, 3)))
    def test_neighbour_scan_oracle(self, lab):
        b = boundary_map(lab)
        for y in range(6):
            for x in range(7):
                want = any(0 <= y + dy < 6 and 0 <= x + dx < 7 and lab[y + dy, x + dx] != lab[y, x]
                           for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)))
                assert b[y, x] == want
