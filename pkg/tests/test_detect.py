"""Detection stack: loss unit values, decode geometry, NMS, AP oracle."""

import numpy as np
import pytest

from msgnet.detect import (
    NUM_BINS,
    Box,
    Detection,
    DetectionHead,
    DetectionLoss,
    assign_targets,
    average_precision,
    average_precision_single,
    bce_loss,
    box_iou,
    cell_centers,
    ciou_loss,
    ciou_loss_t,
    ciou_terms,
    decode_boxes_np,
    dfl_loss,
    dfl_loss_t,
    nms,
    pick_level,
)
from msgnet.tensor import Tensor


# ---------------------------------------------------------------------------
# independent AP oracle: recompute the match set from scratch for every
# prefix of the confidence-ranked detection list, then interpolate


def ap_oracle(dets_per_image, gts_per_image, iou_thresh):
    class_ids = sorted({int(c) for _, cs in gts_per_image for c in cs})
    if not class_ids:
        return 0.0
    aps = []
    for cls in class_ids:
        records = []
        for img, dets in enumerate(dets_per_image):
            for d in dets:
                if d.class_id == cls:
                    records.append((d.confidence, img, d))
        records.sort(key=lambda r: -r[0])
        n_gt = sum(1 for _, cs in gts_per_image for c in cs if int(c) == cls)
        if n_gt == 0:
            aps.append(0.0)
            continue
        pr = []
        for k in range(1, len(records) + 1):
            matched = [set() for _ in gts_per_image]
            tp = 0
            for _, img, d in records[:k]:
                gt_boxes, gt_classes = gts_per_image[img]
                best, bj = 0.0, -1
                for j, (gb, gc) in enumerate(zip(gt_boxes, gt_classes)):
                    if int(gc) != cls or j in matched[img]:
                        continue
                    iou = box_iou(d.box, gb)
                    if iou > best:
                        best, bj = iou, j
                if bj >= 0 and best >= iou_thresh:
                    matched[img].add(bj)
                    tp += 1
            pr.append((tp / k, tp / n_gt))
        ap = 0.0
        for r in np.linspace(0, 1, 101):
            cand = [p for p, rec in pr if rec >= r - 1e-12]
            ap += max(cand) if cand else 0.0
        aps.append(ap / 101.0)
    return float(np.mean(aps))


def _det(cx, cy, w, h, cls, conf, ncls=3):
    probs = np.full(ncls, min(conf, 1.0 - conf) * 1e-3)
    probs[cls] = conf
    return Detection(box=Box(cx, cy, w, h), class_probs=probs)


# ---------------------------------------------------------------------------


class TestCIoU:
    def test_disjoint_axis_aligned_case(self):
        loss = ciou_loss(Box(0, 0, 2, 2), Box(4, 0, 2, 2))
        assert loss == pytest.approx(1.4, abs=1e-9)

    def test_identical_boxes_zero(self):
        assert ciou_loss(Box(3, 3, 2, 4), Box(3, 3, 2, 4)) == pytest.approx(
            0.0, abs=1e-9
        )

    def test_aspect_term_positive_when_ratios_differ(self):
        t = ciou_terms(Box(0, 0, 4, 1), Box(0, 0, 1, 4))
        assert t.v > 0
        assert 0 <= t.alpha <= 1

    def test_tensor_form_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.uniform(1, 10, size=(20, 4))
        gts = rng.uniform(1, 10, size=(20, 4))
        out = ciou_loss_t(
            Tensor(preds, dtype=np.float64), Tensor(gts, dtype=np.float64)
        )
        for i in range(20):
            ref = ciou_loss(Box(*preds[i]), Box(*gts[i]))
            assert out.data[i] == pytest.approx(ref, abs=1e-6)


class TestDFL:
    def test_uniform_bins_integer_target(self):
        probs = np.full(NUM_BINS, 1.0 / NUM_BINS)
        assert dfl_loss(probs, 7) == pytest.approx(np.log(16.0), abs=1e-9)

    def test_uniform_bins_fractional_target(self):
        probs = np.full(NUM_BINS, 1.0 / NUM_BINS)
        assert dfl_loss(probs, 7.3) == pytest.approx(np.log(16.0), abs=1e-9)

    def test_two_bin_optimum_at_target_weight(self):
        """Restricted to the two bracketing bins, the loss over the grid
        p = 0, 0.001, ..., 1 is minimized exactly at p = fractional part."""
        y = 2.3
        grid = np.round(np.arange(0.001, 1.0, 0.001), 9)
        losses = []
        for p in grid:
            probs = np.full(NUM_BINS, 1e-12)
            probs[2] = 1.0 - p
            probs[3] = p
            losses.append(dfl_loss(probs, y))
        assert grid[int(np.argmin(losses))] == pytest.approx(0.3)

    def test_tensor_form_matches_scalar(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((5, NUM_BINS))
        y = rng.uniform(0, NUM_BINS - 1, size=5)
        out = dfl_loss_t(Tensor(logits, dtype=np.float64), y)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        for i in range(5):
            assert out.data[i] == pytest.approx(dfl_loss(probs[i], y[i]), abs=1e-9)

    def test_out_of_range_target_raises(self):
        with pytest.raises(ValueError, match="out of"):
            dfl_loss(np.full(NUM_BINS, 1 / NUM_BINS), 15.5)


class TestBCE:
    def test_zero_logit_positive_label(self):
        loss = bce_loss(Tensor(np.zeros((1,)), dtype=np.float64), Tensor(np.ones(1)))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-9)

    def test_confident_correct_prediction(self):
        loss = bce_loss(Tensor(np.asarray([10.0])), Tensor(np.ones(1)))
        assert loss.item() == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-5)

    def test_extreme_logits_finite(self):
        loss = bce_loss(
            Tensor(np.asarray([1000.0, -1000.0]), dtype=np.float64),
            Tensor(np.asarray([0.0, 1.0])),
        )
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(1000.0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shapes differ"):
            bce_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestDecode:
    def test_one_hot_bins_decode_exactly(self):
        h = w = 4
        stride = 8
        logits = np.zeros((1, 4 * NUM_BINS, h, w), dtype=np.float64)
        # cell (2,2), all four sides at bin 1 -> distances of one stride
        for side in range(4):
            logits[0, side * NUM_BINS + 1, 2, 2] = 60.0
        boxes = decode_boxes_np(logits, stride, 64)
        cell = 2 * w + 2
        np.testing.assert_allclose(boxes[0, cell], [20.0, 20.0, 16.0, 16.0], atol=1e-6)

    def test_corner_clamping(self):
        h = w = 4
        logits = np.zeros((1, 4 * NUM_BINS, h, w), dtype=np.float64)
        for side in range(4):
            logits[0, side * NUM_BINS + 15, 0, 0] = 60.0  # 120 px distances
        boxes = decode_boxes_np(logits, 8, 64)
        cx, cy, bw, bh = boxes[0, 0]
        assert (cx, cy) == (32.0, 32.0)  # clamped to [0, 64] on both axes
        assert (bw, bh) == (64.0, 64.0)

    def test_cell_centers(self):
        cxs, cys = cell_centers(2, 3, 8)
        np.testing.assert_array_equal(cxs, [4, 12, 20, 4, 12, 20])
        np.testing.assert_array_equal(cys, [4, 4, 4, 12, 12, 12])


class TestAssignment:
    def test_pick_level_matches_scale(self):
        assert pick_level(100, 100) == 2  # stride 32
        assert pick_level(30, 30) == 0  # stride 8
        assert pick_level(64, 64) == 1  # stride 16

    def test_larger_area_wins_cell_tie(self):
        small = Box(12.0, 12.0, 30.0, 30.0)
        large = Box(13.0, 13.0, 34.0, 34.0)
        levels = assign_targets([small, large], [0, 1], img_size=64)
        li = pick_level(30, 30)
        assert len(levels[li]) == 1
        (box, cls), = levels[li].values()
        assert cls == 1

    def test_routing_by_size(self):
        boxes = [Box(32, 32, 100, 100), Box(20, 20, 30, 30)]
        levels = assign_targets(boxes, [0, 1], img_size=128)
        assert len(levels[2]) == 1 and len(levels[0]) == 1


class TestDetectionLoss:
    def test_perfect_predictions_near_zero(self):
        """Hand-built logits for a GT at integer stride distances drive
        every term to (numerically) zero."""
        img = 32
        h = w = 4
        gt = Box(12.0, 12.0, 16.0, 16.0)
        dist_logits = np.full((1, 4 * NUM_BINS, h, w), -30.0, dtype=np.float64)
        # assigned cell (row 1, col 1): center (12, 12); all sides 8 px = bin 1
        for side in range(4):
            dist_logits[0, side * NUM_BINS + 1, 1, 1] = 30.0
        cls_logits = np.full((1, 2, h, w), -50.0, dtype=np.float64)
        cls_logits[0, 1, 1, 1] = 50.0
        loss_fn = DetectionLoss(num_classes=2, img_size=img, strides=(8,))
        total, box_l, dfl_l, cls_l = loss_fn(
            [(Tensor(dist_logits), Tensor(cls_logits))], [([gt], [1])]
        )
        assert total.item() <= 1e-3
        assert box_l.item() <= 1e-3
        assert dfl_l.item() <= 1e-3
        assert cls_l.item() <= 1e-3

    def test_no_targets_gives_zero_box_terms(self):
        dist = Tensor(np.zeros((1, 64, 2, 2)))
        cls = Tensor(np.zeros((1, 3, 2, 2)))
        total, box_l, dfl_l, cls_l = DetectionLoss(3, 64, strides=(8,))(
            [(dist, cls)], [([], [])]
        )
        assert box_l.item() == 0.0 and dfl_l.item() == 0.0
        assert cls_l.item() == pytest.approx(np.log(2.0), rel=1e-5)


class TestDetectionHead:
    def test_output_shapes(self):
        rng = np.random.default_rng(2)
        head = DetectionHead(rng, 8, num_classes=3)
        feat = Tensor(np.zeros((2, 8, 4, 4), dtype=np.float32))
        dist, cls = head(feat)
        assert dist.shape == (2, 64, 4, 4)
        assert cls.shape == (2, 3, 4, 4)


class TestNMS:
    def test_identical_boxes_suppressed(self):
        dets = [_det(10, 10, 8, 8, 0, 0.9), _det(10, 10, 8, 8, 0, 0.8)]
        assert len(nms(dets)) == 1

    def test_equal_iou_at_threshold_survives(self):
        # suppression uses a strict >, so IoU exactly at the threshold keeps
        # both boxes; shift 2.5 makes two 10x10 boxes overlap at IoU 75/125
        a = _det(0, 0, 10, 10, 0, 0.9)
        b = _det(2.5, 0, 10, 10, 0, 0.8)
        assert box_iou(a.box, b.box) == 75.0 / 125.0
        assert len(nms([a, b], iou_thresh=75.0 / 125.0)) == 2
        assert len(nms([a, b], iou_thresh=0.5)) == 1

    def test_disjoint_and_cross_class_kept(self):
        dets = [
            _det(5, 5, 4, 4, 0, 0.9),
            _det(20, 20, 4, 4, 0, 0.8),
            _det(5, 5, 4, 4, 1, 0.7),
        ]
        assert len(nms(dets)) == 3

    def test_confidence_threshold(self):
        dets = [_det(5, 5, 4, 4, 0, 0.9), _det(20, 20, 4, 4, 0, 0.1)]
        assert len(nms(dets, conf_thresh=0.25)) == 1


class TestAveragePrecision:
    def test_known_two_gt_case(self):
        gts = [([Box(10, 10, 8, 8), Box(30, 30, 8, 8)], [0, 0])]
        dets = [
            [
                _det(50, 50, 8, 8, 0, 0.95),  # false positive
                _det(10, 10, 8, 8, 0, 0.90),  # true positive
                _det(30, 30, 8, 8, 0, 0.80),  # true positive
            ]
        ]
        ap50 = average_precision(dets, gts, iou_thresh=0.5)
        assert ap50 == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_perfect_detection_is_one(self):
        gts = [([Box(10, 10, 8, 8)], [0])]
        dets = [[_det(10, 10, 8, 8, 0, 0.99)]]
        assert average_precision(dets, gts, iou_thresh=0.5) == pytest.approx(1.0)

    def test_matches_prefix_enumeration_oracle_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n_gt = int(rng.integers(1, 5))
            gt_boxes = [
                Box(*rng.uniform(10, 50, 2), *rng.uniform(6, 14, 2))
                for _ in range(n_gt)
            ]
            gt_classes = rng.integers(0, 2, n_gt).tolist()
            dets = []
            for _ in range(int(rng.integers(1, 7))):
                base = gt_boxes[int(rng.integers(0, n_gt))]
                jitter = rng.uniform(-4, 4, 2)
                dets.append(
                    _det(
                        base.cx + jitter[0],
                        base.cy + jitter[1],
                        base.w,
                        base.h,
                        int(rng.integers(0, 2)),
                        float(rng.uniform(0.3, 1.0)),
                        ncls=2,
                    )
                )
            gts = [(gt_boxes, gt_classes)]
            got, _ = average_precision_single([dets], gts, 0.5)
            assert got == ap_oracle([dets], gts, 0.5)
