"""Decoupled detection head, loss stack, NMS and average precision.

Boxes are (cx, cy, w, h) in image pixels. The box branch predicts a
16-bin distribution per side in stride units (anchor-free, decoded from
cell centers); the class branch predicts independent per-class logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor

NUM_BINS = 16
CIOU_EPS = 1e-7


@dataclass
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self):
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


@dataclass
class Detection:
    box: Box
    class_probs: np.ndarray

    @property
    def class_id(self):
        return int(np.argmax(self.class_probs))

    @property
    def confidence(self):
        return float(np.max(self.class_probs))


@dataclass
class CIoUTerms:
    iou: float
    rho2: float
    c2: float
    v: float
    alpha: float


# ---------------------------------------------------------------------------
# geometry


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a.corners() if isinstance(a, Box) else a
    bx1, by1, bx2, by2 = b.corners() if isinstance(b, Box) else b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def ciou_terms(pred, gt):
    iou = box_iou(pred, gt)
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    px1, py1, px2, py2 = pred.corners()
    gx1, gy1, gx2, gy2 = gt.corners()
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    v = (4.0 / np.pi**2) * (np.arctan(gt.w / gt.h) - np.arctan(pred.w / pred.h)) ** 2
    alpha = v / ((1.0 - iou) + v + CIOU_EPS)
    return CIoUTerms(iou=iou, rho2=rho2, c2=c2, v=v, alpha=alpha)


def ciou_loss(pred, gt):
    """Scalar CIoU loss: 1 - IoU + rho^2/c^2 + alpha*v."""
    t = ciou_terms(pred, gt)
    return 1.0 - t.iou + t.rho2 / t.c2 + t.alpha * t.v


def ciou_loss_t(pred, gt):
    """Differentiable CIoU over [N,4] tensors of (cx, cy, w, h) -> [N]."""
    pcx, pcy, pw, ph = (T.narrow(pred, 1, i, 1) for i in range(4))
    gcx, gcy, gw, gh = (T.narrow(gt, 1, i, 1) for i in range(4))
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = gcx - gw * 0.5, gcx + gw * 0.5
    gy1, gy2 = gcy - gh * 0.5, gcy + gh * 0.5
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / (union + CIOU_EPS)
    rho2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy)
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c2 = cw * cw + ch * ch + CIOU_EPS
    d = T.atan(gw / gh) - T.atan(pw / ph)
    v = d * d * (4.0 / np.pi**2)
    alpha = v / (T.neg(iou) + (1.0 + CIOU_EPS) + v)
    loss = T.neg(iou) + 1.0 + rho2 / c2 + alpha * v
    return T.reshape(loss, (pred.shape[0],))


# ---------------------------------------------------------------------------
# losses


def dfl_loss_t(bin_logits, y):
    """Two-bin interpolated cross-entropy over [N,16] logits, targets [N].

    y is the continuous side distance in bin units, 0 <= y <= 15; the
    integer bins bracketing y share the loss proportionally.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y > NUM_BINS - 1):
        raise ValueError(f"dfl target out of [0, {NUM_BINS - 1}]")
    yl = np.floor(np.minimum(y, NUM_BINS - 2)).astype(np.int64)
    yr = yl + 1
    wl = (yr - y).astype(bin_logits.dtype)
    wr = (y - yl).astype(bin_logits.dtype)
    logp = T.log_softmax(bin_logits, axis=1)
    rows = np.arange(len(y))
    ll = T.gather2d(logp, rows, yl)
    lr = T.gather2d(logp, rows, yr)
    losses = -(ll * Tensor(wl) + lr * Tensor(wr))
    return losses


def dfl_loss(probs, y):
    """Scalar oracle form on one 16-bin probability row."""
    if not 0 <= y <= NUM_BINS - 1:
        raise ValueError(f"dfl target {y} out of [0, {NUM_BINS - 1}]")
    probs = np.asarray(probs, dtype=np.float64)
    yl = int(np.floor(min(y, NUM_BINS - 2)))
    yr = yl + 1
    return -((yr - y) * np.log(probs[yl]) + (y - yl) * np.log(probs[yr]))


def bce_loss(logits, labels):
    """Mean binary cross-entropy with logits, log-sum-exp safe form."""
    if logits.shape != labels.shape:
        raise ValueError(f"bce shapes differ: {logits.shape} vs {labels.shape}")
    labels = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels))
    # y*softplus(-p) + (1-y)*softplus(p) == softplus(p) - p*y
    return T.reduce_mean(T.softplus(logits) - logits * labels)


# ---------------------------------------------------------------------------
# head


class DetectionHead(Module):
    """Dual-branch decoupled head for one pyramid level.

    The box and class branches are structurally symmetric but hold
    independent parameters.
    """

    def __init__(self, rng, channels, num_classes, dtype=np.float32):
        c = channels
        self.box1 = Conv2d(rng, c, c, 3, dtype=dtype)
        self.box2 = Conv2d(rng, c, c, 3, dtype=dtype)
        self.box_out = Conv2d(rng, c, 4 * NUM_BINS, 1, dtype=dtype)
        self.cls1 = Conv2d(rng, c, c, 3, dtype=dtype)
        self.cls2 = Conv2d(rng, c, c, 3, dtype=dtype)
        self.cls_out = Conv2d(rng, c, num_classes, 1, dtype=dtype)
        # start with small boxes (keeps decoded corners off the image-border
        # clamp, which has zero gradient) and low class confidence
        self.box_out.bias.data = np.tile(
            -np.arange(NUM_BINS, dtype=dtype), 4
        )
        self.cls_out.bias.data = np.full(num_classes, -4.0, dtype=dtype)

    def __call__(self, feat):
        bx = T.relu(self.box1(feat))
        bx = T.relu(self.box2(bx))
        dist_logits = self.box_out(bx)  # [B, 4*16, H, W]
        cl = T.relu(self.cls1(feat))
        cl = T.relu(self.cls2(cl))
        cls_logits = self.cls_out(cl)  # [B, ncls, H, W]
        return dist_logits, cls_logits


def cell_centers(h, w, stride):
    """Pixel coordinates of cell centers, shape [h*w] each (cx, cy)."""
    ys, xs = np.divmod(np.arange(h * w), w)
    return (xs + 0.5) * stride, (ys + 0.5) * stride


def decode_boxes_np(dist_logits, stride, img_size):
    """Non-differentiable decode of [B,64,H,W] logits -> boxes [B,HW,4]."""
    b, _, h, w = dist_logits.shape
    logits = dist_logits.reshape(b, 4, NUM_BINS, h * w)
    z = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)
    dist = (p * np.arange(NUM_BINS)[None, None, :, None]).sum(axis=2) * stride
    cxs, cys = cell_centers(h, w, stride)
    x1 = np.clip(cxs[None] - dist[:, 0], 0, img_size)
    y1 = np.clip(cys[None] - dist[:, 1], 0, img_size)
    x2 = np.clip(cxs[None] + dist[:, 2], 0, img_size)
    y2 = np.clip(cys[None] + dist[:, 3], 0, img_size)
    bw = np.maximum(x2 - x1, 1.0)
    bh = np.maximum(y2 - y1, 1.0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, bw, bh], axis=-1)


def decode_boxes_at(dist_logits, cells, stride, img_size):
    """Differentiable decode at selected cells.

    ``dist_logits`` is the [B,64,H,W] tensor; ``cells`` is a list of
    (batch_idx, flat_cell) pairs. Returns boxes [N,4].
    """
    b, _, h, w = dist_logits.shape
    flat = T.reshape(dist_logits, (b, 4, NUM_BINS, h * w))
    flat = T.reshape(T.transpose(flat, (0, 3, 1, 2)), (b * h * w * 4, NUM_BINS))
    rows = np.concatenate(
        [(bi * h * w + ci) * 4 + np.arange(4) for bi, ci in cells]
    )
    logits = T.gather_rows(flat, rows)  # [N*4, 16]
    p = T.softmax(logits, axis=1)
    bins = Tensor(np.arange(NUM_BINS, dtype=dist_logits.dtype)[None, :])
    dist = T.reduce_sum(p * bins, axis=1) * float(stride)  # [N*4]
    n = len(cells)
    dist = T.reshape(dist, (n, 4))
    cxs, cys = cell_centers(h, w, stride)
    ccx = np.array([cxs[ci] for _, ci in cells], dtype=dist_logits.dtype)
    ccy = np.array([cys[ci] for _, ci in cells], dtype=dist_logits.dtype)
    l, t, r, bt = (T.reshape(T.narrow(dist, 1, i, 1), (n,)) for i in range(4))
    x1 = T.clamp(Tensor(ccx) - l, 0.0, float(img_size))
    y1 = T.clamp(Tensor(ccy) - t, 0.0, float(img_size))
    x2 = T.clamp(Tensor(ccx) + r, 0.0, float(img_size))
    y2 = T.clamp(Tensor(ccy) + bt, 0.0, float(img_size))
    bw = T.maximum(x2 - x1, Tensor(np.asarray(1.0, dtype=dist_logits.dtype)))
    bh = T.maximum(y2 - y1, Tensor(np.asarray(1.0, dtype=dist_logits.dtype)))
    cols = [
        (x1 + x2) * 0.5,
        (y1 + y2) * 0.5,
        bw,
        bh,
    ]
    return T.concat([T.reshape(cv, (n, 1)) for cv in cols], axis=1), logits


# ---------------------------------------------------------------------------
# target assignment

STRIDES = (8, 16, 32)


def pick_level(w, h, strides=STRIDES):
    """Stride whose scale best matches sqrt(area), by |log2(size/(4*stride))|."""
    size = np.sqrt(w * h)
    scores = [abs(np.log2(size / (4.0 * s))) for s in strides]
    return int(np.argmin(scores))


def assign_targets(gt_boxes, gt_classes, img_size, strides=STRIDES):
    """Center-cell assignment: one GT per cell, larger area wins ties.

    Returns per-level dicts mapping flat cell index -> (Box, class_id).
    """
    levels = [dict() for _ in strides]
    for box, cls in zip(gt_boxes, gt_classes):
        li = pick_level(box.w, box.h, strides)
        s = strides[li]
        grid = img_size // s
        col = min(int(box.cx // s), grid - 1)
        row = min(int(box.cy // s), grid - 1)
        cell = row * grid + col
        prev = levels[li].get(cell)
        if prev is None or box.w * box.h > prev[0].w * prev[0].h:
            levels[li][cell] = (box, int(cls))
    return levels


class DetectionLoss:
    """Eq-style unweighted sum of CIoU + DFL + BCE (weights configurable)."""

    def __init__(self, num_classes, img_size, strides=STRIDES, weights=(1.0, 1.0, 1.0)):
        self.num_classes = num_classes
        self.img_size = img_size
        self.strides = strides
        self.weights = weights

    def __call__(self, level_outputs, batch_gt):
        """level_outputs: [(dist_logits, cls_logits)] per level;
        batch_gt: per image, (list of Box, list of class ids).
        Returns (total, box_loss, dfl_loss, cls_loss) tensors.
        """
        dtype = level_outputs[0][0].dtype
        per_image = [
            assign_targets(boxes, classes, self.img_size, self.strides)
            for boxes, classes in batch_gt
        ]
        ciou_parts, dfl_parts = [], []
        bce_sum = None
        total_elems = 0
        for li, (dist_logits, cls_logits) in enumerate(level_outputs):
            b, _, h, w = cls_logits.shape
            stride = self.strides[li]
            cells, gts = [], []
            cls_target = np.zeros(cls_logits.shape, dtype=dtype)
            for bi in range(b):
                for cell, (box, cls) in per_image[bi][li].items():
                    cells.append((bi, cell))
                    gts.append(box)
                    cls_target[bi, cls, cell // w, cell % w] = 1.0
            bce_elem = T.reduce_sum(
                T.softplus(cls_logits) - cls_logits * Tensor(cls_target)
            )
            bce_sum = bce_elem if bce_sum is None else bce_sum + bce_elem
            total_elems += cls_logits.size
            if cells:
                pred_boxes, _ = decode_boxes_at(
                    dist_logits, cells, stride, self.img_size
                )
                gt_arr = np.array(
                    [[g.cx, g.cy, g.w, g.h] for g in gts], dtype=dtype
                )
                ciou_parts.append(T.reduce_sum(ciou_loss_t(pred_boxes, Tensor(gt_arr))))
                dfl_parts.append(
                    T.reduce_sum(self._dfl_for(dist_logits, cells, gts, stride, h, w))
                )
        npos = sum(len(lv) for img in per_image for lv in img)
        cls_loss = bce_sum * (1.0 / total_elems)
        if ciou_parts:
            box_loss = _sum_all(ciou_parts) * (1.0 / npos)
            dfl_loss_v = _sum_all(dfl_parts) * (1.0 / (4 * npos))
        else:
            zero = Tensor(np.asarray(0.0, dtype=dtype))
            box_loss, dfl_loss_v = zero, zero
        wb, wd, wc = self.weights
        total = box_loss * wb + dfl_loss_v * wd + cls_loss * wc
        return total, box_loss, dfl_loss_v, cls_loss

    def _dfl_for(self, dist_logits, cells, gts, stride, h, w):
        b = dist_logits.shape[0]
        flat = T.reshape(dist_logits, (b, 4, NUM_BINS, h * w))
        flat = T.reshape(T.transpose(flat, (0, 3, 1, 2)), (b * h * w * 4, NUM_BINS))
        rows = np.concatenate(
            [(bi * h * w + ci) * 4 + np.arange(4) for bi, ci in cells]
        )
        logits = T.gather_rows(flat, rows)
        cxs, cys = cell_centers(h, w, stride)
        targets = []
        for (bi, ci), g in zip(cells, gts):
            x1, y1, x2, y2 = g.corners()
            targets.extend(
                [
                    (cxs[ci] - x1) / stride,
                    (cys[ci] - y1) / stride,
                    (x2 - cxs[ci]) / stride,
                    (y2 - cys[ci]) / stride,
                ]
            )
        y = np.clip(np.asarray(targets), 0.0, NUM_BINS - 1 - 1e-3)
        return dfl_loss_t(logits, y)


def _sum_all(parts):
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def total_loss(level_outputs, batch_gt, num_classes, img_size, weights=(1.0, 1.0, 1.0)):
    return DetectionLoss(num_classes, img_size, weights=weights)(
        level_outputs, batch_gt
    )


# ---------------------------------------------------------------------------
# inference: decode, NMS, AP


def detections_from_outputs(level_outputs, img_size, strides=STRIDES):
    """Per-image Detection lists from raw head outputs (no thresholding)."""
    b = level_outputs[0][1].shape[0]
    per_image = [[] for _ in range(b)]
    for li, (dist_logits, cls_logits) in enumerate(level_outputs):
        dist = dist_logits.data if isinstance(dist_logits, Tensor) else dist_logits
        cls = cls_logits.data if isinstance(cls_logits, Tensor) else cls_logits
        boxes = decode_boxes_np(dist, strides[li], img_size)
        _, ncls, h, w = cls.shape
        z = cls.reshape(b, ncls, h * w)
        probs = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                         np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        for bi in range(b):
            for cell in range(h * w):
                cx, cy, bw, bh = boxes[bi, cell]
                per_image[bi].append(
                    Detection(
                        box=Box(float(cx), float(cy), float(bw), float(bh)),
                        class_probs=probs[bi, :, cell].copy(),
                    )
                )
    return per_image


def nms(dets, iou_thresh=0.65, conf_thresh=0.25):
    """Greedy per-class suppression; strict > on the IoU threshold."""
    kept = []
    survivors = [
        (i, d) for i, d in enumerate(dets) if d.confidence >= conf_thresh
    ]
    classes = sorted({d.class_id for _, d in survivors})
    for cls in classes:
        pool = [(i, d) for i, d in survivors if d.class_id == cls]
        # highest confidence first; ties by lower original index
        pool.sort(key=lambda t: (-t[1].confidence, t[0]))
        while pool:
            idx, best = pool.pop(0)
            kept.append((idx, best))
            pool = [
                (i, d) for i, d in pool if box_iou(best.box, d.box) <= iou_thresh
            ]
    kept.sort(key=lambda t: (-t[1].confidence, t[0]))
    return [d for _, d in kept]


def average_precision_single(dets_per_image, gts_per_image, iou_thresh):
    """101-point interpolated AP at one IoU threshold, averaged over classes.

    ``dets_per_image``: list (per image) of Detection lists;
    ``gts_per_image``: list of (boxes, class_ids).
    """
    class_ids = sorted(
        {int(c) for _, classes in gts_per_image for c in classes}
    )
    if not class_ids:
        return 0.0, {}
    per_class = {}
    for cls in class_ids:
        records = []  # (confidence, image, det)
        n_gt = 0
        for img, (gt_boxes, gt_classes) in enumerate(gts_per_image):
            n_gt += sum(1 for c in gt_classes if int(c) == cls)
        for img, dets in enumerate(dets_per_image):
            for d in dets:
                if d.class_id == cls:
                    records.append((d.confidence, img, d))
        records.sort(key=lambda r: -r[0])
        matched = [set() for _ in gts_per_image]
        tp = np.zeros(len(records))
        for ri, (_, img, d) in enumerate(records):
            gt_boxes, gt_classes = gts_per_image[img]
            best_iou, best_j = 0.0, -1
            for j, (gb, gc) in enumerate(zip(gt_boxes, gt_classes)):
                if int(gc) != cls or j in matched[img]:
                    continue
                iou = box_iou(d.box, gb)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                matched[img].add(best_j)
                tp[ri] = 1.0
        if n_gt == 0:
            per_class[cls] = 0.0
            continue
        cum_tp = np.cumsum(tp)
        precision = cum_tp / (np.arange(len(records)) + 1) if len(records) else np.zeros(0)
        recall = cum_tp / n_gt if len(records) else np.zeros(0)
        ap = 0.0
        for r in np.linspace(0, 1, 101):
            mask = recall >= r - 1e-12
            ap += precision[mask].max() if mask.any() else 0.0
        per_class[cls] = ap / 101.0
    return float(np.mean(list(per_class.values()))), per_class


def average_precision(dets_per_image, gts_per_image, iou_thresh=None):
    """AP over IoU 0.50:0.05:0.95 (or one threshold if given) plus AP50."""
    if iou_thresh is not None:
        return average_precision_single(dets_per_image, gts_per_image, iou_thresh)[0]
    thresholds = np.arange(0.5, 0.96, 0.05)
    aps = [
        average_precision_single(dets_per_image, gts_per_image, t)[0]
        for t in thresholds
    ]
    ap50, per_class = average_precision_single(dets_per_image, gts_per_image, 0.5)
    return {"ap": float(np.mean(aps)), "ap50": ap50, "per_class": per_class}
