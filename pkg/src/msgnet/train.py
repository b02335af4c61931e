"""Toy training loop and evaluation over the synthetic dataset.

SGD with momentum and a linear warm-up over the first fraction of steps.
The loss is the detection stack loss, optionally extended with direct
supervision of the scale estimate toward the center of its target bin
(the synthetic generator provides the true scale for each pair).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .apl import GAMMA_BINS, lambda_to_gamma
from .detect import Box, average_precision, detections_from_outputs, nms
from .model import ModelConfig, MSGNet
from .nn import SGD
from .synth import SamplePair, _bilinear_np, list_ids, load_pair
from .tensor import Tensor


@dataclass
class TrainConfig:
    dataset_root: str = "data"
    epochs: int = 5
    batch_size: int = 4
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.938
    warmup_frac: float = 0.05
    lambda_weight: float = 1.0
    conf_thresh: float = 0.25
    nms_iou: float = 0.65
    eval_every: int = 1
    time_budget_s: float = None
    max_samples: int = None
    # optional second phase: once the encoder is warm, a smaller rate lets
    # the scale head fit without oscillating
    phase2_epoch: int = None
    phase2_lr: float = 0.001
    phase2_lambda_weight: float = None
    phase2_loss_weights: tuple = None
    # slack inside the target bin before the scale loss engages; 0 = plain MSE
    lambda_margin: float = 0.0
    augment: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)


def _resize_chw(arr, out_h, out_w):
    return np.stack([_bilinear_np(ch, out_h, out_w) for ch in arr])


def _scale_crop(pair, rng):
    """Center-crop the RGB view by a random factor and resize back.

    The thermal view is untouched, so the effective scale between the two
    modalities becomes s/c — each scene yields a continuum of scale
    examples instead of one discrete bin. Boxes are remapped; objects
    that leave the cropped view are dropped.
    """
    s = pair.true_scale
    lo = max(s, 0.5)
    if lo >= 0.97:
        return pair
    c = rng.uniform(lo, 1.0)
    if c >= 0.97:
        return pair
    _, h, w = pair.rgb_curr.shape
    ch = max(int(np.ceil(c * h)), int(np.ceil(s * h)))
    cw = max(int(np.ceil(c * w)), int(np.ceil(s * w)))
    cy, cx = ch / h, cw / w
    top, left = (h - ch) // 2, (w - cw) // 2
    boxes, classes = [], []
    for b, cls in zip(pair.boxes, pair.classes):
        x = (b[0] - left) / cx
        y = (b[1] - top) / cy
        bw, bh = b[2] / cx, b[3] / cy
        if x - bw / 2 < 0 or y - bh / 2 < 0 or x + bw / 2 > w or y + bh / 2 > h:
            continue
        boxes.append([x, y, bw, bh])
        classes.append(cls)
    crop = lambda a: _resize_chw(a[:, top : top + ch, left : left + cw], h, w)
    return SamplePair(
        rgb_prev=crop(pair.rgb_prev).astype(np.float32),
        rgb_curr=crop(pair.rgb_curr).astype(np.float32),
        th_prev=pair.th_prev,
        th_curr=pair.th_curr,
        boxes=boxes,
        classes=classes,
        true_scale=float(s / cx),
    )


def _augment_pair(pair, rng):
    """Random scale crop, flips, brightness jitter and pixel noise."""
    pair = _scale_crop(pair, rng)
    rp, rc = pair.rgb_prev, pair.rgb_curr
    tp, tc = pair.th_prev, pair.th_curr
    _, h, w = rc.shape
    boxes = [list(b) for b in pair.boxes]
    if rng.random() < 0.5:
        rp, rc, tp, tc = (a[:, :, ::-1] for a in (rp, rc, tp, tc))
        boxes = [[w - b[0], b[1], b[2], b[3]] for b in boxes]
    if rng.random() < 0.5:
        rp, rc, tp, tc = (a[:, ::-1, :] for a in (rp, rc, tp, tc))
        boxes = [[b[0], h - b[1], b[2], b[3]] for b in boxes]
    classes = list(pair.classes)
    gain = rng.uniform(0.8, 1.2)
    sigma = 0.01
    rp = np.clip(rp * gain + rng.normal(0, sigma, rp.shape), 0, 1)
    rc = np.clip(rc * gain + rng.normal(0, sigma, rc.shape), 0, 1)
    tp = np.clip(tp + rng.normal(0, sigma, tp.shape), 0, 1)
    tc = np.clip(tc + rng.normal(0, sigma, tc.shape), 0, 1)
    return SamplePair(
        rgb_prev=rp.astype(np.float32),
        rgb_curr=rc.astype(np.float32),
        th_prev=tp.astype(np.float32),
        th_curr=tc.astype(np.float32),
        boxes=boxes,
        classes=classes,
        true_scale=pair.true_scale,
    )


def _batch_tensors(pairs, dtype):
    rgb_prev = Tensor(np.stack([p.rgb_prev for p in pairs]).astype(dtype))
    rgb_curr = Tensor(np.stack([p.rgb_curr for p in pairs]).astype(dtype))
    th_prev = Tensor(np.stack([p.th_prev for p in pairs]).astype(dtype))
    th_curr = Tensor(np.stack([p.th_curr for p in pairs]).astype(dtype))
    gts = [
        ([Box(*b) for b in p.boxes], list(p.classes)) for p in pairs
    ]
    scales = np.array([p.true_scale for p in pairs])
    return rgb_prev, th_prev, rgb_curr, th_curr, gts, scales


def train_toy(config, log=None):
    """Train the full stack; returns (model, list of per-epoch metric rows)."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    model = MSGNet(rng, cfg.model)
    dtype = cfg.model.dtype
    train_ids = list_ids(f"{cfg.dataset_root}/train")
    if cfg.max_samples:
        train_ids = train_ids[: cfg.max_samples]
    if not train_ids:
        raise RuntimeError(f"no training samples under {cfg.dataset_root}/train")
    pairs = {i: load_pair(f"{cfg.dataset_root}/train", i) for i in train_ids}
    try:
        val_ids = list_ids(f"{cfg.dataset_root}/val")
    except OSError:
        val_ids = []
    steps_per_epoch = (len(train_ids) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    warmup = max(1, int(np.ceil(cfg.warmup_frac * total_steps)))
    opt = SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        warmup_steps=warmup,
    )
    loss_fn = model.loss_fn()
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    rows = []
    t0 = time.monotonic()
    stop = False
    lam_w = cfg.lambda_weight
    det_w = None
    for epoch in range(cfg.epochs):
        if cfg.phase2_epoch is not None and epoch == cfg.phase2_epoch:
            opt.base_lr = cfg.phase2_lr
            if cfg.phase2_lambda_weight is not None:
                lam_w = cfg.phase2_lambda_weight
            if cfg.phase2_loss_weights is not None:
                det_w = cfg.phase2_loss_weights
        order = shuffle_rng.permutation(len(train_ids))
        sums = np.zeros(4)
        nb = 0
        for s in range(steps_per_epoch):
            batch_ids = [
                train_ids[order[k]]
                for k in range(
                    s * cfg.batch_size, min((s + 1) * cfg.batch_size, len(train_ids))
                )
            ]
            batch = [pairs[i] for i in batch_ids]
            if cfg.augment:
                batch = [_augment_pair(p, aug_rng) for p in batch]
            rp, tp_, rc, tc, gts, scales = _batch_tensors(batch, dtype)
            T.reset_tape()
            result, lam_t = model.forward_with_lambda(rp, tp_, rc, tc)
            total, box_l, dfl_l, cls_l = loss_fn(result.level_outputs, gts)
            if det_w is not None:
                total = box_l * det_w[0] + dfl_l * det_w[1] + cls_l * det_w[2]
            lam_target = Tensor(np.clip(scales - 0.1, 0.0, None).astype(dtype))
            lam_err = lam_t - lam_target
            if cfg.lambda_margin:
                mag = T.maximum(lam_err, T.neg(lam_err))
                lam_err = T.relu(mag - cfg.lambda_margin)
            lam_loss = T.reduce_mean(lam_err * lam_err)
            if lam_w:
                total = total + lam_loss * lam_w
            if not np.isfinite(total.item()):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} step {s}"
                )
            opt.zero_grad()
            T.backward(total)
            opt.step()
            sums += [box_l.item(), dfl_l.item(), cls_l.item(), lam_loss.item()]
            nb += 1
            if cfg.time_budget_s and time.monotonic() - t0 > cfg.time_budget_s:
                stop = True
                break
        T.reset_tape()
        row = {
            "epoch": epoch,
            "box_loss": float(sums[0] / nb),
            "dfl_loss": float(sums[1] / nb),
            "cls_loss": float(sums[2] / nb),
            "lambda_loss": float(sums[3] / nb),
            "val_ap50": None,
        }
        if val_ids and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            metrics = evaluate(model, f"{cfg.dataset_root}/val", val_ids, cfg)
            row["val_ap50"] = metrics["ap50"]
        rows.append(row)
        if log:
            log(row)
        if stop:
            break
    return model, rows


def evaluate(model, split_root, ids=None, config=None):
    """AP metrics, scale-bin confusion matrix, and kept-edge statistics."""
    ids = ids if ids is not None else list_ids(split_root)
    conf_thresh = config.conf_thresh if config else 0.25
    nms_iou = config.nms_iou if config else 0.65
    dtype = model.config.dtype
    img_size = model.config.image_size
    dets_all, gts_all = [], []
    nbins = len(GAMMA_BINS)
    confusion = np.zeros((nbins, nbins), dtype=int)
    edge_counts = []
    with T.no_grad():
        for sid in ids:
            pair = load_pair(split_root, sid)
            rp, tp_, rc, tc, gts, scales = _batch_tensors([pair], dtype)
            result = model.forward(rp, tp_, rc, tc)
            dets = detections_from_outputs(
                result.level_outputs, img_size, strides=(8, 16, 32)
            )[0]
            dets_all.append(nms(dets, iou_thresh=nms_iou, conf_thresh=conf_thresh))
            gts_all.append(gts[0])
            true_bin = GAMMA_BINS.index(
                min(GAMMA_BINS, key=lambda g: abs(g - pair.true_scale))
            )
            pred_lam = float(model.predict_scale(rc, tc)[0])
            pred_bin = GAMMA_BINS.index(lambda_to_gamma(pred_lam))
            confusion[true_bin, pred_bin] += 1
            edge_counts.extend(g.num_edges for g in result.graphs)
    ap = average_precision(dets_all, gts_all)
    gamma_acc = float(np.trace(confusion) / max(confusion.sum(), 1))
    return {
        "ap50": ap["ap50"],
        "ap": ap["ap"],
        "per_class": {str(k): v for k, v in ap["per_class"].items()},
        "gamma_confusion": confusion.tolist(),
        "gamma_accuracy": gamma_acc,
        "mean_kept_edges": float(np.mean(edge_counts)) if edge_counts else 0.0,
        "num_images": len(ids),
    }
