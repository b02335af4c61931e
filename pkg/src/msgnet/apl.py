"""Adaptive partitioning: estimate the RGB/thermal scale discrepancy.

A small head reads the concatenated coarse feature maps of both
modalities and regresses a nonnegative scale estimate ``lam`` per batch
item. ``lam`` is discretized into one of five crop factors ``gamma``
which select a centered rectangle of the RGB map for cross-modal fusion.
The discrete step is bridged for training by a multiplicative
straight-through surrogate (``crop_fused``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module

GAMMA_BINS = (0.2, 0.4, 0.6, 0.8, 1.0)
STE_EPS = 1e-8  # keeps the surrogate gradient bounded as lam -> 0


@dataclass
class PartitionDecision:
    lam: float
    gamma: float
    crop_rect: tuple  # (top, left, h, w) on the RGB feature map


def lambda_to_gamma(lam):
    """Ceil to the next multiple of 0.2, clamped to 1.0; 0 maps to 0.2."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if lam >= 1.0:
        return 1.0
    # 1e-9 slack keeps exact bin values idempotent despite float division
    idx = int(np.ceil(lam / 0.2 - 1e-9))
    idx = min(max(idx, 1), 5)
    return GAMMA_BINS[idx - 1]


def make_crop_rect(gamma, h, w):
    """Centered rectangle covering the ``gamma`` fraction of each extent."""
    ch = max(1, int(np.floor(gamma * h + 0.5)))
    cw = max(1, int(np.floor(gamma * w + 0.5)))
    return ((h - ch) // 2, (w - cw) // 2, ch, cw)


class AdaptivePartitioner(Module):
    """lam head: concat -> conv+relu -> strided conv+relu -> GAP -> MLP."""

    def __init__(self, rng, in_channels, hidden=32, dtype=np.float32):
        self.conv1 = Conv2d(rng, 2 * in_channels, hidden, 3, dtype=dtype)
        self.conv2 = Conv2d(rng, hidden, hidden, 3, stride=2, dtype=dtype)
        self.fc1 = Linear(rng, hidden, 64, dtype=dtype)
        self.fc2 = Linear(rng, 64, 1, dtype=dtype)

    def predict_lambda(self, rgb_feat, th_feat):
        """Per-batch nonnegative scale estimate, differentiable."""
        if rgb_feat.shape[2:] != th_feat.shape[2:]:
            raise ValueError(
                f"spatial mismatch: rgb {rgb_feat.shape} vs thermal {th_feat.shape}"
            )
        x = T.concat([rgb_feat, th_feat], axis=1)
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        x = T.global_avg_pool(x)
        x = T.relu(self.fc1(x))
        x = T.softplus(self.fc2(x))
        return T.reshape(x, (x.shape[0],))

    def decide(self, rgb_feat, th_feat, level_extents):
        """lam tensor plus one PartitionDecision per batch item per level.

        ``level_extents`` is a list of (H, W) pairs; the same gamma is
        reused at every level, with the rectangle scaled to each extent.
        """
        lam = self.predict_lambda(rgb_feat, th_feat)
        decisions = []
        for lv in lam.data:
            gamma = lambda_to_gamma(float(lv))
            rects = [make_crop_rect(gamma, h, w) for h, w in level_extents]
            decisions.append(
                PartitionDecision(lam=float(lv), gamma=gamma, crop_rect=rects[0])
            )
        return lam, decisions


def crop_fused(rgb_feat, rect, lam_item):
    """Crop with a straight-through route for the scale gradient.

    Forward output is bitwise the plain crop (the surrogate factor
    (lam+eps)/stop_grad(lam+eps) is exactly 1); backward routes the
    downstream gradient into ``lam_item`` as sum(grad * cropped)/(lam+eps).
    """
    top, left, h, w = rect
    cropped = T.crop(rgb_feat, top, left, h, w)
    shifted = lam_item + STE_EPS
    factor = T.reshape(shifted / shifted.detach(), (1, 1, 1, 1))
    return cropped * factor


def gamma_table(step=0.01, stop=1.5):
    """(lam, gamma) rows over a lam grid, for regression testing."""
    n = int(round(stop / step))
    rows = []
    for i in range(n + 1):
        lam = round(i * step, 10)
        rows.append((lam, lambda_to_gamma(lam)))
    return rows
