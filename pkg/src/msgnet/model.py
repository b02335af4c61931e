"""Full detection stack: encoder, cross-modal fusion, temporal mixing, head.

Input contract is four frames: RGB and thermal at t-1 and t, all encoded
by one shared-parameter encoder. Fusion runs independently per timestep
with shared weights; the temporal module joins the two fused pyramids
and the decoupled head reads the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .detect import DetectionHead, DetectionLoss
from .encoder import Encoder
from .hstm import HybridTemporal
from .nn import Module
from .ssglm import SpatialFusion
from .tensor import Tensor, dump_msgt, load_msgt


@dataclass
class ModelConfig:
    base_channels: int = 16
    num_classes: int = 3
    image_size: int = 64
    tau: float = 0.25
    k_spatial: int = 25
    k_temporal: int = 100
    loss_weights: tuple = (1.0, 1.0, 1.0)
    dtype: object = np.float32


@dataclass
class ForwardResult:
    level_outputs: list  # [(dist_logits, cls_logits)] per level
    lam: np.ndarray  # [B] scale estimates (current frame)
    decisions: list  # PartitionDecision per item (current frame)
    graphs: list  # all sparse graphs built during the pass


def _flip_np(a, fy, fx):
    if fy:
        a = a[:, :, ::-1, :]
    if fx:
        a = a[:, :, :, ::-1]
    return np.ascontiguousarray(a)


class MSGNet(Module):
    def __init__(self, rng, config=None):
        cfg = config or ModelConfig()
        self.config = cfg
        dt = cfg.dtype
        self.encoder = Encoder(rng, cfg.base_channels, dtype=dt)
        chans = self.encoder.level_channels()
        self.fusion = SpatialFusion(rng, chans, tau=cfg.tau, k=cfg.k_spatial, dtype=dt)
        self.temporal = HybridTemporal(rng, chans, tau=cfg.tau, k=cfg.k_temporal, dtype=dt)
        self.heads = [
            DetectionHead(rng, c, cfg.num_classes, dtype=dt) for c in chans
        ]

    def _encode_thermal(self, th, rgb_shape):
        # standardize thermal resolution to the RGB extent before encoding
        # (pure resampling, no spatial registration) so the coarse thermal
        # level keeps enough spatial structure to carry the zoom cue
        h, w = rgb_shape[2:]
        if th.shape[2:] != (h, w):
            th = T.bilinear_resize(th, h, w)
        return self.encoder(th)

    def forward(self, rgb_prev, th_prev, rgb_curr, th_curr):
        fused_prev = self.fusion.fuse(
            self.encoder(rgb_prev), self._encode_thermal(th_prev, rgb_prev.shape)
        )
        fused_curr = self.fusion.fuse(
            self.encoder(rgb_curr), self._encode_thermal(th_curr, rgb_curr.shape)
        )
        level_feats, t_graphs = self.temporal(fused_prev.fused, fused_curr.fused)
        outputs = [head(feat) for head, feat in zip(self.heads, level_feats)]
        lam = np.array([d.lam for d in fused_curr.decisions])
        graphs = fused_prev.graphs + fused_curr.graphs + t_graphs
        return ForwardResult(
            level_outputs=outputs,
            lam=lam,
            decisions=fused_curr.decisions,
            graphs=graphs,
        )

    def forward_with_lambda(self, rgb_prev, th_prev, rgb_curr, th_curr):
        """Like forward but also returns the differentiable lam tensor."""
        fused_prev = self.fusion.fuse(
            self.encoder(rgb_prev), self._encode_thermal(th_prev, rgb_prev.shape)
        )
        fused_curr = self.fusion.fuse(
            self.encoder(rgb_curr), self._encode_thermal(th_curr, rgb_curr.shape)
        )
        level_feats, t_graphs = self.temporal(fused_prev.fused, fused_curr.fused)
        outputs = [head(feat) for head, feat in zip(self.heads, level_feats)]
        result = ForwardResult(
            level_outputs=outputs,
            lam=np.array([d.lam for d in fused_curr.decisions]),
            decisions=fused_curr.decisions,
            graphs=fused_prev.graphs + fused_curr.graphs + t_graphs,
        )
        return result, fused_curr.lam

    def predict_scale(self, rgb_curr, th_curr, flip_average=True):
        """Scale estimates [B] from the current frame only.

        With ``flip_average`` the estimate is the mean over the four
        horizontal/vertical flip variants, which reduces estimator
        variance at inference without touching training.
        """
        variants = (
            ((False, False), (False, True), (True, False), (True, True))
            if flip_average
            else ((False, False),)
        )
        lams = []
        with T.no_grad():
            for fy, fx in variants:
                rgb = Tensor(_flip_np(np.asarray(rgb_curr.data), fy, fx))
                th = Tensor(_flip_np(np.asarray(th_curr.data), fy, fx))
                rgb_pyr = self.encoder(rgb)
                th_pyr = self._encode_thermal(th, rgb.shape)
                p4h, p4w = rgb_pyr.p4.shape[2:]
                th_p4 = T.bilinear_resize(th_pyr.p4, p4h, p4w)
                lams.append(
                    np.asarray(self.fusion.apl.predict_lambda(rgb_pyr.p4, th_p4).data)
                )
        return np.mean(lams, axis=0)

    def loss_fn(self):
        return DetectionLoss(
            self.config.num_classes,
            self.config.image_size,
            weights=self.config.loss_weights,
        )


# ---------------------------------------------------------------------------
# checkpoint: concatenated MSGT tensors plus a text manifest


def save_checkpoint(model, path):
    path = Path(path)
    names, offsets = [], []
    with open(path, "wb") as f:
        for name, p in model.named_parameters():
            offsets.append(f.tell())
            names.append((name, p.data.shape))
            dump_msgt(p.data, f)
    with open(path.with_suffix(path.suffix + ".manifest"), "w") as f:
        for (name, shape), off in zip(names, offsets):
            dims = "x".join(str(d) for d in shape)
            f.write(f"{name} {off} {dims}\n")


def load_checkpoint(model, path):
    path = Path(path)
    entries = []
    with open(path.with_suffix(path.suffix + ".manifest")) as f:
        for line in f:
            name, off, dims = line.split()
            entries.append((name, int(off)))
    state = {}
    with open(path, "rb") as f:
        for name, off in entries:
            f.seek(off)
            state[name] = load_msgt(f)
    model.load_state_dict(state)
