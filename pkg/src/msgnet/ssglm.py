"""Cross-modal fusion: thermal messages injected into the RGB pyramid.

Per timestep: the partitioner picks a centered crop of the RGB maps, the
thermal maps are resized to the crop extent, one shared 1x1 projection
maps both modalities into a common embedding, and sparse graph attention
aggregates thermal patches into the cropped RGB patches. The enriched
crop is scattered back into a copy of the full RGB map, so pyramid
shapes are independent of the crop factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .apl import AdaptivePartitioner, crop_fused, make_crop_rect
from .encoder import FeaturePyramid
from .nn import Conv2d, Module, uniform_param
from .sparsegraph import GraphConfig, NodeSet, aggregate, prune, score_dense


@dataclass
class FusedFrame:
    fused: FeaturePyramid
    decisions: list  # one PartitionDecision per batch item
    graphs: list  # SparseBipartiteGraph per (item, level), row-major
    lam: object = None  # differentiable [B] scale estimates


class LevelGraphWeights(Module):
    """Per-level projections: shared 1x1 map plus Wq/Wk/Wv/Wo (bias-free)."""

    def __init__(self, rng, channels, dtype=np.float32):
        self.shared_proj = Conv2d(rng, channels, channels, 1, dtype=dtype)
        self.wq = uniform_param(rng, (channels, channels), channels, dtype)
        self.wk = uniform_param(rng, (channels, channels), channels, dtype)
        self.wv = uniform_param(rng, (channels, channels), channels, dtype)
        self.wo = uniform_param(rng, (channels, channels), channels, dtype)


class SpatialFusion(Module):
    """S-SGLM over all pyramid levels, including the partitioning layer."""

    def __init__(self, rng, level_channels, tau=0.25, k=25, dtype=np.float32):
        self.apl = AdaptivePartitioner(rng, level_channels[-1], dtype=dtype)
        self.levels = [LevelGraphWeights(rng, c, dtype=dtype) for c in level_channels]
        self.tau = tau
        self.k = k

    def fuse(self, rgb, th):
        """FusedFrame from one RGB pyramid and one thermal pyramid."""
        if rgb.batch != th.batch:
            raise ValueError(f"batch mismatch: rgb {rgb.batch} vs thermal {th.batch}")
        b = rgb.batch
        # partition decision from the coarsest level, thermal resized first
        p4h, p4w = rgb.p4.shape[2:]
        th_p4 = T.bilinear_resize(th.p4, p4h, p4w)
        lam, decisions = self.apl.decide(
            rgb.p4, th_p4, [lvl.shape[2:] for lvl in rgb.levels()]
        )
        fused_levels = []
        graphs = []
        for li, (rgb_lvl, th_lvl) in enumerate(zip(rgb.levels(), th.levels())):
            items = []
            for i in range(b):
                rect = make_crop_rect(
                    decisions[i].gamma, rgb_lvl.shape[2], rgb_lvl.shape[3]
                )
                rgb_i = T.narrow(rgb_lvl, 0, i, 1)
                th_i = T.narrow(th_lvl, 0, i, 1)
                lam_i = T.narrow(lam, 0, i, 1)
                out_i, g = self._fuse_level_item(rgb_i, th_i, lam_i, rect, li)
                items.append(out_i)
                graphs.append(g)
            fused_levels.append(T.concat(items, axis=0) if b > 1 else items[0])
        return FusedFrame(
            fused=FeaturePyramid(*fused_levels),
            decisions=decisions,
            graphs=graphs,
            lam=lam,
        )

    def _fuse_level_item(self, rgb_map, th_map, lam_i, rect, level_idx):
        weights = self.levels[level_idx]
        top, left, h, w = rect
        c = rgb_map.shape[1]
        cropped = crop_fused(rgb_map, rect, lam_i)  # [1,C,h,w]
        th_resized = T.bilinear_resize(th_map, h, w)
        proj_rgb = weights.shared_proj(cropped)
        proj_th = weights.shared_proj(th_resized)
        n = h * w
        rgb_nodes = NodeSet.from_map(_to_nodes(proj_rgb, c, n), "rgb", h, w)
        th_nodes = NodeSet.from_map(_to_nodes(proj_th, c, n), "thermal", h, w)
        raw, gatem = score_dense(th_nodes, rgb_nodes, weights.wq, weights.wk)
        cfg = GraphConfig(tau=self.tau, k=min(self.k, n), d_embed=c)
        graph = prune(raw, gatem, cfg)
        dst_orig = _to_nodes(cropped, c, n)
        out_nodes = aggregate(
            graph, raw, th_nodes.feats, dst_orig, weights.wv, weights.wo
        )
        out_map = T.reshape(T.transpose(out_nodes, (1, 0)), (1, c, h, w))
        return T.paste(rgb_map, out_map, top, left), graph


def _to_nodes(fmap, c, n):
    """[1,C,h,w] -> [h*w, C] with grid positions in row-major order."""
    return T.transpose(T.reshape(fmap, (c, n)), (1, 0))
