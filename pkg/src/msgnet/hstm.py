"""Temporal modeling over the two fused frames.

Two branches per pyramid level: sparse graph attention from previous to
current frame patches (redundancy filtering with a large in-degree cap),
and a star block mixing local spatial structure of both frames via a
relu-gated elementwise product in an expanded channel space. Branch
outputs are summed and passed through a 1x1 projection.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, uniform_param
from .sparsegraph import GraphConfig, NodeSet, aggregate, prune, score_dense


class TemporalGraphWeights(Module):
    def __init__(self, rng, channels, dtype=np.float32):
        self.wq = uniform_param(rng, (channels, channels), channels, dtype)
        self.wk = uniform_param(rng, (channels, channels), channels, dtype)
        self.wv = uniform_param(rng, (channels, channels), channels, dtype)
        self.wo = uniform_param(rng, (channels, channels), channels, dtype)


class TemporalSparseGraph(Module):
    """T-SGLM for one pyramid level; prev frame is source, current is dst."""

    def __init__(self, rng, channels, tau=0.25, k=100, dtype=np.float32):
        self.weights = TemporalGraphWeights(rng, channels, dtype=dtype)
        self.tau = tau
        self.k = k

    def __call__(self, prev_level, curr_level):
        if prev_level.shape != curr_level.shape:
            raise ValueError(
                f"shape mismatch: prev {prev_level.shape} vs curr {curr_level.shape}"
            )
        b, c, h, w = prev_level.shape
        n = h * w
        items = []
        graphs = []
        for i in range(b):
            prev_i = T.narrow(prev_level, 0, i, 1)
            curr_i = T.narrow(curr_level, 0, i, 1)
            prev_nodes = NodeSet.from_map(_to_nodes(prev_i, c, n), "frame_prev", h, w)
            curr_nodes = NodeSet.from_map(_to_nodes(curr_i, c, n), "frame_curr", h, w)
            w_ = self.weights
            raw, gatem = score_dense(prev_nodes, curr_nodes, w_.wq, w_.wk)
            cfg = GraphConfig(tau=self.tau, k=min(self.k, n), d_embed=c)
            graph = prune(raw, gatem, cfg)
            out_nodes = aggregate(
                graph, raw, prev_nodes.feats, curr_nodes.feats, w_.wv, w_.wo
            )
            items.append(T.reshape(T.transpose(out_nodes, (1, 0)), (1, c, h, w)))
            graphs.append(graph)
        out = T.concat(items, axis=0) if b > 1 else items[0]
        return out, graphs


def _to_nodes(fmap, c, n):
    return T.transpose(T.reshape(fmap, (c, n)), (1, 0))


class TemporalStarBlock(Module):
    """Two-frame star block with a skip connection on the current frame.

    concat -> 3x3 conv (2C->C) -> two parallel 1x1 expansions (C->4C),
    relu-gated elementwise product, 1x1 decode (4C->C), 3x3 conv, + curr.
    """

    EXPANSION = 4

    def __init__(self, rng, channels, dtype=np.float32):
        c = channels
        self.conv_in = Conv2d(rng, 2 * c, c, 3, dtype=dtype)
        self.f1 = Conv2d(rng, c, self.EXPANSION * c, 1, dtype=dtype)
        self.f2 = Conv2d(rng, c, self.EXPANSION * c, 1, dtype=dtype)
        self.decode = Conv2d(rng, self.EXPANSION * c, c, 1, dtype=dtype)
        self.conv_out = Conv2d(rng, c, c, 3, dtype=dtype)

    def __call__(self, prev_level, curr_level):
        if prev_level.shape != curr_level.shape:
            raise ValueError(
                f"shape mismatch: prev {prev_level.shape} vs curr {curr_level.shape}"
            )
        x = self.conv_in(T.concat([prev_level, curr_level], axis=1))
        m = T.relu(self.f1(x)) * self.f2(x)
        return self.conv_out(self.decode(m)) + curr_level


class HybridTemporal(Module):
    """Per-level T-SGLM + TSB, combined by sum and a 1x1 projection."""

    def __init__(self, rng, level_channels, tau=0.25, k=100, dtype=np.float32):
        self.tsglm = [
            TemporalSparseGraph(rng, c, tau=tau, k=k, dtype=dtype)
            for c in level_channels
        ]
        self.tsb = [TemporalStarBlock(rng, c, dtype=dtype) for c in level_channels]
        self.combine = [Conv2d(rng, c, c, 1, dtype=dtype) for c in level_channels]

    def __call__(self, prev_pyramid, curr_pyramid):
        outs = []
        graphs = []
        for li, (p, c) in enumerate(
            zip(prev_pyramid.levels(), curr_pyramid.levels())
        ):
            t_out, g = self.tsglm[li](p, c)
            s_out = self.tsb[li](p, c)
            outs.append(self.combine[li](t_out + s_out))
            graphs.extend(g)
        return outs, graphs
