"""Sparse bipartite graph attention shared by the spatial and temporal paths.

Pipeline: dense pairwise scoring of source vs destination patches,
sigmoid gating, threshold pruning, per-destination top-K selection, then
softmax-weighted message aggregation over the surviving edges with a
residual injection into the destination features.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GraphConfig:
    tau: float = 0.25  # prune threshold on sigmoid gates
    k: int = 25  # max in-degree per destination node
    d_embed: int = 16

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0,1], got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class NodeSet:
    """Rows of a flattened feature map; one node per grid position."""

    feats: Tensor  # [N, d]
    origin: str  # rgb | thermal | frame_prev | frame_curr
    spatial_index: np.ndarray  # [N, 2] (row, col) in the source map

    @classmethod
    def from_map(cls, fmap_2d, origin, h, w):
        rows, cols = np.divmod(np.arange(h * w), w)
        return cls(
            feats=fmap_2d, origin=origin, spatial_index=np.stack([rows, cols], axis=1)
        )


@dataclass
class SparseBipartiteGraph:
    """Edge list sorted by (dst, src); gates all >= config.tau."""

    dst: np.ndarray  # [E] destination node ids
    src: np.ndarray  # [E] source node ids
    gate: np.ndarray  # [E] sigmoid scores in [0,1]
    raw: np.ndarray  # [E] scaled dot-product scores
    n_src: int
    n_dst: int
    config: GraphConfig = field(default_factory=GraphConfig)

    @property
    def num_edges(self):
        return len(self.dst)

    def to_csv(self):
        buf = io.StringIO()
        buf.write("dst,src,gate,raw_score\n")
        for d, s, g, r in zip(self.dst, self.src, self.gate, self.raw):
            buf.write(f"{d},{s},{g!r},{r!r}\n")
        return buf.getvalue()


def score_dense(src, dst, wq, wk):
    """Scaled dot-product scores of every (dst, src) pair plus gates.

    raw[i, j] = (q_i . k_j) / sqrt(d_embed) with q from dst and k from
    src; gates are sigmoid(raw) so a fixed threshold in [0,1] is
    meaningful regardless of node count.
    """
    if wq.shape[1] != wk.shape[1]:
        raise ValueError(
            f"embedding width mismatch: Wq {wq.shape} vs Wk {wk.shape}"
        )
    q = T.matmul(dst.feats, wq)  # [Ndst, d_embed]
    k = T.matmul(src.feats, wk)  # [Nsrc, d_embed]
    d_embed = wq.shape[1]
    raw = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(d_embed))
    gate = T.sigmoid(raw)
    return raw, gate


def prune(raw, gate, config):
    """Threshold on gates first, then keep the top-K gates per destination.

    Ties broken toward the lower source id. The selection is a discrete,
    non-differentiable step; gradients downstream treat the kept set as
    constant.
    """
    gates = gate.data if isinstance(gate, Tensor) else np.asarray(gate)
    raws = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    n_dst, n_src = gates.shape
    dst_ids, src_ids = [], []
    for i in range(n_dst):
        keep = np.nonzero(gates[i] >= config.tau)[0]
        if len(keep) > config.k:
            # sort by (-gate, src id): highest gates first, low id on ties
            order = np.lexsort((keep, -gates[i, keep]))
            keep = np.sort(keep[order[: config.k]])
        dst_ids.append(np.full(len(keep), i, dtype=np.int64))
        src_ids.append(keep.astype(np.int64))
    dst_arr = np.concatenate(dst_ids) if dst_ids else np.zeros(0, np.int64)
    src_arr = np.concatenate(src_ids) if src_ids else np.zeros(0, np.int64)
    return SparseBipartiteGraph(
        dst=dst_arr,
        src=src_arr,
        gate=gates[dst_arr, src_arr],
        raw=raws[dst_arr, src_arr],
        n_src=n_src,
        n_dst=n_dst,
        config=config,
    )


def aggregate(graph, raw, src_vals, dst_feats, wv, wo):
    """Softmax-attention message passing over the kept edges.

    For each destination with surviving edges, messages are the softmax
    (over raw scores) weighted sum of projected source values, injected
    residually: out = dst + Wo(message). Destinations with no surviving
    edges pass through unchanged (Wv/Wo carry no bias).
    """
    n_dst = graph.n_dst
    if graph.num_edges == 0:
        return dst_feats
    v = T.matmul(src_vals, wv)  # [Nsrc, d]
    raw_e = T.gather2d(raw, graph.dst, graph.src)  # [E]
    weights = T.segment_softmax(raw_e, graph.dst, n_dst)  # [E]
    v_e = T.gather_rows(v, graph.src)  # [E, d]
    message = T.segment_weighted_sum(weights, v_e, graph.dst, n_dst)
    return dst_feats + T.matmul(message, wo)


def edge_cost(graph, d=None):
    """Multiply-accumulate counts of the aggregation stage, sparse vs dense.

    Also reports the stage-only counts (excluding the shared projection
    cost) which is where the sparsification saving lives.
    """
    if d is None:
        d = graph.config.d_embed
    proj = (graph.n_src + graph.n_dst) * d * d * 2  # Wv on src, Wo on dst side
    stage_sparse = graph.num_edges * d * 2
    stage_dense = graph.n_src * graph.n_dst * d * 2
    return {
        "macs_sparse": stage_sparse + proj,
        "macs_dense": stage_dense + proj,
        "stage_sparse": stage_sparse,
        "stage_dense": stage_dense,
    }


def dense_attention_reference(raw, src_vals, dst_feats, wv, wo):
    """Brute-force full-softmax attention oracle (pure numpy, no pruning)."""
    raw = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    sv = src_vals.data if isinstance(src_vals, Tensor) else np.asarray(src_vals)
    df = dst_feats.data if isinstance(dst_feats, Tensor) else np.asarray(dst_feats)
    wv = wv.data if isinstance(wv, Tensor) else np.asarray(wv)
    wo = wo.data if isinstance(wo, Tensor) else np.asarray(wo)
    z = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(z)
    att = e / e.sum(axis=1, keepdims=True)
    return df + (att @ (sv @ wv)) @ wo


def sparse_forward_reference(graph, raw_full, src_vals, dst_feats, wv, wo):
    """Forward-only sparse aggregation on plain arrays (benchmark kernel)."""
    if graph.num_edges == 0:
        return dst_feats.copy()
    v = src_vals @ wv
    raw_e = raw_full[graph.dst, graph.src]
    mx = np.full(graph.n_dst, -np.inf, dtype=raw_e.dtype)
    np.maximum.at(mx, graph.dst, raw_e)
    e = np.exp(raw_e - mx[graph.dst])
    tot = np.zeros(graph.n_dst, dtype=raw_e.dtype)
    np.add.at(tot, graph.dst, e)
    w = e / tot[graph.dst]
    msg = np.zeros((graph.n_dst, v.shape[1]), dtype=v.dtype)
    np.add.at(msg, graph.dst, w[:, None] * v[graph.src])
    return dst_feats + msg @ wo
