"""Sparse bipartite graph: scoring, pruning rules, aggregation oracle."""

import numpy as np
import pytest

from msgnet.sparsegraph import (
    GraphConfig,
    NodeSet,
    SparseBipartiteGraph,
    aggregate,
    dense_attention_reference,
    edge_cost,
    prune,
    score_dense,
    sparse_forward_reference,
)
from msgnet.tensor import Tensor


def _random_instance(rng, n_src, n_dst, d):
    src = NodeSet(Tensor(rng.standard_normal((n_src, d))), "thermal", None)
    dst = NodeSet(Tensor(rng.standard_normal((n_dst, d))), "rgb", None)
    wq = Tensor(rng.standard_normal((d, d)) / np.sqrt(d))
    wk = Tensor(rng.standard_normal((d, d)) / np.sqrt(d))
    wv = Tensor(rng.standard_normal((d, d)) / np.sqrt(d))
    wo = Tensor(rng.standard_normal((d, d)) / np.sqrt(d))
    return src, dst, wq, wk, wv, wo


class TestScoreDense:
    def test_identical_unit_vectors_give_known_gate(self):
        d = 4
        feats = np.zeros((3, d))
        feats[:, 0] = 1.0  # identical unit vectors
        nodes = NodeSet(Tensor(feats), "rgb", None)
        eye = Tensor(np.eye(d))
        raw, gate = score_dense(nodes, nodes, eye, eye)
        np.testing.assert_allclose(raw.data, 0.5)  # 1/sqrt(4)
        np.testing.assert_allclose(gate.data, 1 / (1 + np.exp(-0.5)))

    def test_embedding_width_mismatch_raises(self):
        nodes = NodeSet(Tensor(np.zeros((2, 3))), "rgb", None)
        with pytest.raises(ValueError, match="width mismatch"):
            score_dense(nodes, nodes, Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))))


class TestPrune:
    def test_threshold_drops_low_gates(self):
        raw = np.array([[2.0, -2.0], [-2.0, 2.0]])
        gate = 1 / (1 + np.exp(-raw))
        g = prune(raw, gate, GraphConfig(tau=0.5, k=5))
        assert sorted(zip(g.dst, g.src)) == [(0, 0), (1, 1)]

    def test_topk_caps_in_degree(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((4, 10))
        gate = 1 / (1 + np.exp(-raw))
        g = prune(raw, gate, GraphConfig(tau=0.0, k=3))
        counts = np.bincount(g.dst, minlength=4)
        assert np.all(counts == 3)
        # kept gates per dst are the 3 largest
        for i in range(4):
            kept = np.sort(gate[i, g.src[g.dst == i]])
            np.testing.assert_allclose(kept, np.sort(gate[i])[-3:])

    def test_ties_broken_toward_lower_source_id(self):
        raw = np.zeros((1, 5))  # all gates identical
        gate = np.full((1, 5), 0.5)
        g = prune(raw, gate, GraphConfig(tau=0.0, k=2))
        np.testing.assert_array_equal(g.src, [0, 1])

    def test_k_one_is_argmax(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((6, 8))
        gate = 1 / (1 + np.exp(-raw))
        g = prune(raw, gate, GraphConfig(tau=0.0, k=1))
        np.testing.assert_array_equal(g.src, gate.argmax(axis=1))

    def test_tau_subset_monotonicity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            raw = rng.standard_normal((8, 8)) * 2
            gate = 1 / (1 + np.exp(-raw))
            cfg_lo = GraphConfig(tau=0.25, k=4)
            cfg_hi = GraphConfig(tau=0.75, k=4)
            lo = set(zip(*map(tuple, (prune(raw, gate, cfg_lo).dst,
                                      prune(raw, gate, cfg_lo).src))))
            hi_g = prune(raw, gate, cfg_hi)
            hi = set(zip(hi_g.dst.tolist(), hi_g.src.tolist()))
            lo_g = prune(raw, gate, cfg_lo)
            lo = set(zip(lo_g.dst.tolist(), lo_g.src.tolist()))
            assert hi <= lo
            assert np.all(np.bincount(hi_g.dst, minlength=8) <= 4)

    def test_edges_sorted_by_dst_then_src(self):
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((5, 5))
        gate = 1 / (1 + np.exp(-raw))
        g = prune(raw, gate, GraphConfig(tau=0.0, k=3))
        order = np.lexsort((g.src, g.dst))
        np.testing.assert_array_equal(order, np.arange(g.num_edges))

    def test_config_validation(self):
        with pytest.raises(ValueError, match="tau"):
            GraphConfig(tau=1.5)
        with pytest.raises(ValueError, match="k"):
            GraphConfig(k=0)


class TestAggregate:
    def test_tau_zero_full_k_matches_dense_reference(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            n = 12
            src, dst, wq, wk, wv, wo = _random_instance(rng, n, n, 6)
            raw, gate = score_dense(src, dst, wq, wk)
            g = prune(raw, gate, GraphConfig(tau=0.0, k=n, d_embed=6))
            out = aggregate(g, raw, src.feats, dst.feats, wv, wo)
            ref = dense_attention_reference(raw, src.feats, dst.feats, wv, wo)
            assert np.abs(out.data - ref).max() <= 1e-6

    def test_zero_edges_is_exact_identity(self):
        g = SparseBipartiteGraph(
            dst=np.zeros(0, np.int64),
            src=np.zeros(0, np.int64),
            gate=np.zeros(0),
            raw=np.zeros(0),
            n_src=3,
            n_dst=3,
        )
        dst_feats = Tensor(np.random.default_rng(5).standard_normal((3, 4)))
        out = aggregate(g, Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 4))),
                        dst_feats, Tensor(np.eye(4)), Tensor(np.eye(4)))
        assert out is dst_feats

    def test_sparse_forward_reference_matches_tensor_path(self):
        rng = np.random.default_rng(6)
        src, dst, wq, wk, wv, wo = _random_instance(rng, 10, 8, 5)
        raw, gate = score_dense(src, dst, wq, wk)
        g = prune(raw, gate, GraphConfig(tau=0.3, k=4, d_embed=5))
        out = aggregate(g, raw, src.feats, dst.feats, wv, wo)
        ref = sparse_forward_reference(
            g, raw.data, src.feats.data, dst.feats.data, wv.data, wo.data
        )
        np.testing.assert_allclose(out.data, ref, atol=1e-10)


class TestBookkeeping:
    def test_to_csv_layout(self):
        rng = np.random.default_rng(7)
        raw = rng.standard_normal((3, 3))
        gate = 1 / (1 + np.exp(-raw))
        g = prune(raw, gate, GraphConfig(tau=0.0, k=2))
        lines = g.to_csv().strip().split("\n")
        assert lines[0] == "dst,src,gate,raw_score"
        assert len(lines) == g.num_edges + 1

    def test_edge_cost_arithmetic(self):
        g = SparseBipartiteGraph(
            dst=np.zeros(30, np.int64),
            src=np.zeros(30, np.int64),
            gate=np.zeros(30),
            raw=np.zeros(30),
            n_src=100,
            n_dst=50,
            config=GraphConfig(d_embed=16),
        )
        cost = edge_cost(g)
        assert cost["stage_sparse"] == 30 * 16 * 2
        assert cost["stage_dense"] == 100 * 50 * 16 * 2
        proj = (100 + 50) * 16 * 16 * 2
        assert cost["macs_sparse"] == cost["stage_sparse"] + proj
        assert cost["macs_dense"] == cost["stage_dense"] + proj

    def test_from_map_spatial_index(self):
        ns = NodeSet.from_map(Tensor(np.zeros((6, 2))), "rgb", 2, 3)
        np.testing.assert_array_equal(
            ns.spatial_index, [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]
        )
