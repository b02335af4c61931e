"""Spatial fusion: crop/scatter geometry and degenerate-weight identities."""

import numpy as np

from msgnet.apl import make_crop_rect
from msgnet.encoder import FeaturePyramid
from msgnet.ssglm import SpatialFusion
from msgnet.tensor import Tensor


def _pyramid(rng, b, c, hw):
    return FeaturePyramid(
        p2=Tensor(rng.standard_normal((b, c, hw, hw)).astype(np.float32)),
        p3=Tensor(rng.standard_normal((b, 2 * c, hw // 2, hw // 2)).astype(np.float32)),
        p4=Tensor(rng.standard_normal((b, 4 * c, hw // 4, hw // 4)).astype(np.float32)),
    )


class TestSpatialFusion:
    def test_shapes_preserved_and_graph_count(self):
        rng = np.random.default_rng(0)
        fusion = SpatialFusion(rng, [4, 8, 16])
        rgb = _pyramid(rng, 2, 4, 8)
        th = _pyramid(rng, 2, 4, 4)
        out = fusion.fuse(rgb, th)
        for lvl, ref in zip(out.fused.levels(), rgb.levels()):
            assert lvl.shape == ref.shape
        assert len(out.graphs) == 2 * 3  # batch x levels
        assert len(out.decisions) == 2
        assert out.lam.shape == (2,)

    def test_zero_output_projection_is_identity(self):
        """With Wo = 0 the thermal messages vanish and fusion must return
        the RGB pyramid bitwise (residual injection, exact crop forward)."""
        rng = np.random.default_rng(1)
        fusion = SpatialFusion(rng, [4, 8, 16])
        for lw in fusion.levels:
            lw.wo.data = np.zeros_like(lw.wo.data)
        rgb = _pyramid(rng, 1, 4, 8)
        th = _pyramid(rng, 1, 4, 4)
        out = fusion.fuse(rgb, th)
        for lvl, ref in zip(out.fused.levels(), rgb.levels()):
            np.testing.assert_array_equal(lvl.data, ref.data)

    def test_outside_crop_untouched(self):
        rng = np.random.default_rng(2)
        fusion = SpatialFusion(rng, [4, 8, 16])
        rgb = _pyramid(rng, 1, 4, 8)
        th = _pyramid(rng, 1, 4, 4)
        out = fusion.fuse(rgb, th)
        gamma = out.decisions[0].gamma
        for lvl, ref in zip(out.fused.levels(), rgb.levels()):
            top, left, h, w = make_crop_rect(gamma, ref.shape[2], ref.shape[3])
            mask = np.ones(ref.shape, dtype=bool)
            mask[:, :, top : top + h, left : left + w] = False
            np.testing.assert_array_equal(lvl.data[mask], ref.data[mask])

    def test_in_degree_respects_k(self):
        rng = np.random.default_rng(3)
        fusion = SpatialFusion(rng, [4, 8, 16], tau=0.0, k=3)
        rgb = _pyramid(rng, 1, 4, 8)
        th = _pyramid(rng, 1, 4, 4)
        out = fusion.fuse(rgb, th)
        for g in out.graphs:
            if g.num_edges:
                assert np.bincount(g.dst).max() <= 3
