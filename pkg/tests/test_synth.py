"""Synthetic data generator: determinism, physics of the two views, I/O."""

import dataclasses

import numpy as np
import pytest

from msgnet.apl import GAMMA_BINS
from msgnet.synth import (
    ObjectSpec,
    SceneSpec,
    _bilinear_np,
    list_ids,
    load_pair,
    make_dataset,
    random_scene,
    render,
    render_heat_canvas,
    save_pair,
)


def _spec(seed=0, **kw):
    obj = ObjectSpec(
        shape="square",
        class_id=1,
        center=(30.0, 28.0),
        size=14.0,
        velocity=(2.0, -1.0),
        rgb_color=(0.9, 0.7, 0.6),
        heat=0.95,
    )
    return SceneSpec(seed=seed, objects=[obj], **kw)


class TestRendering:
    def test_bitwise_deterministic(self):
        a = render(random_scene(42))
        b = render(random_scene(42))
        for f in ("rgb_prev", "rgb_curr", "th_prev", "th_curr"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
        assert a.boxes == b.boxes and a.true_scale == b.true_scale

    def test_shapes_and_range(self):
        pair = render(random_scene(1))
        assert pair.rgb_curr.shape == (3, 64, 64)
        assert pair.th_curr.shape == (1, 32, 32)
        for f in ("rgb_prev", "rgb_curr", "th_prev", "th_curr"):
            arr = getattr(pair, f)
            assert arr.dtype == np.float32
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_boxes_inside_canvas(self):
        for seed in range(30):
            pair = render(random_scene(seed))
            for cx, cy, w, h in pair.boxes:
                assert cx - w / 2 >= 0 and cx + w / 2 <= 64
                assert cy - h / 2 >= 0 and cy + h / 2 <= 64

    def test_thermal_ignores_illumination(self):
        bright = render(_spec(illumination=1.0))
        dark = render(_spec(illumination=0.4))
        np.testing.assert_array_equal(bright.th_curr, dark.th_curr)
        assert np.abs(bright.rgb_curr - dark.rgb_curr).max() > 0.1

    def test_full_scale_thermal_is_downsampled_heat(self):
        spec = _spec(true_scale=1.0)
        pair = render(spec)
        heat = render_heat_canvas(spec, "curr")
        np.testing.assert_allclose(
            pair.th_curr[0], _bilinear_np(heat, 32, 32), atol=1e-6
        )

    def test_smaller_scale_is_centered_window(self):
        spec = _spec(true_scale=0.4)
        pair = render(spec)
        heat = render_heat_canvas(spec, "curr")
        window = heat[19 : 19 + 26, 19 : 19 + 26]  # round(0.4*64)=26, (64-26)//2
        np.testing.assert_allclose(
            pair.th_curr[0], _bilinear_np(window, 32, 32), atol=1e-6
        )

    def test_prev_frame_is_position_minus_velocity(self):
        spec = _spec()
        moved = dataclasses.replace(
            spec,
            objects=[
                dataclasses.replace(
                    spec.objects[0], center=(28.0, 29.0), velocity=(0.0, 0.0)
                )
            ],
        )
        pair = render(spec)
        ref = render(moved)
        np.testing.assert_array_equal(pair.rgb_prev, ref.rgb_curr)

    def test_object_leaving_canvas_raises(self):
        bad = _spec()
        bad.objects[0].center = (62.0, 30.0)
        with pytest.raises(ValueError, match="leaves the"):
            render(bad)


class TestRandomScene:
    def test_scales_come_from_bins_roughly_uniform(self):
        scales = [random_scene([0, 0, i]).true_scale for i in range(500)]
        counts = {g: scales.count(g) / 500 for g in GAMMA_BINS}
        assert set(scales) <= set(GAMMA_BINS)
        for g, frac in counts.items():
            assert 0.15 <= frac <= 0.25, (g, frac)

    def test_object_count_bounds(self):
        for seed in range(20):
            spec = random_scene(seed, max_objects=2)
            assert 1 <= len(spec.objects) <= 2


class TestDatasetIO:
    def test_save_load_roundtrip(self, tmp_path):
        pair = render(random_scene(7))
        save_pair(tmp_path, "00000", pair)
        back = load_pair(tmp_path, "00000")
        # images survive 8-bit quantization within half a step
        for f in ("rgb_prev", "rgb_curr", "th_prev", "th_curr"):
            np.testing.assert_allclose(
                getattr(back, f), getattr(pair, f), atol=0.5 / 255 + 1e-7
            )
        assert back.boxes == pair.boxes
        assert back.classes == pair.classes
        assert back.true_scale == pair.true_scale

    def test_make_dataset_listing_and_disjoint_splits(self, tmp_path):
        make_dataset(3, 0, "train", tmp_path)
        make_dataset(2, 0, "val", tmp_path)
        assert list_ids(tmp_path / "train") == ["00000", "00001", "00002"]
        assert list_ids(tmp_path / "val") == ["00000", "00001"]
        a = load_pair(tmp_path / "train", "00000")
        b = load_pair(tmp_path / "val", "00000")
        assert np.abs(a.rgb_curr - b.rgb_curr).max() > 0

    def test_make_dataset_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError, match="n must be"):
            make_dataset(0, 0, "train", tmp_path)
