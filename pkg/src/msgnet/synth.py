"""Deterministic synthetic misaligned RGB/thermal frame pairs.

Each sample is a two-frame scene of moving geometric shapes over a
value-noise background. The RGB frames see the whole canvas, dimmed by
an illumination factor; the thermal frames are a centered sub-window of
the scene (true scale factor s) re-rendered in heat intensities at a
lower resolution, independent of illumination. Annotations live in RGB
pixel coordinates of the current frame only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .apl import GAMMA_BINS

SHAPES = ("circle", "square", "triangle")


@dataclass
class ObjectSpec:
    shape: str
    class_id: int
    center: tuple  # (cx, cy) at frame t, RGB pixels
    size: float
    velocity: tuple  # (vx, vy) pixels per frame
    rgb_color: tuple  # three floats in [0,1]
    heat: float  # thermal intensity in [0,1]


@dataclass
class SceneSpec:
    seed: int
    canvas: tuple = (64, 64)
    objects: list = field(default_factory=list)
    true_scale: float = 1.0
    thermal_resolution: tuple = (32, 32)
    illumination: float = 1.0


@dataclass
class SamplePair:
    rgb_prev: np.ndarray  # [3,H,W] float32 in [0,1]
    rgb_curr: np.ndarray
    th_prev: np.ndarray  # [1,Ht,Wt]
    th_curr: np.ndarray
    boxes: list  # [[cx,cy,w,h], ...] at frame t
    classes: list
    true_scale: float


def _value_noise(rng, h, w, cells=8, lo=0.0, hi=1.0):
    """Seeded coarse noise grid, bilinearly upsampled to h x w."""
    grid = rng.uniform(lo, hi, size=(cells, cells))
    return _bilinear_np(grid, h, w)


def _bilinear_np(img, out_h, out_w):
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (
        img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + img[np.ix_(y0, x1)] * (1 - wy) * wx
        + img[np.ix_(y1, x0)] * wy * (1 - wx)
        + img[np.ix_(y1, x1)] * wy * wx
    )


def _shape_mask(shape, cx, cy, size, h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys + 0.5
    xs = xs + 0.5
    half = size / 2.0
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
    if shape == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if shape == "triangle":
        # upward-pointing, inscribed in the size x size box
        rel = (ys - (cy - half)) / size  # 0 at apex row, 1 at base
        inside_y = (rel >= 0) & (rel <= 1)
        return inside_y & (np.abs(xs - cx) <= rel * half)
    raise ValueError(f"unknown shape {shape!r}")


def _scene_rng(spec, salt):
    base = list(spec.seed) if isinstance(spec.seed, (tuple, list)) else [spec.seed]
    return np.random.default_rng(base + [salt])


def render_heat_canvas(spec, frame):
    """Full-resolution heat rendering of one frame (t or t-1)."""
    h, w = spec.canvas
    rng = _scene_rng(spec, 7)
    heat = _value_noise(rng, h, w, lo=0.05, hi=0.2)
    for obj in spec.objects:
        cx, cy = _position(obj, frame)
        mask = _shape_mask(obj.shape, cx, cy, obj.size, h, w)
        heat[mask] = obj.heat
    return heat


def render_rgb_canvas(spec, frame):
    h, w = spec.canvas
    rng = _scene_rng(spec, 13)
    base = _value_noise(rng, h, w, lo=0.2, hi=0.5)
    tint = rng.uniform(0.8, 1.0, size=3)
    rgb = np.stack([base * t for t in tint])
    for obj in spec.objects:
        cx, cy = _position(obj, frame)
        mask = _shape_mask(obj.shape, cx, cy, obj.size, h, w)
        for ch in range(3):
            rgb[ch][mask] = obj.rgb_color[ch]
    return np.clip(rgb * spec.illumination, 0.0, 1.0)


def _position(obj, frame):
    cx, cy = obj.center
    if frame == "prev":
        return cx - obj.velocity[0], cy - obj.velocity[1]
    return cx, cy


def render_thermal(spec, frame):
    """Centered s-crop of the heat canvas at thermal resolution."""
    h, w = spec.canvas
    s = spec.true_scale
    heat = render_heat_canvas(spec, frame)
    ch = max(1, int(round(s * h)))
    cw = max(1, int(round(s * w)))
    top, left = (h - ch) // 2, (w - cw) // 2
    window = heat[top : top + ch, left : left + cw]
    ht, wt = spec.thermal_resolution
    return _bilinear_np(window, ht, wt)[None].astype(np.float32)


def render(spec):
    """Deterministic SamplePair for a scene specification."""
    h, w = spec.canvas
    for obj in spec.objects:
        for frame in ("prev", "curr"):
            cx, cy = _position(obj, frame)
            half = obj.size / 2
            if cx - half < 0 or cy - half < 0 or cx + half > w or cy + half > h:
                raise ValueError(
                    f"object {obj.shape} at {(cx, cy)} size {obj.size} "
                    f"leaves the {h}x{w} canvas at frame {frame}"
                )
    boxes = [[obj.center[0], obj.center[1], obj.size, obj.size] for obj in spec.objects]
    classes = [obj.class_id for obj in spec.objects]
    return SamplePair(
        rgb_prev=render_rgb_canvas(spec, "prev").astype(np.float32),
        rgb_curr=render_rgb_canvas(spec, "curr").astype(np.float32),
        th_prev=render_thermal(spec, "prev"),
        th_curr=render_thermal(spec, "curr"),
        boxes=boxes,
        classes=classes,
        true_scale=spec.true_scale,
    )


def random_scene(seed, canvas=(64, 64), thermal_resolution=(32, 32), max_objects=2):
    """Scene with 1..max_objects shapes, fully inside at both frames."""
    rng = np.random.default_rng(seed)
    h, w = canvas
    n_obj = int(rng.integers(1, max_objects + 1))
    scale = float(rng.choice(GAMMA_BINS))
    illumination = float(rng.uniform(0.4, 1.0))
    objects = []
    for i in range(n_obj):
        shape_idx = int(rng.integers(0, len(SHAPES)))
        size = float(rng.uniform(h * 0.2, h * 0.35))
        vx = float(rng.uniform(-2.5, 2.5))
        vy = float(rng.uniform(-2.5, 2.5))
        margin = size / 2 + max(abs(vx), abs(vy)) + 1
        cx = float(rng.uniform(margin, w - margin))
        cy = float(rng.uniform(margin, h - margin))
        objects.append(
            ObjectSpec(
                shape=SHAPES[shape_idx],
                class_id=shape_idx,
                center=(cx, cy),
                size=size,
                velocity=(vx, vy),
                rgb_color=tuple(rng.uniform(0.6, 1.0, size=3)),
                heat=float(rng.uniform(0.7, 1.0)),
            )
        )
    seed_key = tuple(seed) if isinstance(seed, (list, tuple)) else int(seed)
    return SceneSpec(
        seed=seed_key,
        canvas=canvas,
        objects=objects,
        true_scale=scale,
        thermal_resolution=thermal_resolution,
        illumination=illumination,
    )


# ---------------------------------------------------------------------------
# on-disk dataset


def _write_pnm(path, arr, magic):
    """arr: [C,H,W] float in [0,1]; P6 for RGB, P5 for gray."""
    c, h, w = arr.shape
    data = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def _read_pnm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        assert maxval == 255
        c = 3 if magic == b"P6" else 1
        data = np.frombuffer(f.read(h * w * c), dtype=np.uint8)
    return (data.reshape(h, w, c).transpose(2, 0, 1) / 255.0).astype(np.float32)


def save_pair(root, sample_id, pair):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _write_pnm(root / f"{sample_id}_rgb_t.ppm", pair.rgb_curr, "P6")
    _write_pnm(root / f"{sample_id}_rgb_tm1.ppm", pair.rgb_prev, "P6")
    _write_pnm(root / f"{sample_id}_th_t.pgm", pair.th_curr, "P5")
    _write_pnm(root / f"{sample_id}_th_tm1.pgm", pair.th_prev, "P5")
    ann = {
        "boxes": [[float(v) for v in b] for b in pair.boxes],
        "classes": [int(c) for c in pair.classes],
        "true_scale": float(pair.true_scale),
    }
    with open(root / f"{sample_id}_ann.json", "w") as f:
        json.dump(ann, f, sort_keys=True)
        f.write("\n")


def load_pair(root, sample_id):
    root = Path(root)
    with open(root / f"{sample_id}_ann.json") as f:
        ann = json.load(f)
    return SamplePair(
        rgb_prev=_read_pnm(root / f"{sample_id}_rgb_tm1.ppm"),
        rgb_curr=_read_pnm(root / f"{sample_id}_rgb_t.ppm"),
        th_prev=_read_pnm(root / f"{sample_id}_th_tm1.pgm"),
        th_curr=_read_pnm(root / f"{sample_id}_th_t.pgm"),
        boxes=ann["boxes"],
        classes=ann["classes"],
        true_scale=ann["true_scale"],
    )


def list_ids(root):
    root = Path(root)
    return sorted(p.name[: -len("_ann.json")] for p in root.glob("*_ann.json"))


def make_dataset(n, seed, split, out_root, canvas=(64, 64), max_objects=2):
    """Write n deterministic sample pairs under out_root/split.

    Scale factors are drawn uniformly from the five crop bins; the two
    splits use disjoint seed streams.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    split_idx = {"train": 0, "val": 1}[split]
    out = Path(out_root) / split
    for i in range(n):
        spec = random_scene(
            [seed, split_idx, i], canvas=canvas, max_objects=max_objects
        )
        pair = render(spec)
        save_pair(out, f"{i:05d}", pair)
    return out
