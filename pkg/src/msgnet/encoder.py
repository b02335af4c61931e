"""Shared-parameter image encoder producing a three-level feature pyramid.

One parameter set encodes RGB and thermal frames at both timesteps;
single-channel thermal input is replicated to three channels before the
stem so sharing is structural rather than copied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    """Three multi-scale maps at strides 8, 16 and 32."""

    p2: Tensor  # [B, C, H/8, W/8]
    p3: Tensor  # [B, 2C, H/16, W/16]
    p4: Tensor = None  # [B, 4C, H/32, W/32]

    def levels(self):
        return [lvl for lvl in (self.p2, self.p3, self.p4) if lvl is not None]

    @property
    def batch(self):
        return self.p2.shape[0]


class Encoder(Module):
    """Stem of three stride-2 convs to stride 8, then two stride-2 stages."""

    def __init__(self, rng, base_channels=16, dtype=np.float32):
        c = base_channels
        self.base_channels = c
        self.stem1 = Conv2d(rng, 3, c, 3, stride=2, dtype=dtype)
        self.stem2 = Conv2d(rng, c, c, 3, stride=2, dtype=dtype)
        self.stem3 = Conv2d(rng, c, c, 3, stride=2, dtype=dtype)
        self.down3 = Conv2d(rng, c, 2 * c, 3, stride=2, dtype=dtype)
        self.down4 = Conv2d(rng, 2 * c, 4 * c, 3, stride=2, dtype=dtype)

    def level_channels(self):
        c = self.base_channels
        return [c, 2 * c, 4 * c]

    def __call__(self, image):
        b, ch, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"image extents must divide 32, got {h}x{w}")
        if ch == 1:
            image = T.concat([image, image, image], axis=1)
        elif ch != 3:
            raise ValueError(f"expected 1 or 3 channels, got {ch}")
        x = T.relu(self.stem1(image))
        x = T.relu(self.stem2(x))
        p2 = T.relu(self.stem3(x))
        p3 = T.relu(self.down3(p2))
        p4 = T.relu(self.down4(p3))
        return FeaturePyramid(p2=p2, p3=p3, p4=p4)
