"""Toy four-stage backbone and the feature pyramid built on top of it.

The backbone stands in for a real hierarchical encoder: one 3x3 conv per
stage, downsampled by 2x2 average pooling, ReLU. Stage widths grow as
base_width * {1, 2, 4, 8} at strides {4, 8, 16, 32}.

The pyramid brings every stage to one shared width with 1x1 lateral convs,
adds a bilinearly upsampled copy of the already-built coarser level, and
finishes each level with a 3x3 grouped conv. Note the top-down term is the
finished coarser level (after its 3x3 conv), not the pre-conv sum.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ParamStore
from .tensor import Tensor

FPN_GROUPS = 4


@dataclass
class BackboneFeatures:
    c4: Tensor
    c8: Tensor
    c16: Tensor
    c32: Tensor


@dataclass
class FeaturePyramid:
    p4: Tensor
    p8: Tensor
    p16: Tensor
    p32: Tensor
    width: int

    def level(self, stride: int) -> Tensor:
        return {4: self.p4, 8: self.p8, 16: self.p16, 32: self.p32}[stride]


class ToyBackbone:
    def __init__(self, store: ParamStore, rng, base_width: int):
        self.base_width = base_width
        widths = [base_width * m for m in (1, 2, 4, 8)]
        ins = [3] + widths[:-1]
        self.convs = [
            Conv2d(store, f"backbone.stage{i + 1}", rng, c_in, c_out, 3)
            for i, (c_in, c_out) in enumerate(zip(ins, widths))
        ]

    def __call__(self, image: Tensor) -> BackboneFeatures:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"backbone expects [3, H, W], got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} must be a multiple of 32")
        feats = []
        x = image
        for i, conv in enumerate(self.convs):
            x = conv(x)
            x = T.avg_pool2d(x, 2)
            if i == 0:
                # first stage covers stride 4, so it pools twice
                x = T.avg_pool2d(x, 2)
            x = T.relu(x)
            feats.append(x)
        return BackboneFeatures(*feats)


class PyramidNeck:
    def __init__(self, store: ParamStore, rng, base_width: int, width: int):
        if width % FPN_GROUPS:
            raise ConfigError(f"pyramid width {width} not divisible by {FPN_GROUPS}")
        self.width = width
        in_widths = [base_width * m for m in (1, 2, 4, 8)]
        self.laterals = [
            Conv2d(store, f"fpn.lateral{s}", rng, c_in, width, 1)
            for s, c_in in zip((4, 8, 16, 32), in_widths)
        ]
        self.outputs = [
            Conv2d(store, f"fpn.out{s}", rng, width, width, 3, groups=FPN_GROUPS)
            for s in (4, 8, 16, 32)
        ]

    def __call__(self, feats: BackboneFeatures) -> FeaturePyramid:
        stages = [feats.c4, feats.c8, feats.c16, feats.c32]
        levels: list[Tensor] = [None] * 4
        for i in range(3, -1, -1):
            x = self.laterals[i](stages[i])
            if i < 3:
                up = T.resize_bilinear(levels[i + 1], x.shape[1], x.shape[2])
                x = x + up
            levels[i] = self.outputs[i](x)
        widths = {lv.shape[0] for lv in levels}
        if widths != {self.width}:
            raise ShapeError(f"pyramid widths diverged: {widths}")
        return FeaturePyramid(*levels, width=self.width)


class FeatureExtractor:
    """Backbone + pyramid as one image -> FeaturePyramid callable."""

    def __init__(self, store: ParamStore, rng, width: int):
        self.backbone = ToyBackbone(store, rng, width)
        self.neck = PyramidNeck(store, rng, width, width)

    def __call__(self, image: Tensor) -> FeaturePyramid:
        return self.neck(self.backbone(image))
