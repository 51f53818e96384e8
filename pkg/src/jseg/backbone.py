"""Small trainable convolutional feature extractor.

Four stages of {3x3 conv, ReLU, stride-2 conv, ReLU} produce maps at
strides 2, 4, 8 and 16.  The stride-8 stage output additionally passes
through a channel-reduction conv to the matching width; each branch gets
its own reduction unless ``shared_reduction`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config
from .errors import ShapeError
from .ops import conv2d
from .tensor import Tensor


@dataclass
class FeatureMap:
    level: int
    stride: int
    tensor: Tensor


@dataclass
class BackboneFeatures:
    """Per-frame features: the four pyramid maps plus branch-specific matching maps."""

    maps: list[FeatureMap]     # levels 1..4; level 3 is the transduction matching map
    matching_ind: Tensor       # induction-branch reduction of the stride-8 stage

    @property
    def matching_tra(self) -> Tensor:
        return self.maps[2].tensor


def kaiming_conv(rng: np.random.Generator, ksize: int, c_in: int, c_out: int) -> Tensor:
    fan_in = ksize * ksize * c_in
    data = rng.standard_normal((ksize, ksize, c_in, c_out)) * np.sqrt(2.0 / fan_in)
    return Tensor(data, tracked=True)


def zero_bias(c_out: int) -> Tensor:
    return Tensor(np.zeros(c_out), tracked=True)


def init_backbone(rng: np.random.Generator, cfg: Config) -> dict[str, Tensor]:
    widths = cfg.backbone_widths
    params: dict[str, Tensor] = {}
    c_prev = 3
    for stage, width in enumerate(widths, start=1):
        params[f"backbone.s{stage}.a.w"] = kaiming_conv(rng, 3, c_prev, width)
        params[f"backbone.s{stage}.a.b"] = zero_bias(width)
        params[f"backbone.s{stage}.d.w"] = kaiming_conv(rng, 3, width, width)
        params[f"backbone.s{stage}.d.b"] = zero_bias(width)
        c_prev = width
    params["backbone.reduce_tra.w"] = kaiming_conv(rng, 3, widths[2], cfg.matching_channels)
    params["backbone.reduce_tra.b"] = zero_bias(cfg.matching_channels)
    if not cfg.shared_reduction:
        params["backbone.reduce_ind.w"] = kaiming_conv(rng, 3, widths[2], cfg.matching_channels)
        params["backbone.reduce_ind.b"] = zero_bias(cfg.matching_channels)
    return params


def extract(image: Tensor, params: dict[str, Tensor], cfg: Config) -> BackboneFeatures:
    """Compute the feature pyramid of one image (h and w multiples of 16)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected h x w x 3 image, got {image.shape}")
    if image.shape[0] % 16 or image.shape[1] % 16:
        raise ShapeError(f"image sides must be multiples of 16, got {image.shape}")
    h = image
    maps = []
    for stage in range(1, 5):
        h = T.relu(conv2d(h, params[f"backbone.s{stage}.a.w"]) + params[f"backbone.s{stage}.a.b"])
        h = T.relu(
            conv2d(h, params[f"backbone.s{stage}.d.w"], stride=2)
            + params[f"backbone.s{stage}.d.b"]
        )
        maps.append(FeatureMap(level=stage, stride=2 ** stage, tensor=h))

    stage3 = maps[2].tensor
    reduced_tra = conv2d(stage3, params["backbone.reduce_tra.w"]) + params["backbone.reduce_tra.b"]
    if cfg.shared_reduction:
        reduced_ind = reduced_tra
    else:
        reduced_ind = (
            conv2d(stage3, params["backbone.reduce_ind.w"]) + params["backbone.reduce_ind.b"]
        )
    maps[2] = FeatureMap(level=3, stride=8, tensor=reduced_tra)
    return BackboneFeatures(maps=maps, matching_ind=reduced_ind)
