"""Label encoder heads, encoding disentanglement, and the segmentation decoder.

A shared stem downsamples a (soft) mask to the stride-8 grid; three heads
then emit the transduction encoding, the induction encoding, and the
induction importance weights.  The two encodings end in ReLU and the
weight head in softplus, so all outputs are elementwise non-negative and
the cosine between flattened encodings stays in [0, 1].

The decoder fuses the two propagated encodings by elementwise addition
and refines coarse-to-fine against the backbone pyramid until it reaches
image resolution with a single logit channel.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .backbone import BackboneFeatures, kaiming_conv, zero_bias
from .config import Config
from .errors import ShapeError
from .ops import avgpool2x2, conv2d, resize_bilinear
from .tensor import Tensor

log = logging.getLogger(__name__)

COS_EPS = 1e-12

STEM_WIDTHS = (8, 16)
DECODER_WIDTHS = (16, 8, 4)


def init_label_encoder(rng: np.random.Generator, cfg: Config) -> dict[str, Tensor]:
    d = cfg.encoding_channels
    params = {
        "label.stem1.w": kaiming_conv(rng, 3, 1, STEM_WIDTHS[0]),
        "label.stem1.b": zero_bias(STEM_WIDTHS[0]),
        "label.stem2.w": kaiming_conv(rng, 3, STEM_WIDTHS[0], STEM_WIDTHS[1]),
        "label.stem2.b": zero_bias(STEM_WIDTHS[1]),
    }
    heads = ["head_tra", "head_ind", "head_w"] if cfg.label_heads == "two" else ["head_tra", "head_w"]
    for head in heads:
        params[f"label.{head}.c1.w"] = kaiming_conv(rng, 3, STEM_WIDTHS[1], d)
        params[f"label.{head}.c1.b"] = zero_bias(d)
        params[f"label.{head}.c2.w"] = kaiming_conv(rng, 3, d, d)
        params[f"label.{head}.c2.b"] = zero_bias(d)
    return params


def _head(x: Tensor, params: dict[str, Tensor], name: str, final) -> Tensor:
    h = T.relu(conv2d(x, params[f"label.{name}.c1.w"]) + params[f"label.{name}.c1.b"])
    return final(conv2d(h, params[f"label.{name}.c2.w"]) + params[f"label.{name}.c2.b"])


def encode_label(mask: Tensor, params: dict[str, Tensor], cfg: Config):
    """Encode a full-resolution mask into (trans, induct, weights) at stride 8.

    A single-head configuration reuses the transduction head's output for
    both branches.
    """
    if mask.ndim != 3 or mask.shape[2] != 1:
        raise ShapeError(f"mask must be h x w x 1, got {mask.shape}")
    if mask.shape[0] % 8 or mask.shape[1] % 8:
        raise ShapeError(f"mask sides must be multiples of 8, got {mask.shape}")
    h = T.relu(conv2d(mask, params["label.stem1.w"], stride=2) + params["label.stem1.b"])
    h = T.relu(conv2d(h, params["label.stem2.w"], stride=2) + params["label.stem2.b"])
    h = avgpool2x2(h)

    enc_tra = _head(h, params, "head_tra", T.relu)
    if cfg.label_heads == "two":
        enc_ind = _head(h, params, "head_ind", T.relu)
    else:
        enc_ind = enc_tra
    weights = _head(h, params, "head_w", T.softplus)
    return enc_tra, enc_ind, weights


def cosine_loss(enc_a: Tensor, enc_b: Tensor) -> Tensor:
    """Cosine of the flattened encodings; non-negative inputs give [0, 1]."""
    if enc_a.shape != enc_b.shape:
        raise ShapeError(f"encoding shapes differ: {enc_a.shape} vs {enc_b.shape}")
    a = enc_a.reshape((enc_a.size,))
    b = enc_b.reshape((enc_b.size,))
    denom = T.tsqrt((a * a).sum()) * T.tsqrt((b * b).sum())
    if denom.item() < COS_EPS:
        log.debug("cosine_loss hit a zero encoding; returning 0 by convention")
        return Tensor(0.0)
    return (a * b).sum() / denom


SKIP_INIT_SCALE = 0.25  # keep image skips quieter than the target encodings at init
OUT_BIAS_INIT = 2.0     # start all-foreground: the sorted-Jaccard loss is nearly
                        # gradient-free at the all-background collapse point


def _skip_conv(rng, ksize, c_in, c_out) -> Tensor:
    t = kaiming_conv(rng, ksize, c_in, c_out)
    t.data *= SKIP_INIT_SCALE
    return t


def init_decoder(rng: np.random.Generator, cfg: Config) -> dict[str, Tensor]:
    d = cfg.encoding_channels
    w1, w2, _, w4 = cfg.backbone_widths
    c3 = cfg.matching_channels
    s1, s2, s3 = DECODER_WIDTHS
    params = {
        "dec.proj4.w": _skip_conv(rng, 1, w4, s1),
        "dec.proj4.b": zero_bias(s1),
        "dec.proj3.w": _skip_conv(rng, 1, c3, s1),
        "dec.proj3.b": zero_bias(s1),
        "dec.proj2.w": _skip_conv(rng, 1, w2, s2),
        "dec.proj2.b": zero_bias(s2),
        "dec.proj1.w": _skip_conv(rng, 1, w1, s3),
        "dec.proj1.b": zero_bias(s3),
        "dec.stage1.w": kaiming_conv(rng, 3, d, s1),
        "dec.stage1.b": zero_bias(s1),
        "dec.stage2.w": kaiming_conv(rng, 3, s1, s2),
        "dec.stage2.b": zero_bias(s2),
        "dec.stage3.w": kaiming_conv(rng, 3, s2, s3),
        "dec.stage3.b": zero_bias(s3),
        "dec.out.w": kaiming_conv(rng, 3, s3, 1),
        "dec.out.b": Tensor(np.full(1, OUT_BIAS_INIT), tracked=True),
    }
    return params


def _proj(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return conv2d(x, params[f"dec.{name}.w"]) + params[f"dec.{name}.b"]


def decode_segmentation(
    enc_tra_star: Tensor,
    enc_ind_star: Tensor,
    feats: BackboneFeatures,
    params: dict[str, Tensor],
    cfg: Config,
) -> Tensor:
    """Fuse both propagated encodings and decode to image-resolution logits."""
    if enc_tra_star.shape != enc_ind_star.shape:
        raise ShapeError(
            f"branch encodings disagree: {enc_tra_star.shape} vs {enc_ind_star.shape}"
        )
    x1, x2, x3, x4 = (m.tensor for m in feats.maps)
    if enc_tra_star.shape[:2] != x3.shape[:2]:
        raise ShapeError(
            f"encodings at {enc_tra_star.shape[:2]} do not match the stride-8 grid {x3.shape[:2]}"
        )
    fused = enc_tra_star + enc_ind_star
    h8, w8 = fused.shape[:2]

    # each stage: convolve, add the matching-level skip, upsample 2x
    h = conv2d(fused, params["dec.stage1.w"]) + params["dec.stage1.b"]
    h = T.relu(h + _proj(x3, params, "proj3") + resize_bilinear(_proj(x4, params, "proj4"), h8, w8))
    h = resize_bilinear(h, h8 * 2, w8 * 2)

    h = conv2d(h, params["dec.stage2.w"]) + params["dec.stage2.b"]
    h = resize_bilinear(T.relu(h + _proj(x2, params, "proj2")), h8 * 4, w8 * 4)

    h = conv2d(h, params["dec.stage3.w"]) + params["dec.stage3.b"]
    h = resize_bilinear(T.relu(h + _proj(x1, params, "proj1")), h8 * 8, w8 * 8)

    return conv2d(h, params["dec.out.w"]) + params["dec.out.b"]
