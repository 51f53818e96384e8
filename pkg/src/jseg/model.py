"""Assembly of all trainable parameters into one named, checkpointable set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import init_backbone
from .config import Config
from .labelenc import init_decoder, init_label_encoder
from .tensor import Tensor, softplus
from .transformer import init_transformer

LAMBDA_FLOOR = 1e-6


@dataclass
class SegModel:
    cfg: Config
    params: dict[str, Tensor]   # insertion-ordered, dotted names


def _inverse_softplus(y: float) -> float:
    # solve softplus(x) = y for y > 0
    return float(y + np.log1p(-np.exp(-y)))


def init_model(cfg: Config) -> SegModel:
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    params.update(init_backbone(rng, cfg))
    params.update(init_transformer(rng, cfg))
    params.update(init_label_encoder(rng, cfg))
    params.update(init_decoder(rng, cfg))
    params["fewshot.lambda_raw"] = Tensor(
        _inverse_softplus(cfg.lambda_init), tracked=True
    )
    return SegModel(cfg=cfg, params=params)


def regularizer_weight(model: SegModel) -> Tensor:
    """Strictly positive ridge weight, learnable through its raw parameter."""
    return softplus(model.params["fewshot.lambda_raw"]) + LAMBDA_FLOOR


def load_params_into(model: SegModel, arrays: dict[str, np.ndarray]) -> None:
    have, want = set(arrays), set(model.params)
    if have != want:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise KeyError(f"checkpoint/model mismatch: missing={missing} extra={extra}")
    for name, value in arrays.items():
        p = model.params[name]
        if p.shape != value.shape:
            raise KeyError(f"{name}: checkpoint shape {value.shape} != model {p.shape}")
        p.data = np.asarray(value, dtype=p.data.dtype)
        p.grad = None
