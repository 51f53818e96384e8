"""Transduction branch: attention-based propagation of template encodings.

Attention here normalizes query and key rows to unit length before the
dot product and rescales by a fixed temperature, so the affinity depends
only on feature direction.  The encoder self-attends the flattened
template tokens; the decoder self-attends the search tokens and then
cross-attends to carry template mask encodings over to the search grid.
"""

from __future__ import annotations

import numpy as np

from .config import Config
from .errors import ContractError, ShapeError
from .ops import instance_norm, l2_normalize, softmax
from .tensor import Tensor, reshape, transpose, tsqrt

L2_EPS = 1e-12
NORM_EPS = 1e-5


def init_transformer(rng: np.random.Generator, cfg: Config) -> dict[str, Tensor]:
    c = cfg.matching_channels
    proj = c // cfg.attn_proj_div

    def linear(c_in, c_out):
        return Tensor(rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in), tracked=True)

    return {
        "trans.phi.w": linear(c, proj),
        "trans.psi_q.w": linear(c, proj),
        "trans.psi_k.w": linear(c, proj),
    }


def normalized_attention(query: Tensor, key: Tensor, value: Tensor, tau: float) -> Tensor:
    """Row-normalized attention: softmax(unit(Q) unit(K)^T / tau) V."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if query.ndim != 2 or key.ndim != 2 or query.shape[1] != key.shape[1]:
        raise ShapeError(f"query/key width mismatch: {query.shape} vs {key.shape}")
    if key.shape[0] != value.shape[0]:
        raise ShapeError(f"key/value row mismatch: {key.shape} vs {value.shape}")
    qn = l2_normalize(query, axis=1, epsilon=L2_EPS)
    kn = l2_normalize(key, axis=1, epsilon=L2_EPS)
    weights = softmax((qn @ transpose(kn, (1, 0))) / tau, axis=1)
    return weights @ value


def _grouped_instance_norm(tokens: Tensor, groups: int) -> Tensor:
    """Instance norm with statistics taken per group of token rows."""
    total, c = tokens.shape
    per = total // groups
    m3 = reshape(tokens, (groups, per, c))
    mu = m3.mean(axis=1, keepdims=True)
    centered = m3 - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return reshape(centered / tsqrt(var + NORM_EPS), (total, c))


def _self_attend(tokens: Tensor, phi: Tensor, cfg: Config, groups: int = 1) -> Tensor:
    """Projected self-attention + residual + instance norm, repeated per layer."""
    out = tokens
    for _ in range(cfg.transformer_layers):
        proj = out @ phi
        attended = normalized_attention(proj, proj, out, cfg.tau)
        merged = attended + out
        if groups > 1:
            out = _grouped_instance_norm(merged, groups)
        else:
            out = instance_norm(merged)
    return out


def encode_templates(z: Tensor, params: dict[str, Tensor], cfg: Config) -> Tensor:
    """Self-attend the n x h x w x c template stack into n*h*w encoded tokens.

    Normalization statistics span all tokens jointly; setting
    ``encoder_norm_per_frame`` restricts them to each template's block.
    """
    if z.ndim != 4:
        raise ShapeError(f"templates must be n x h x w x c, got {z.shape}")
    n, h, w, c = z.shape
    tokens = reshape(z, (n * h * w, c))
    groups = n if (cfg.encoder_norm_per_frame and n > 1) else 1
    return _self_attend(tokens, params["trans.phi.w"], cfg, groups=groups)


def decode_search(
    x: Tensor,
    z_enc: Tensor,
    enc_templates: Tensor,
    params: dict[str, Tensor],
    cfg: Config,
) -> Tensor:
    """Propagate template mask encodings onto the h x w search grid."""
    if x.ndim != 3:
        raise ShapeError(f"search feature must be h x w x c, got {x.shape}")
    if enc_templates.ndim != 4:
        raise ShapeError(f"template encodings must be n x h x w x d, got {enc_templates.shape}")
    n, th, tw, d = enc_templates.shape
    if z_enc.shape[0] != n * th * tw:
        raise ShapeError(f"encoded template token count {z_enc.shape[0]} != {n}*{th}*{tw}")
    h, w, c = x.shape
    tokens = reshape(x, (h * w, c))
    attn_tokens = _self_attend(tokens, params["trans.phi.w"], cfg)

    query = attn_tokens @ params["trans.psi_q.w"]
    key = z_enc @ params["trans.psi_k.w"]
    value = reshape(enc_templates, (n * th * tw, d))
    propagated = normalized_attention(query, key, value, cfg.tau)
    return reshape(propagated, (h, w, d))
