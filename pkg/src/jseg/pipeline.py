"""Online inference engine: memory bank, cropping, per-object segmentation.

Each tracked object keeps a memory bank of template frames: the stride-8
matching features of its crop plus the mask the crop was taken with.
Entry 0 (the annotated first frame) is pinned; later entries are sampled
every ``memory_period`` frames and evicted oldest-first once the bank is
full.  Both branches read the same bank: the transduction branch
propagates template mask encodings by attention, the induction branch
fits its convolutional target model to (feature, encoding, weight)
samples built from the same entries.

Frames are processed at a fixed square working resolution: the crop
suggested by :func:`crop_policy` is resized to ``proc_size``, segmented
there, and the predicted soft mask is resized back into the full frame
(zero outside the crop).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneFeatures, extract
from .config import Config
from .errors import ContractError
from .fewshot import FewShotProblem, TargetModel, apply_model, optimize
from .labelenc import decode_segmentation, encode_label
from .model import SegModel, regularizer_weight
from .ops import resize_bilinear_np
from .tensor import Tensor, concat, reshape, sigmoid
from .transformer import decode_search, encode_templates

CLAMP_EPS = 1e-5


@dataclass
class BankEntry:
    frame_index: int
    feat_tra: Tensor = None   # (h, w, c) stride-8 matching feature of the crop
    feat_ind: Tensor = None
    mask: Tensor = None       # (proc, proc, 1) mask aligned with the same crop


class MemoryBank:
    """Ordered template store with first-frame pinning and FIFO eviction."""

    def __init__(self, capacity: int, period: int):
        self.capacity = capacity
        self.period = period
        self.entries: list[BankEntry] = []

    def __len__(self) -> int:
        return len(self.entries)


def init_bank(entry: BankEntry, capacity: int = 20, period: int = 5) -> MemoryBank:
    """Start a bank from the annotated first frame; rejects empty targets."""
    if entry.mask is not None and not np.any(entry.mask.data > 0.5):
        raise ContractError("first-frame mask has no foreground; nothing to track")
    bank = MemoryBank(capacity=capacity, period=period)
    bank.entries.append(entry)
    return bank


def maybe_update(bank: MemoryBank, entry: BankEntry) -> MemoryBank:
    """Sample the entry if its frame index is due; evict the oldest non-pinned."""
    if not bank.entries:
        raise ContractError("bank must be initialized before updates")
    last = bank.entries[-1].frame_index
    if entry.frame_index <= last:
        raise ContractError(
            f"frame indices must increase: got {entry.frame_index} after {last}"
        )
    if entry.frame_index % bank.period == 0:
        bank.entries.append(entry)
        if len(bank.entries) > bank.capacity:
            del bank.entries[1]
    return bank


def update_due(bank: MemoryBank, frame_index: int) -> bool:
    return frame_index % bank.period == 0


def crop_policy(frame_shape: tuple, prev_mask: np.ndarray, crop_factor: float = 5.0):
    """Square crop around the mask centroid, sides a multiple of 16.

    The side is ``crop_factor`` times the larger bounding-box side,
    rounded up to a multiple of 16 and clipped to the frame (clipping may
    make the crop rectangular).  An empty mask means the target was lost;
    the whole frame is searched.
    """
    height, width = frame_shape[:2]
    fg = prev_mask > 0.5
    if not fg.any():
        return (0, 0, height, width)
    ys, xs = np.nonzero(fg)
    bbox = max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1)
    side = 16 * math.ceil(crop_factor * bbox / 16)
    ch, cw = min(side, height), min(side, width)
    cy, cx = ys.mean() + 0.5, xs.mean() + 0.5
    top = int(np.clip(round(cy - ch / 2), 0, height - ch))
    left = int(np.clip(round(cx - cw / 2), 0, width - cw))
    return (top, left, ch, cw)


def crop_resize(frame: np.ndarray, rect: tuple, size: int) -> np.ndarray:
    top, left, ch, cw = rect
    patch = frame[top:top + ch, left:left + cw]
    if patch.shape[:2] == (size, size):
        return np.ascontiguousarray(patch, dtype=np.float64)
    return resize_bilinear_np(patch.astype(np.float64), size, size)


def paste_full(patch: np.ndarray, rect: tuple, frame_shape: tuple) -> np.ndarray:
    top, left, ch, cw = rect
    full = np.zeros(frame_shape[:2])
    if patch.shape[:2] != (ch, cw):
        patch = resize_bilinear_np(patch, ch, cw)
    full[top:top + ch, left:left + cw] = patch
    return full


def bank_encodings(bank: MemoryBank, model: SegModel):
    """Encode every stored template mask with the current label encoder."""
    enc_tra, enc_ind, weights = [], [], []
    for entry in bank.entries:
        e_tra, e_ind, w = encode_label(entry.mask, model.params, model.cfg)
        enc_tra.append(e_tra)
        enc_ind.append(e_ind)
        weights.append(w)
    return enc_tra, enc_ind, weights


def _stack(tensors: list) -> Tensor:
    h, w, c = tensors[0].shape
    return reshape(concat([reshape(t, (1, h * w * c)) for t in tensors], axis=0),
                   (len(tensors), h, w, c))


def bank_problem(bank: MemoryBank, enc_ind: list, weights: list) -> FewShotProblem:
    return FewShotProblem(
        feats=[e.feat_ind for e in bank.entries],
        encodings=enc_ind,
        weights=weights,
    )


def fresh_target_model(model: SegModel) -> TargetModel:
    cfg = model.cfg
    omega = Tensor(np.zeros((cfg.kernel_size, cfg.kernel_size,
                             cfg.matching_channels, cfg.encoding_channels)))
    return TargetModel(omega=omega, lambda_reg=regularizer_weight(model))


@dataclass
class SegmentResult:
    rect: tuple
    feats: BackboneFeatures       # features of the current crop (for bank reuse)
    logits: Tensor                # (proc, proc, 1)
    soft_mask: Tensor             # sigmoid(logits)
    full_mask: np.ndarray         # (H, W) pasted into the frame, zeros outside
    target_model: TargetModel     # possibly advanced by the inner optimizer
    enc_tra_star: Tensor
    enc_ind_star: Tensor


def segment_object(
    bank: MemoryBank,
    target: TargetModel,
    frame: np.ndarray,
    prev_mask: np.ndarray,
    model: SegModel,
    inner_steps: int,
) -> SegmentResult:
    """Segment one object in one frame using both branches and the decoder."""
    if not bank.entries:
        raise ContractError("cannot segment with an empty memory bank")
    cfg = model.cfg
    rect = crop_policy(frame.shape, prev_mask, cfg.crop_factor)
    patch = crop_resize(frame, rect, cfg.proc_size)
    feats = extract(Tensor(patch), model.params, cfg)
    grid = cfg.proc_size // 8
    d = cfg.encoding_channels

    enc_tra, enc_ind, weights = bank_encodings(bank, model)

    if cfg.branches in ("joint", "tb"):
        z_stack = _stack([e.feat_tra for e in bank.entries])
        z_enc = encode_templates(z_stack, model.params, cfg)
        enc_tra_star = decode_search(
            feats.matching_tra, z_enc, _stack(enc_tra), model.params, cfg
        )
    else:
        enc_tra_star = Tensor(np.zeros((grid, grid, d)))

    if cfg.branches in ("joint", "ib"):
        fitted = optimize(bank_problem(bank, enc_ind, weights), target, inner_steps)
        enc_ind_star = apply_model(fitted, feats.matching_ind)
    else:
        fitted = target
        enc_ind_star = Tensor(np.zeros((grid, grid, d)))

    logits = decode_segmentation(enc_tra_star, enc_ind_star, feats, model.params, cfg)
    soft = sigmoid(logits)
    full = paste_full(soft.data[:, :, 0], rect, frame.shape)
    return SegmentResult(
        rect=rect, feats=feats, logits=logits, soft_mask=soft, full_mask=full,
        target_model=fitted, enc_tra_star=enc_tra_star, enc_ind_star=enc_ind_star,
    )


def soft_aggregate(masks: list[np.ndarray], eps: float = CLAMP_EPS) -> np.ndarray:
    """Merge per-object soft masks into M+1 pixelwise probabilities.

    Background is the product of the complements; every map is converted
    to odds and renormalized, so the outputs sum to one at each pixel.
    """
    clamped = [np.clip(m, eps, 1.0 - eps) for m in masks]
    background = np.prod([1.0 - m for m in clamped], axis=0)
    stack = np.stack([background] + clamped)
    odds = stack / (1.0 - stack)
    return odds / odds.sum(axis=0, keepdims=True)


@dataclass
class ObjectTrack:
    obj_id: int
    bank: MemoryBank
    model: TargetModel
    prev_mask: np.ndarray   # full-frame soft estimate, [0, 1]


def make_entry(frame_index: int, feats: BackboneFeatures, mask_patch: Tensor) -> BankEntry:
    return BankEntry(
        frame_index=frame_index,
        feat_tra=feats.matching_tra,
        feat_ind=feats.matching_ind,
        mask=mask_patch,
    )


def start_track(
    obj_id: int, frame: np.ndarray, mask: np.ndarray, model: SegModel
) -> ObjectTrack:
    """Initialize bank and target model from the annotated first frame."""
    cfg = model.cfg
    rect = crop_policy(frame.shape, mask, cfg.crop_factor)
    patch = crop_resize(frame, rect, cfg.proc_size)
    feats = extract(Tensor(patch), model.params, cfg)
    mask_patch = Tensor(crop_resize(mask.astype(np.float64), rect, cfg.proc_size)[:, :, None])
    entry = make_entry(0, feats, mask_patch)
    bank = init_bank(entry, capacity=cfg.memory_capacity, period=cfg.memory_period)
    target = fresh_target_model(model)
    if cfg.branches in ("joint", "ib"):
        _, enc_ind, weights = bank_encodings(bank, model)
        target = optimize(bank_problem(bank, enc_ind, weights), target, cfg.inner_steps_init)
    return ObjectTrack(obj_id=obj_id, bank=bank, model=target, prev_mask=mask.astype(np.float64))


def run_video(
    frames: list[np.ndarray],
    first_mask: np.ndarray,
    model: SegModel,
) -> list[np.ndarray]:
    """Track every object of ``first_mask`` through the frames.

    Returns one index mask per frame; frame 0 echoes the annotation.
    """
    cfg = model.cfg
    ids = [int(v) for v in np.unique(first_mask) if v != 0]
    if not ids:
        raise ContractError("first-frame annotation contains no objects")
    tracks = [
        start_track(obj_id, frames[0], (first_mask == obj_id).astype(np.float64), model)
        for obj_id in ids
    ]
    outputs = [first_mask.astype(np.uint8)]
    for t in range(1, len(frames)):
        frame = frames[t]
        results = [
            segment_object(tr.bank, tr.model, frame, tr.prev_mask, model, inner_steps=0)
            for tr in tracks
        ]
        merged = soft_aggregate([r.full_mask for r in results])
        label_map = np.zeros(frame.shape[:2], dtype=np.uint8)
        winner = merged.argmax(axis=0)
        for i, obj_id in enumerate(ids):
            label_map[winner == i + 1] = obj_id
        outputs.append(label_map)

        for tr, res in zip(tracks, results):
            tr.prev_mask = merged[ids.index(tr.obj_id) + 1]
            tr.model = res.target_model
            if update_due(tr.bank, t):
                mask_patch = Tensor(
                    crop_resize(tr.prev_mask, res.rect, cfg.proc_size)[:, :, None]
                )
                maybe_update(tr.bank, make_entry(t, res.feats, mask_patch))
                if cfg.branches in ("joint", "ib"):
                    _, enc_ind, weights = bank_encodings(tr.bank, model)
                    tr.model = optimize(
                        bank_problem(tr.bank, enc_ind, weights),
                        tr.model,
                        cfg.inner_steps_update,
                    )
    return outputs


def worker_count(requested: int) -> int:
    """Worker cap for sequence-level parallelism (JSEG_THREADS env var)."""
    limit = os.cpu_count() or 1
    cap = os.environ.get("JSEG_THREADS")
    if cap:
        try:
            limit = min(limit, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, min(requested, limit))
