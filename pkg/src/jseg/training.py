"""Offline end-to-end training: losses, optimizer, mini-sequences, train loop.

Training replays the online pipeline on short sampled clips: the first
frame seeds the memory bank with ground truth, later frames are segmented
with the current parameters, and the bank is updated with the predictions
after every frame (sampling period 1 instead of the inference period).
The per-frame segmentation losses and the encoding-similarity penalties
are combined and differentiated through the whole unrolled computation,
inner optimizer included.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import Config
from .errors import DataError, NumericError
from .fewshot import TargetModel
from .labelenc import cosine_loss, encode_label
from .model import SegModel, init_model
from .pipeline import (
    crop_policy,
    crop_resize,
    fresh_target_model,
    init_bank,
    make_entry,
    maybe_update,
    segment_object,
)
from .backbone import extract
from .pnm import read_pgm, read_ppm
from .tensor import Tape, Tensor, relu

log = logging.getLogger(__name__)


def lovasz_hinge(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Hinge-based convex surrogate of the Jaccard loss for one binary mask.

    Hinge errors are sorted once (descending, ties by original index) and
    weighted by the discrete derivative of the Jaccard loss along that
    order; the sort is held constant during backward.  With no foreground
    at all the Jaccard loss is undefined and the mean hinge error is
    returned instead.
    """
    if logits.ndim != 1 or logits.shape != labels.shape:
        raise NumericError(f"lovasz_hinge expects matching 1-d inputs, got {logits.shape} vs {labels.shape}")
    labels = labels.astype(np.float64)
    signs = 2.0 * labels - 1.0
    errors = relu(1.0 - Tensor(signs) * logits)
    total_fg = labels.sum()
    if total_fg == 0.0:
        return errors.mean()
    order = np.argsort(-errors.data, kind="stable")
    sorted_labels = labels[order]
    cum_fg = np.cumsum(sorted_labels)
    cum_bg = np.cumsum(1.0 - sorted_labels)
    intersection = total_fg - cum_fg
    union = total_fg + cum_bg
    jaccard_loss = 1.0 - intersection / union
    grad_sorted = np.diff(jaccard_loss, prepend=0.0)
    grad = np.empty_like(grad_sorted)
    grad[order] = grad_sorted
    return (errors * Tensor(grad)).sum()


def total_loss(seg_losses: list, cos_losses: list, cos_weight: float) -> Tensor:
    """Mean segmentation loss plus weighted mean encoding-similarity loss."""
    total = seg_losses[0]
    for term in seg_losses[1:]:
        total = total + term
    total = total / float(len(seg_losses))
    if cos_losses and cos_weight > 0.0:
        cos_total = cos_losses[0]
        for term in cos_losses[1:]:
            cos_total = cos_total + term
        total = total + cos_weight * (cos_total / float(len(cos_losses)))
    return total


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# corpus handling and augmentation

@dataclass
class Sequence:
    name: str
    frames: list[np.ndarray]        # float64 (h, w, 3) in [0, 1]
    masks: list[np.ndarray]         # uint8 index masks (h, w)
    split: str = "train"


@dataclass
class MiniSequence:
    frames: list[np.ndarray]
    masks: list[np.ndarray]         # binary float64 masks of the chosen object
    seq_name: str
    obj_id: int
    frame_indices: list[int]
    augment_record: dict = field(default_factory=dict)


def load_sequence(seq_dir: Path) -> Sequence:
    frame_files = sorted((seq_dir / "frames").glob("*.ppm"))
    mask_files = sorted((seq_dir / "masks").glob("*.pgm"))
    if not frame_files:
        raise DataError(f"{seq_dir}: no frames found")
    if len(frame_files) != len(mask_files):
        raise DataError(f"{seq_dir}: {len(frame_files)} frames vs {len(mask_files)} masks")
    frames = [read_ppm(f).astype(np.float64) / 255.0 for f in frame_files]
    masks = [read_pgm(f) for f in mask_files]
    split = "train"
    meta = seq_dir / "meta.txt"
    if meta.exists():
        for line in meta.read_text().splitlines():
            if line.startswith("split"):
                split = line.split("=", 1)[1].strip()
    return Sequence(name=seq_dir.name, frames=frames, masks=masks, split=split)


def load_corpus(data_dir) -> list[Sequence]:
    data_dir = Path(data_dir)
    seq_dirs = sorted(d for d in data_dir.iterdir() if (d / "frames").is_dir())
    if not seq_dirs:
        raise DataError(f"{data_dir}: no sequence directories")
    return [load_sequence(d) for d in seq_dirs]


def _warp(image: np.ndarray, angle_deg: float, scale: float, flip: bool) -> np.ndarray:
    """Affine warp about the image center; outside pixels become zero."""
    h, w = image.shape[:2]
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    yc, xc = ys - cy, xs - cx
    if flip:
        xc = -xc
    # inverse map: rotate by -theta, divide by scale
    src_y = (cos_t * yc + sin_t * xc) / scale + cy
    src_x = (-sin_t * yc + cos_t * xc) / scale + cx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = src_y - y0
    fx = src_x - x0
    out = np.zeros_like(image, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            weight = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yv = np.clip(yy, 0, h - 1)
            xv = np.clip(xx, 0, w - 1)
            sample = image[yv, xv]
            if image.ndim == 3:
                out += np.where(valid[:, :, None], sample * weight[:, :, None], 0.0)
            else:
                out += np.where(valid, sample * weight, 0.0)
    return out


def sample_minisequence(corpus: list[Sequence], rng: np.random.Generator,
                        cfg: Config) -> MiniSequence:
    """Sample frames from a window of a random sequence, with augmentation."""
    for _ in range(50):
        seq = corpus[rng.integers(len(corpus))]
        n = len(seq.frames)
        window = min(cfg.train_window, n)
        start = int(rng.integers(0, n - window + 1))
        count = min(cfg.n_train_frames, window)
        picks = np.sort(rng.choice(window, size=count, replace=False)) + start
        first_mask = seq.masks[picks[0]]
        ids = [int(v) for v in np.unique(first_mask) if v != 0]
        if not ids:
            continue
        obj_id = ids[int(rng.integers(len(ids)))]

        record = {}
        if cfg.augment:
            record = {
                "flip": bool(rng.random() < 0.5),
                "angle": float(rng.uniform(-15.0, 15.0)),
                "scale": float(rng.uniform(0.8, 1.25)),
            }
        frames, masks = [], []
        for idx in picks:
            frame = seq.frames[idx]
            mask = (seq.masks[idx] == obj_id).astype(np.float64)
            if record:
                frame = _warp(frame, record["angle"], record["scale"], record["flip"])
                mask = (_warp(mask, record["angle"], record["scale"], record["flip"]) >= 0.5).astype(np.float64)
            frames.append(frame)
            masks.append(mask)
        if not masks[0].any():
            continue
        return MiniSequence(
            frames=frames, masks=masks, seq_name=seq.name, obj_id=obj_id,
            frame_indices=[int(i) for i in picks], augment_record=record,
        )
    raise DataError("could not sample a mini-sequence with a visible object")


# ---------------------------------------------------------------------------
# sequence loss and the training loop

def sequence_loss(model: SegModel, mini: MiniSequence):
    """Differentiable loss of one mini-sequence (same path as inference,
    except the bank samples every frame)."""
    cfg = model.cfg
    frame0, mask0 = mini.frames[0], mini.masks[0]
    rect = crop_policy(frame0.shape, mask0, cfg.crop_factor)
    patch = crop_resize(frame0, rect, cfg.proc_size)
    feats = extract(Tensor(patch), model.params, cfg)
    mask_patch = Tensor(crop_resize(mask0, rect, cfg.proc_size)[:, :, None])
    bank = init_bank(make_entry(0, feats, mask_patch), capacity=cfg.memory_capacity, period=1)
    target: TargetModel = fresh_target_model(model)

    seg_losses: list[Tensor] = []
    cos_losses: list[Tensor] = []
    use_cos = cfg.lambda_cos > 0.0 and cfg.label_heads == "two"
    if use_cos:
        e_tra0, e_ind0, _ = encode_label(mask_patch, model.params, cfg)
        cos_losses.append(cosine_loss(e_tra0, e_ind0))

    prev_mask = mask0
    for t in range(1, len(mini.frames)):
        res = segment_object(bank, target, mini.frames[t], prev_mask, model,
                             inner_steps=cfg.inner_steps_train)
        target = res.target_model
        gt_patch = crop_resize(mini.masks[t], res.rect, cfg.proc_size)
        labels = (gt_patch >= 0.5).astype(np.float64).reshape(-1)
        seg_losses.append(lovasz_hinge(res.logits.reshape((labels.size,)), labels))
        if use_cos:
            e_tra_t, e_ind_t, _ = encode_label(res.soft_mask, model.params, cfg)
            cos_losses.append(cosine_loss(e_tra_t, e_ind_t))
        maybe_update(bank, make_entry(t, res.feats, res.soft_mask))
        prev_mask = res.full_mask

    return total_loss(seg_losses, cos_losses, cfg.lambda_cos)


def learning_rate(base: float, iteration: int, total: int) -> float:
    lr = base
    if iteration >= total // 2:
        lr *= 0.5
    if iteration >= (3 * total) // 4:
        lr *= 0.5
    return lr


def train(cfg: Config, data_dir, out_dir, log_every: int = 50) -> Path:
    """Train from scratch on a corpus directory; returns the checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(data_dir)
    model = init_model(cfg)
    adam = Adam(model.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    start = time.time()

    for iteration in range(cfg.iters):
        adam.lr = learning_rate(cfg.lr, iteration, cfg.iters)
        batch = [sample_minisequence(corpus, rng, cfg) for _ in range(cfg.batch_size)]
        with Tape() as tape:
            losses = [sequence_loss(model, mini) for mini in batch]
            total = losses[0]
            for term in losses[1:]:
                total = total + term
            total = total / float(len(losses))
            value = total.item()
            if not np.isfinite(value):
                _dump_diagnostics(out_dir, iteration, batch, losses)
                raise NumericError(
                    f"non-finite loss {value} at iteration {iteration}; "
                    f"details in {out_dir / 'diagnostics.txt'}"
                )
            tape.backward(total)
        adam.step()
        adam.zero_grad()
        if log_every and (iteration % log_every == 0 or iteration == cfg.iters - 1):
            log.info("iter %d loss %.4f lr %.2e elapsed %.1fs",
                     iteration, value, adam.lr, time.time() - start)
        if cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0 \
                and iteration + 1 < cfg.iters:
            save_checkpoint(out_dir / f"ckpt_{iteration + 1:06d}.jseg", model.params, cfg)

    final = out_dir / "model.jseg"
    save_checkpoint(final, model.params, cfg)
    return final


def _dump_diagnostics(out_dir: Path, iteration: int, batch, losses) -> None:
    lines = [f"non-finite loss at iteration {iteration}"]
    for mini, loss in zip(batch, losses):
        lines.append(
            f"  seq={mini.seq_name} obj={mini.obj_id} frames={mini.frame_indices} "
            f"augment={mini.augment_record} loss={loss.item()!r}"
        )
    (out_dir / "diagnostics.txt").write_text("\n".join(lines) + "\n")
