"""Branch and label-encoder ablations on a seeded synthetic corpus.

Five model variants are trained per seed and scored on seen/unseen eval
splits: transduction-only, induction-only, the joint model, and the
joint model with a single-head label encoder or with the similarity
penalty disabled.  The joint model doubles as the two-head+cosine row,
so the two comparison tables share its runs.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import Config, canonical_text, load_config
from .labelenc import cosine_loss, encode_label
from .metrics import evaluate
from .model import init_model, load_params_into
from .pipeline import crop_policy, crop_resize, run_video, worker_count
from .pnm import write_pgm
from .synth import generate_corpus
from .tensor import Tensor
from .training import load_corpus, train

# variant name -> config overrides relative to the base config
VARIANTS = {
    "tb_only": {"branches": "tb", "lambda_cos": 0.0},
    "ib_only": {"branches": "ib", "lambda_cos": 0.0},
    "single_head": {"branches": "joint", "label_heads": "single", "lambda_cos": 0.0},
    "two_head": {"branches": "joint", "lambda_cos": 0.0},
    "joint": {"branches": "joint"},   # two heads + cosine loss; full model
}

BRANCH_ROWS = ("tb_only", "ib_only", "joint")
HEAD_ROWS = ("single_head", "two_head", "joint")


@dataclass
class AblationSettings:
    seeds: tuple = (0, 1, 2)
    num_train: int = 30
    num_seen: int = 10
    num_unseen: int = 10
    frame_size: int = 48
    frames_train: int = 24
    frames_eval: int = 20
    num_distractors: int = 1


def measure_encoding_cosine(model, data_dir) -> float:
    """Mean first-frame cosine between the two heads' encodings."""
    values = []
    for seq in load_corpus(data_dir):
        mask = (seq.masks[0] > 0).astype(np.float64)
        rect = crop_policy(seq.frames[0].shape, mask, model.cfg.crop_factor)
        patch = Tensor(crop_resize(mask, rect, model.cfg.proc_size)[:, :, None])
        e_tra, e_ind, _ = encode_label(patch, model.params, model.cfg)
        values.append(cosine_loss(e_tra, e_ind).item())
    return float(np.mean(values))


def run_one(job: dict) -> dict:
    """Train one (variant, seed) pair, segment the eval split, and score it."""
    cfg = load_config(None, overrides=job["overrides"])
    work = Path(job["work_dir"])
    ckpt = train(cfg, job["train_dir"], work / "train", log_every=0)

    arrays, _ = load_checkpoint(ckpt)
    model = init_model(cfg)
    load_params_into(model, arrays)

    pred_dir = work / "pred"
    for seq in load_corpus(job["eval_dir"]):
        out_masks = run_video(seq.frames, seq.masks[0], model)
        seq_out = pred_dir / seq.name / "masks"
        seq_out.mkdir(parents=True, exist_ok=True)
        for t, mask in enumerate(out_masks):
            write_pgm(seq_out / f"{t:05d}.pgm", mask)

    report = evaluate(pred_dir, job["eval_dir"])
    result = {
        "variant": job["variant"],
        "seed": job["seed"],
        "jf": report.mean_jf,
        "j": report.mean_j,
        "f": report.mean_f,
        "jf_seen": report.split_mean("JF", "seen"),
        "jf_unseen": report.split_mean("JF", "unseen"),
        "j_seen": report.split_mean("J", "seen"),
        "j_unseen": report.split_mean("J", "unseen"),
        "cosine": (
            measure_encoding_cosine(model, job["eval_dir"])
            if cfg.label_heads == "two" else float("nan")
        ),
    }
    (work / "result.json").write_text(json.dumps(result, indent=2))
    return result


def run_ablation(base_cfg: Config, out_dir, settings: AblationSettings) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for seed in settings.seeds:
        corpus = out_dir / f"corpus_seed{seed}"
        if not (corpus / "train").is_dir():
            generate_corpus(
                corpus,
                base_seed=seed + 1,
                num_train=settings.num_train,
                num_seen=settings.num_seen,
                num_unseen=settings.num_unseen,
                size=(settings.frame_size, settings.frame_size),
                num_frames=settings.frames_train,
                num_distractors=settings.num_distractors,
            )
            _shorten_eval(corpus / "eval", settings.frames_eval)
        for variant, overrides in VARIANTS.items():
            merged = dict(overrides)
            merged["seed"] = seed
            cfg = replace(base_cfg, **{k: v for k, v in merged.items()})
            jobs.append({
                "variant": variant,
                "seed": seed,
                "overrides": _cfg_to_overrides(cfg),
                "train_dir": str(corpus / "train"),
                "eval_dir": str(corpus / "eval"),
                "work_dir": str(out_dir / f"{variant}_seed{seed}"),
            })

    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, jobs))
    else:
        results = [run_one(job) for job in jobs]

    summary = _summarize(results, settings)
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2))
    (out_dir / "ablation.txt").write_text(format_tables(summary))
    return summary


def _shorten_eval(eval_dir: Path, frames_eval: int) -> None:
    """Trim eval sequences so online inference stays quick."""
    for seq_dir in sorted(eval_dir.iterdir()):
        for sub in ("frames", "masks"):
            files = sorted((seq_dir / sub).iterdir())
            for f in files[frames_eval:]:
                f.unlink()


def _cfg_to_overrides(cfg: Config) -> dict:
    from dataclasses import fields

    out = {}
    for f in fields(Config):
        if f.name.startswith("_"):
            continue
        value = getattr(cfg, f.name)
        out[f.name] = value
    return out


def _summarize(results: list[dict], settings: AblationSettings) -> dict:
    by_variant: dict[str, dict] = {}
    for variant in VARIANTS:
        rows = [r for r in results if r["variant"] == variant]
        agg = {}
        for key in ("jf", "j", "f", "jf_seen", "jf_unseen", "j_seen", "j_unseen", "cosine"):
            values = [r[key] for r in rows]
            agg[key] = float(np.mean(values))
            agg[key + "_per_seed"] = values
        by_variant[variant] = agg

    checks = {
        "joint_vs_best_single_branch": bool(
            by_variant["joint"]["jf"]
            >= max(by_variant["tb_only"]["jf"], by_variant["ib_only"]["jf"]) - 0.01
        ),
        "ib_beats_tb_on_unseen": bool(
            by_variant["ib_only"]["jf_unseen"] > by_variant["tb_only"]["jf_unseen"]
        ),
        "two_head_cos_ge_two_head": bool(
            by_variant["joint"]["jf"] >= by_variant["two_head"]["jf"] - 0.01
        ),
        "two_head_ge_single_head": bool(
            by_variant["two_head"]["jf"] >= by_variant["single_head"]["jf"] - 0.01
        ),
        "cosine_lower_with_loss": bool(
            by_variant["joint"]["cosine"] < by_variant["two_head"]["cosine"]
        ),
    }
    return {
        "settings": {
            "seeds": list(settings.seeds),
            "num_train": settings.num_train,
            "num_seen": settings.num_seen,
            "num_unseen": settings.num_unseen,
            "frame_size": settings.frame_size,
        },
        "variants": by_variant,
        "checks": checks,
    }


def format_tables(summary: dict) -> str:
    v = summary["variants"]
    lines = []
    lines.append("branch ablation (mean over seeds)")
    lines.append(f"{'variant':<14} {'J&F':>8} {'J&F seen':>10} {'J&F unseen':>12}")
    for name in BRANCH_ROWS:
        row = v[name]
        lines.append(
            f"{name:<14} {row['jf']:>8.4f} {row['jf_seen']:>10.4f} {row['jf_unseen']:>12.4f}"
        )
    lines.append("")
    lines.append("label-encoder ablation (mean over seeds)")
    lines.append(f"{'variant':<14} {'J&F':>8} {'encoding cosine':>17}")
    for name in HEAD_ROWS:
        row = v[name]
        lines.append(f"{name:<14} {row['jf']:>8.4f} {row['cosine']:>17.4f}")
    lines.append("")
    for name, ok in summary["checks"].items():
        lines.append(f"check {name}: {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
