"""Command-line entry point.

Subcommands: ``gen`` (synthetic corpora), ``train``, ``infer``, ``eval``,
``gradcheck`` (finite-difference suite), and ``ablate`` (branch and
label-encoder comparisons).  Exit codes: 0 success, 1 usage error,
2 data/config error, 3 numerical failure.  The ``JSEG_THREADS``
environment variable caps sequence-level worker counts.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .ablate import AblationSettings, format_tables, run_ablation
from .checkpoint import load_checkpoint
from .config import config_hash, load_config, write_config
from .errors import ConfigError, DataError, NumericError
from .gradcheck import run_op_checks, run_unrolled_checks
from .metrics import evaluate, format_report, report_to_json
from .model import init_model, load_params_into
from .pipeline import run_video, worker_count
from .pnm import write_pgm
from .synth import generate_corpus
from .training import load_corpus, load_sequence, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", choices=("on", "off"), default="on",
                   help="single-worker, bit-reproducible mode (default on)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _build_config(args) -> Config:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic == "on"
    return load_config(args.config, overrides)


def make_parser() -> _Parser:
    parser = _Parser(prog="jseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic sequences")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-train", type=int, default=1)
    p.add_argument("--num-seen", type=int, default=0)
    p.add_argument("--num-unseen", type=int, default=0)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--distractors", type=int, default=1)

    p = sub.add_parser("train", help="offline end-to-end training")
    _add_common(p)
    p.add_argument("--data", required=True, help="corpus directory of sequences")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="segment sequences with a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="directory for report.txt / report.json")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=20, help="number of random seeds")

    p = sub.add_parser("ablate", help="branch / label-encoder ablation tables")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation-seeds", default="0,1,2")
    p.add_argument("--num-train", type=int, default=30)
    p.add_argument("--num-seen", type=int, default=10)
    p.add_argument("--num-unseen", type=int, default=10)
    p.add_argument("--size", type=int, default=48)
    return parser


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    generate_corpus(
        out,
        base_seed=seed,
        num_train=args.num_train,
        num_seen=args.num_seen,
        num_unseen=args.num_unseen,
        size=(args.size, args.size),
        num_frames=args.frames,
        num_objects=args.objects,
        num_distractors=args.distractors,
    )
    spec = (
        f"seed = {seed}\nnum_train = {args.num_train}\nnum_seen = {args.num_seen}\n"
        f"num_unseen = {args.num_unseen}\nframes = {args.frames}\nsize = {args.size}\n"
        f"objects = {args.objects}\ndistractors = {args.distractors}\n"
    )
    (out / "gen.txt").write_text(spec)
    print(f"wrote corpus to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    ckpt = train(cfg, args.data, out)
    print(f"checkpoint: {ckpt}")
    return 0


def _load_model_for_inference(checkpoint: str, config_path: str | None):
    ckpt_path = Path(checkpoint)
    arrays, ckpt_hash = load_checkpoint(ckpt_path)
    if config_path is None:
        sibling = ckpt_path.parent / "config.txt"
        if not sibling.exists():
            raise ConfigError(
                f"no --config given and {sibling} not found next to the checkpoint"
            )
        config_path = str(sibling)
    cfg = load_config(config_path)
    if config_hash(cfg) != ckpt_hash:
        raise DataError(
            f"config {config_path} does not match the checkpoint's config hash"
        )
    model = init_model(cfg)
    load_params_into(model, arrays)
    return model, cfg


def _infer_one(job: tuple) -> str:
    checkpoint, config_path, seq_dir, out_dir = job
    model, _ = _load_model_for_inference(checkpoint, config_path)
    seq = load_sequence(Path(seq_dir))
    masks = run_video(seq.frames, seq.masks[0], model)
    out_masks = Path(out_dir) / seq.name / "masks"
    out_masks.mkdir(parents=True, exist_ok=True)
    for t, mask in enumerate(masks):
        write_pgm(out_masks / f"{t:05d}.pgm", mask)
    meta = Path(seq_dir) / "meta.txt"
    if meta.exists():
        (Path(out_dir) / seq.name / "meta.txt").write_text(meta.read_text())
    return seq.name


def cmd_infer(args) -> int:
    model, cfg = _load_model_for_inference(args.checkpoint, args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    seq_dirs = sorted(
        str(d) for d in Path(args.data).iterdir() if (d / "frames").is_dir()
    )
    if not seq_dirs:
        raise DataError(f"{args.data}: no sequences found")
    config_path = args.config or str(Path(args.checkpoint).parent / "config.txt")
    jobs = [(args.checkpoint, config_path, d, str(out)) for d in seq_dirs]
    workers = 1 if args.deterministic == "on" else worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_infer_one, jobs))
    else:
        done = [_infer_one(job) for job in jobs]
    print(f"segmented {len(done)} sequences into {out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.pred, args.gt)
    text = format_report(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(report_to_json(report))
    return 0 if not report.invalid else 2


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds)
    results = run_op_checks(seeds) + run_unrolled_checks(seeds)
    worst = 0.0
    failures = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        worst = max(worst, r.max_err)
        if not r.ok:
            failures += 1
            print(f"{status:>4}  {r.name:<40} max_err={r.max_err:.3e} tol={r.tol:.0e}")
    print(f"gradcheck: {len(results) - failures}/{len(results)} passed, worst error {worst:.3e}")
    return 0 if failures == 0 else 3


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    seeds = tuple(int(s) for s in args.ablation_seeds.split(","))
    settings = AblationSettings(
        seeds=seeds,
        num_train=args.num_train,
        num_seen=args.num_seen,
        num_unseen=args.num_unseen,
        frame_size=args.size,
    )
    summary = run_ablation(cfg, args.out, settings)
    print(format_tables(summary), end="")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
