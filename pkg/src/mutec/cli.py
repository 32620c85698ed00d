"""Command-line entry point: prepare, train, eval, predict, sweep-beam, make-toy-corpus."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, read_config_file
from .data import RECCON_REPORTED_COUNTS, FoldSpec, SamplingError, build_fold, dump_corpus, fold_counts, load_corpus, read_fold, write_fold
from .features import featurize_all
from .runner import (
    TaskMismatchError,
    TrainingDiverged,
    beam_sweep,
    load_checkpoint,
    predict_features,
    save_checkpoint,
    score_predictions,
    sha256_file,
    train,
    write_json,
    write_jsonl,
)
from .synthetic import make_synthetic_dialogues

logger = logging.getLogger("mutec")

DATA_ROOT_ENV = "MUTEC_DATA_ROOT"


def resolve(path: str | None) -> Path | None:
    """Resolve relative paths against $MUTEC_DATA_ROOT when it is set and the path is not found as given."""
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and not p.exists() and root:
        return Path(root) / p
    return p


def fold_filename(corpus: str, fold_id: int, balanced: bool, split: str) -> str:
    return f"{corpus.lower()}_fold{fold_id}{'_balanced' if balanced else ''}_{split}.jsonl"


# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = args.corpus.upper()
    splits = {"train": args.train, "val": args.val, "test": args.test}
    summary, failed = [], 0
    for split, path in splits.items():
        if path is None:
            continue
        dialogues = load_corpus(resolve(path), corpus)
        for fold_id in args.folds:
            for balanced in sorted({args.balanced, False} if args.with_full else {args.balanced}):
                spec = FoldSpec(
                    fold_id=fold_id,
                    balanced=balanced,
                    split=split,
                    seed=args.seed,
                    negatives_per_target=args.negatives_per_target,
                )
                out = out_dir / fold_filename(corpus, fold_id, balanced, split)
                try:
                    samples = build_fold(dialogues, spec)
                except SamplingError as exc:
                    # keep going so the other folds are still written; exit status reports it
                    print(f"error: {out.name}: {exc}", file=sys.stderr)
                    failed += 1
                    continue
                write_fold(samples, out)
                pos, neg = fold_counts(samples)
                reported = RECCON_REPORTED_COUNTS.get((corpus, fold_id, balanced), {}).get(split)
                row = {
                    "corpus": corpus,
                    "fold": fold_id,
                    "balanced": balanced,
                    "split": split,
                    "positives": pos,
                    "negatives": neg,
                    "file": out.name,
                    "sha256": sha256_file(out),
                }
                if reported is not None:
                    row["reported"] = list(reported)
                    row["matches_reported"] = (pos, neg) == tuple(reported)
                summary.append(row)
                tag = f"Fold{fold_id}{' balanced' if balanced else ''} {corpus} {split}"
                extra = f"  (reported {reported[0]}/{reported[1]})" if reported else ""
                print(f"{tag:<28} {pos}/{neg}{extra}")
    write_json(out_dir / "summary.json", summary)
    return 1 if failed else 0


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    cfg = cfg.updated(**overrides)
    if args.config:
        # structured config file takes precedence over individual flags
        cfg = RunConfig.from_dict({**cfg.to_dict(), **read_config_file(args.config)})
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path = resolve(args.train_file)
    val_path = resolve(args.val_file)
    train_samples = read_fold(train_path)
    val_samples = read_fold(val_path) if val_path else None
    datasets = {"train": {"path": str(train_path), "sha256": sha256_file(train_path), "n": len(train_samples)}}
    if val_path:
        datasets["val"] = {"path": str(val_path), "sha256": sha256_file(val_path), "n": len(val_samples)}

    repeats = args.repeats or 1
    status = 0
    for r in range(repeats):
        run_cfg = cfg.updated(seed=cfg.seed + r) if repeats > 1 else cfg
        run_dir = out_dir / f"run{r}" if repeats > 1 else out_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": run_cfg.to_dict(),
            "seeds": {"seed": run_cfg.seed, "fold_seed": run_cfg.fold_seed},
            "datasets": datasets,
            "epochs": [],
            "status": "running",
        }
        try:
            result = train(run_cfg, train_samples, val_samples, on_epoch=manifest["epochs"].append)
        except TrainingDiverged as exc:
            manifest["status"] = f"diverged: {exc}"
            write_json(run_dir / "manifest.json", manifest)
            print(f"training diverged: {exc}", file=sys.stderr)
            status = 2
            continue
        ckpt = run_dir / "checkpoint.pt"
        save_checkpoint(ckpt, result.model, run_cfg)
        manifest.update(
            status="ok",
            best_epoch=result.best_epoch,
            dropped=result.dropped,
            checkpoint={"path": ckpt.name, "sha256": sha256_file(ckpt)},
        )
        write_json(run_dir / "manifest.json", manifest)
        print(f"saved {ckpt} (best epoch {result.best_epoch})")
    return status


def _load_for_inference(args):
    cfg, tokenizer, model = load_checkpoint(args.checkpoint)
    if getattr(args, "task", None) and args.task != cfg.task:
        raise TaskMismatchError(f"checkpoint was trained for {cfg.task!r}, not {args.task!r}")
    samples = read_fold(resolve(args.fold_file))
    if not samples:
        raise TaskMismatchError("fold file contains no samples")
    feats, dropped = featurize_all(samples, cfg.task, tokenizer, cfg.seq_len, cfg.with_context)
    return cfg, model, samples, feats, dropped


def cmd_predict(args) -> int:
    cfg, model, samples, feats, _ = _load_for_inference(args)
    preds = predict_features(model, feats, cfg, args.beam_width)
    write_jsonl(args.out, preds)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg, model, samples, feats, dropped = _load_for_inference(args)
    preds = predict_features(model, feats, cfg, args.beam_width)
    by_id = {s.sample_id: s for s in samples}
    rep = score_predictions(cfg.task, preds, by_id, cfg)
    reports = {"span": rep[0], "entail": rep[1]} if isinstance(rep, tuple) else {cfg.task: rep}
    for r in reports.values():
        if dropped:
            r.flags.append(f"dropped during featurization: {dict(dropped)}")
    if args.predictions_out:
        write_jsonl(args.predictions_out, preds)
    out = {name: json.loads(r.to_json()) for name, r in reports.items()}
    if args.report_out:
        write_json(args.report_out, out)
    for name, r in reports.items():
        cols = ["em_pos", "f1_pos", "f1_neg", "f1_overall", "emotion_acc"] if name in ("cse", "span") else [
            "f1_pos", "f1_neg", "macro_f1", "emotion_acc"]
        print(f"[{name}] n={r.n_records}")
        print(r.table([c for c in cols if getattr(r, c) is not None]))
    return 0


def cmd_sweep_beam(args) -> int:
    cfg, model, samples, feats, _ = _load_for_inference(args)
    if cfg.task not in ("cse", "e2e"):
        raise TaskMismatchError("beam sweep needs a cse or e2e checkpoint")
    sweep = beam_sweep(model, feats, cfg, {s.sample_id: s for s in samples}, args.k)
    print(f"{'k':>4} | {'F1_pos':>8}")
    for row in sweep["rows"]:
        print(f"{row['k']:>4} | {100 * (row['f1_pos'] or 0):>8.2f}")
    print(f"saturation k: {sweep['saturation_k']}  monotone: {sweep['monotone']}")
    if args.out:
        write_json(args.out, sweep)
    return 0


def cmd_make_toy_corpus(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (split, n) in enumerate((("train", args.n_train), ("val", args.n_val), ("test", args.n_test))):
        dump_corpus(make_synthetic_dialogues(n, seed=args.seed + i, prefix=split), out / f"toy_{split}.json")
    print(f"wrote toy corpus to {out}")
    return 0


# ---------------------------------------------------------------------------


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "y"):
        return True
    if s.lower() in ("0", "false", "no", "n"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _add_run_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default_type = type(RunConfig.__dataclass_fields__[f.name].default)
        if f.name in ("max_seq_len", "n_hidden_states"):
            kind = int
        elif default_type is bool:
            kind = _bool
        else:
            kind = default_type
        p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mutec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build fold files from annotated dialogues")
    p.add_argument("--corpus", default="DD", choices=["DD", "IEMO", "dd", "iemo"])
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--folds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--with-full", action="store_true", help="also write the full (unbalanced) folds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives-per-target", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a fold file")
    p.add_argument("--config", help="JSON/YAML file with RunConfig values (overrides flags)")
    p.add_argument("--train-file", required=True)
    p.add_argument("--val-file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--repeats", type=int, default=1)
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "score a checkpoint on a fold file"),
        ("predict", cmd_predict, "write predictions for a fold file"),
        ("sweep-beam", cmd_sweep_beam, "F1_pos as a function of beam size"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--fold-file", required=True)
        p.add_argument("--task", choices=["cse", "cee", "e2e"])
        if name == "sweep-beam":
            p.add_argument("--k", type=int, nargs="+", default=[1, 2, 3, 5, 10])
            p.add_argument("--out")
        else:
            p.add_argument("--beam-width", type=int, default=None)
        if name == "eval":
            p.add_argument("--predictions-out")
            p.add_argument("--report-out")
        if name == "predict":
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("make-toy-corpus", help="write small synthetic train/val/test corpora")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-val", type=int, default=10)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_corpus)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TaskMismatchError, SamplingError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
