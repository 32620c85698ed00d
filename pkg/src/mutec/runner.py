"""Training, prediction, scoring, checkpoints and run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .cee import CeeModel, cee_loss, cee_predict, inverse_class_weights
from .config import RunConfig
from .cse import CseModel, cse_beam_infer, cse_loss
from .data import CAUSE_EMOTIONS, EMOTION_TO_ID, Sample
from .e2e import E2eModel, e2e_loss, e2e_predict
from .encoder import build_encoder
from .features import Feature, collate, featurize_all
from .metrics import MetricsReport, SpanEvalRecord, entail_report, span_report

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mutec-checkpoint/1"


class TrainingDiverged(RuntimeError):
    pass


class TaskMismatchError(ValueError):
    pass


def build_model(cfg: RunConfig):
    """Seeded tokenizer + model for ``cfg``."""
    torch.manual_seed(cfg.seed)
    tokenizer, encoder = build_encoder(
        cfg.encoder,
        dim=cfg.toy_dim,
        n_layers=cfg.toy_layers,
        n_heads=cfg.toy_heads,
        vocab_size=cfg.toy_vocab,
        max_positions=max(cfg.seq_len, 8),
        seed=cfg.seed,
    )
    n_emotions = len(CAUSE_EMOTIONS)
    msd = dict(msd_p=cfg.msd_p, msd_k=cfg.msd_k, msd_aggregate=cfg.msd_aggregate, max_answer_length=cfg.max_answer_length)
    if cfg.task == "cse":
        model = CseModel(encoder, n_emotions, cfg.hidden_states, **msd)
    elif cfg.task == "e2e":
        model = E2eModel(encoder, n_emotions, cfg.hidden_states, **msd)
    else:
        model = CeeModel(encoder, n_emotions, cfg.hidden_states, cfg.bilstm_hidden, cfg.dropout)
    return tokenizer, model


def class_weights(features: Sequence[Feature]) -> tuple[torch.Tensor, torch.Tensor]:
    ent = Counter(f.entail_label for f in features)
    emo = Counter(f.emotion_id for f in features)
    entail_w = inverse_class_weights([ent[0], ent[1]])
    emotion_w = inverse_class_weights([emo[i] for i in range(len(CAUSE_EMOTIONS))], allow_missing=True)
    return entail_w, emotion_w


def compute_loss(model, batch, cfg: RunConfig, weights) -> torch.Tensor:
    entail_w, emotion_w = weights
    if cfg.task == "cse":
        out = model(batch)
        return cse_loss(out, batch, cfg.beta, cfg.emotion_prediction_enabled)
    if cfg.task == "cee":
        out = model(batch)
        return cee_loss(out, batch, entail_w, emotion_w, cfg.beta, cfg.emotion_prediction_enabled)
    out = model(batch)
    terms = ("span", "entail", "emotion") if cfg.emotion_prediction_enabled else ("span", "entail")
    return e2e_loss(out, batch, entail_w, emotion_w, terms)


def _batches(features: Sequence[Feature], batch_size: int, generator: torch.Generator | None = None):
    order = torch.randperm(len(features), generator=generator).tolist() if generator is not None else range(len(features))
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield collate([features[j] for j in order[i : i + batch_size]])


def linear_warmup_schedule(optimizer, warmup_steps: int, total_steps: int):
    """Linear warmup over ``warmup_steps`` optimizer steps, then linear decay to zero at ``total_steps``."""

    def factor(step: int) -> float:
        if step < warmup_steps:
            return step / max(1, warmup_steps)
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


@dataclass
class TrainResult:
    model: nn.Module
    tokenizer: object
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    dropped: dict = field(default_factory=dict)


def train(
    cfg: RunConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample] | None = None,
    on_epoch=None,
) -> TrainResult:
    """Fit a model; keeps the parameters of the best validation epoch (last epoch without validation)."""
    tokenizer, model = build_model(cfg)
    train_feats, dropped = featurize_all(train_samples, cfg.task, tokenizer, cfg.seq_len, cfg.with_context)
    if not train_feats:
        raise ValueError("no usable training samples")
    val_feats = []
    if val_samples:
        val_feats, vdrop = featurize_all(val_samples, cfg.task, tokenizer, cfg.seq_len, cfg.with_context)
        dropped = dropped + Counter({f"val_{k}": v for k, v in vdrop.items()})
    weights = class_weights(train_feats)

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_feats) / cfg.batch_size)
    scheduler = linear_warmup_schedule(optimizer, cfg.warmup_steps, steps_per_epoch * cfg.epochs)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)

    result = TrainResult(model, tokenizer, dropped=dict(dropped))
    best_state = copy.deepcopy(model.state_dict())
    best_metric = -math.inf
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, n = 0.0, 0
        for batch in _batches(train_feats, cfg.batch_size, gen):
            loss = compute_loss(model, batch, cfg, weights)
            if not torch.isfinite(loss):
                result.history.append({"epoch": epoch, "train_loss": loss.item(), "status": "diverged"})
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += loss.item() * len(batch)
            n += len(batch)
        row = {"epoch": epoch, "train_loss": total / n}
        if val_feats:
            row["val_loss"] = evaluate_loss(model, val_feats, cfg, weights)
            report = score_features(model, val_feats, cfg, val_samples_by_id(val_samples))
            metric = report.macro_f1 if cfg.task == "cee" else report.f1_pos
            row["val_metric"] = metric
            if metric is not None and metric > best_metric:
                best_metric = metric
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
        else:
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
        result.history.append(row)
        logger.info("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    model.load_state_dict(best_state)
    model.eval()
    return result


def val_samples_by_id(samples) -> dict[str, Sample]:
    return {s.sample_id: s for s in samples or ()}


@torch.no_grad()
def evaluate_loss(model, features: Sequence[Feature], cfg: RunConfig, weights) -> float:
    was = model.training
    model.eval()
    total, n = 0.0, 0
    for batch in _batches(features, cfg.batch_size):
        total += float(compute_loss(model, batch, cfg, weights)) * len(batch)
        n += len(batch)
    model.train(was)
    return total / max(n, 1)


# ---------------------------------------------------------------------------
# prediction and scoring


@torch.no_grad()
def predict_features(model, features: Sequence[Feature], cfg: RunConfig, k: int | None = None) -> list[dict]:
    """One prediction record per feature, in input order."""
    k = k or cfg.beam_width
    records = []
    model.eval()
    for batch in _batches(features, cfg.batch_size):
        if cfg.task == "cse":
            spans, emo_logits = cse_beam_infer(model, batch, k)
            emos = torch.argmax(emo_logits, dim=-1).tolist()
            for f, sp, e in zip(batch.features, spans, emos):
                records.append(
                    {
                        "sample_id": f.sample_id,
                        "text": sp.text,
                        "tok_start": sp.tok_start,
                        "tok_end": sp.tok_end,
                        "score": sp.score,
                        "predicted_emotion": CAUSE_EMOTIONS[e].value,
                    }
                )
        elif cfg.task == "cee":
            for f, p in zip(batch.features, cee_predict(model, batch)):
                records.append(
                    {"sample_id": f.sample_id, "label": p.label, "prob": p.prob, "aux_emotion": p.aux_emotion.value}
                )
        else:
            for f, p in zip(batch.features, e2e_predict(model, batch, k)):
                records.append(
                    {
                        "sample_id": f.sample_id,
                        "text": p.span.text,
                        "tok_start": p.span.tok_start,
                        "tok_end": p.span.tok_end,
                        "score": p.span.score,
                        "predicted_emotion": p.emotion.emotion.value,
                        "label": p.entail.label,
                        "prob": p.entail.prob,
                        "aux_emotion": p.entail.aux_emotion.value,
                        "consistent": p.consistent,
                    }
                )
    return records


def score_predictions(task: str, predictions: Sequence[dict], samples: dict[str, Sample], cfg: RunConfig | None = None):
    """Score prediction records against their samples. E2E returns (span report, entail report)."""
    cfg = cfg or RunConfig(task=task)
    missing = [p["sample_id"] for p in predictions if p["sample_id"] not in samples]
    if missing:
        raise TaskMismatchError(f"{len(missing)} predictions reference unknown samples, e.g. {missing[0]}")
    gold_emo = [samples[p["sample_id"]].emotion.value for p in predictions]
    if task in ("cse", "e2e"):
        recs = [SpanEvalRecord(samples[p["sample_id"]].span_text, p["text"]) for p in predictions]
        span = span_report(
            recs, gold_emo, [p["predicted_emotion"] for p in predictions], cfg.drop_articles, cfg.overall_mode
        )
        if task == "cse":
            return span
        ent = entail_report(
            [samples[p["sample_id"]].entail_label for p in predictions],
            [p["label"] for p in predictions],
            gold_emo,
            [p["predicted_emotion"] for p in predictions],
        )
        inconsistent = sum(1 for p in predictions if not p["consistent"])
        if inconsistent:
            ent.flags.append(f"{inconsistent} predictions disagree between span and entailment heads")
        return span, ent
    return entail_report(
        [samples[p["sample_id"]].entail_label for p in predictions],
        [p["label"] for p in predictions],
        gold_emo,
        [p["aux_emotion"] for p in predictions],
    )


def score_features(model, features, cfg: RunConfig, samples: dict[str, Sample], k: int | None = None) -> MetricsReport:
    preds = predict_features(model, features, cfg, k)
    rep = score_predictions(cfg.task, preds, samples, cfg)
    return rep[0] if isinstance(rep, tuple) else rep


def beam_sweep(model, features, cfg: RunConfig, samples: dict[str, Sample], ks: Sequence[int]) -> dict:
    """F1_pos for each beam size plus the saturation beam size (smallest k after which F1_pos stops changing)."""
    rows = []
    for k in ks:
        rep = score_features(model, features, cfg, samples, k)
        rows.append({"k": k, "f1_pos": rep.f1_pos})
    return {"rows": rows, "saturation_k": saturation_point(rows), "monotone": is_monotone(rows)}


def saturation_point(rows: Sequence[dict]) -> int | None:
    if not rows:
        return None
    last = rows[-1]["f1_pos"]
    sat = rows[-1]["k"]
    for r in reversed(rows):
        if r["f1_pos"] != last:
            break
        sat = r["k"]
    return sat


def is_monotone(rows: Sequence[dict]) -> bool:
    vals = [r["f1_pos"] or 0.0 for r in rows]
    return all(a <= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# persistence


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: nn.Module, cfg: RunConfig) -> None:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save({"format": CHECKPOINT_FORMAT, "task": cfg.task, "config": cfg.to_dict(), "state_dict": state}, path)


def load_checkpoint(path: str | Path):
    """Return ``(cfg, tokenizer, model)`` restored from a checkpoint archive."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    cfg = RunConfig.from_dict(blob["config"])
    tokenizer, model = build_model(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return cfg, tokenizer, model


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_jsonl(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
