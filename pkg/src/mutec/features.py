"""Turn samples into token-level training features and padded batches."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .data import EMOTION_TO_ID, Sample, SpanTarget, format_input
from .encoder import PAD_ID, SpanLostError, TokenizedInput, char_span_to_token_span

logger = logging.getLogger(__name__)


class SampleError(ValueError):
    pass


@dataclass
class Feature:
    sample_id: str
    tok: TokenizedInput
    start: int
    end: int
    entail_label: int
    emotion_id: int
    gold_text: str
    target_range: tuple[int, int]
    candidate_range: tuple[int, int]
    answer_range: tuple[int, int]


def featurize(sample: Sample, task: str, tokenizer, max_len: int, with_context: bool | None = None) -> Feature:
    """Tokenize one sample. ``task`` is cse, cee or e2e (e2e uses the CSE input layout)."""
    task = task.lower()
    fmt_task = "CEE" if task == "cee" else "CSE"
    if with_context is None:
        with_context = sample.with_context
    fi = format_input(sample, fmt_task, with_context)
    tok = tokenizer(fi.input_text, max_len, fi.segments)

    start = end = 0
    gold_text = sample.span_text
    if fmt_task == "CSE":
        gold: SpanTarget = fi.gold
        start, end = char_span_to_token_span(tok, (gold.char_start, gold.char_end))

    target_range = tok.token_range(fi.segments["target"])
    if target_range[1] <= target_range[0]:
        raise SampleError(f"{sample.sample_id}: target utterance has no tokens after truncation")
    candidate_range = tok.token_range(fi.segments["candidate"])
    answer_seg = fi.segments["context"] if with_context else fi.segments["candidate"]
    answer_range = tok.token_range(answer_seg)
    return Feature(
        sample_id=sample.sample_id,
        tok=tok,
        start=start,
        end=end,
        entail_label=int(sample.entail_label),
        emotion_id=EMOTION_TO_ID.get(sample.emotion, -100),
        gold_text=gold_text,
        target_range=target_range,
        candidate_range=candidate_range,
        answer_range=answer_range,
    )


def featurize_all(
    samples: Iterable[Sample], task: str, tokenizer, max_len: int, with_context: bool | None = None
) -> tuple[list[Feature], Counter]:
    """Featurize a fold, dropping samples whose gold span is truncated away; returns the drop counter."""
    feats, dropped = [], Counter()
    for s in samples:
        try:
            feats.append(featurize(s, task, tokenizer, max_len, with_context))
        except SpanLostError:
            dropped["span_lost"] += 1
        except SampleError:
            dropped["empty_target"] += 1
    if dropped:
        logger.warning("dropped %s samples during featurization", dict(dropped))
    return feats, dropped


@dataclass
class Batch:
    token_ids: torch.Tensor  # (B, T)
    attention_mask: torch.Tensor  # (B, T)
    answer_mask: torch.Tensor  # (B, T) bool; position 0 is always allowed
    start_positions: torch.Tensor
    end_positions: torch.Tensor
    entail_labels: torch.Tensor
    emotion_ids: torch.Tensor
    target_ranges: torch.Tensor  # (B, 2) half-open
    candidate_ranges: torch.Tensor  # (B, 2) half-open
    features: Sequence[Feature] = ()

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def collate(features: Sequence[Feature]) -> Batch:
    B = len(features)
    T = max(len(f.tok) for f in features)
    ids = torch.full((B, T), PAD_ID, dtype=torch.long)
    mask = torch.zeros((B, T), dtype=torch.long)
    answer = torch.zeros((B, T), dtype=torch.bool)
    for b, f in enumerate(features):
        n = len(f.tok)
        ids[b, :n] = torch.tensor(f.tok.token_ids)
        mask[b, :n] = torch.tensor(f.tok.attention_mask)
        answer[b, 0] = True
        lo, hi = f.answer_range
        answer[b, lo:hi] = True
    return Batch(
        token_ids=ids,
        attention_mask=mask,
        answer_mask=answer,
        start_positions=torch.tensor([f.start for f in features]),
        end_positions=torch.tensor([f.end for f in features]),
        entail_labels=torch.tensor([f.entail_label for f in features]),
        emotion_ids=torch.tensor([f.emotion_id for f in features]),
        target_ranges=torch.tensor([f.target_range for f in features]),
        candidate_ranges=torch.tensor([f.candidate_range for f in features]),
        features=list(features),
    )
