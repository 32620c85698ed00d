"""Cause span extraction: start-conditioned span heads with multi-sample dropout,
an auxiliary emotion head, and k x k beam decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ConfigurationError, meanpool_layers
from .features import Batch

MASKED_LOGIT = -1e9


class MultiSampleDropout(nn.Module):
    """Linear scoring head applied under ``k`` independent dropout masks.

    In training the ``k`` passes are averaged (``aggregate="logits"``) or
    returned stacked on a leading axis so the loss can be averaged instead
    (``aggregate="loss"``). In eval mode a single unmasked pass is used.
    """

    def __init__(self, in_dim: int, p: float = 0.5, k: int = 5, aggregate: str = "logits"):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"msd_p must be in [0, 1), got {p}")
        if k < 1:
            raise ConfigurationError(f"msd_k must be >= 1, got {k}")
        if aggregate not in ("logits", "loss"):
            raise ConfigurationError(f"msd_aggregate must be 'logits' or 'loss', got {aggregate!r}")
        self.linear = nn.Linear(in_dim, 1)
        self.p = p
        self.k = k
        self.aggregate = aggregate

    def samples(self, x: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.linear(F.dropout(x, self.p, True)).squeeze(-1) for _ in range(self.k)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training:
            return self.linear(x).squeeze(-1)
        stacked = self.samples(x)
        return stacked if self.aggregate == "loss" else stacked.mean(dim=0)


def msdropout_logits(states: torch.Tensor, head: MultiSampleDropout) -> torch.Tensor:
    return head(states)


@dataclass
class CseOutput:
    start_logits: torch.Tensor  # (B, T) or (k, B, T) under loss-aggregated MSD
    end_logits: torch.Tensor | None
    emotion_logits: torch.Tensor  # (B, E)
    states: torch.Tensor  # layer-mean-pooled token states (B, T, D)
    answer_mask: torch.Tensor


@dataclass
class SpanPrediction:
    tok_start: int
    tok_end: int
    score: float
    text: str = ""
    char_span: tuple[int, int] | None = None
    fallback: bool = False

    @property
    def is_empty(self) -> bool:
        return self.tok_start == 0 and self.tok_end == 0


def _mask(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return logits.masked_fill(~mask, MASKED_LOGIT)


class CseModel(nn.Module):
    def __init__(
        self,
        encoder: nn.Module,
        n_emotions: int = 6,
        n_hidden_states: int = 12,
        msd_p: float = 0.5,
        msd_k: int = 5,
        msd_aggregate: str = "logits",
        emotion_hidden: int | None = -1,
        max_answer_length: int = 200,
    ):
        super().__init__()
        if n_hidden_states > encoder.n_layers:
            raise ConfigurationError(
                f"n_hidden_states={n_hidden_states} exceeds the encoder's {encoder.n_layers} layers"
            )
        D = encoder.dim
        self.encoder = encoder
        self.n_hidden_states = n_hidden_states
        self.max_answer_length = max_answer_length
        if emotion_hidden == -1:
            emotion_hidden = D
        if emotion_hidden:
            self.emotion_head = nn.Sequential(nn.Linear(D, emotion_hidden), nn.Tanh(), nn.Linear(emotion_hidden, n_emotions))
        else:
            self.emotion_head = nn.Linear(D, n_emotions)
        self.start_head = MultiSampleDropout(D, msd_p, msd_k, msd_aggregate)
        self.end_head = MultiSampleDropout(2 * D, msd_p, msd_k, msd_aggregate)

    def encode(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.encoder(batch.token_ids, batch.attention_mask)
        states = meanpool_layers(out.layer_states, self.n_hidden_states)
        return states, out

    def end_logits(self, states: torch.Tensor, starts: torch.Tensor, answer_mask: torch.Tensor) -> torch.Tensor:
        """End logits given one start index per row: head over ``[h_t ; h_start]`` for every t."""
        B, T, D = states.shape
        h_s = states[torch.arange(B), starts]  # (B, D)
        cat = torch.cat([states, h_s[:, None, :].expand(B, T, D)], dim=-1)
        return _mask(self.end_head(cat), answer_mask)

    def forward(self, batch: Batch, gold_starts: torch.Tensor | None = None) -> CseOutput:
        """Training forward: end logits are teacher-forced on ``gold_starts`` (default: batch gold)."""
        states, _ = self.encode(batch)
        mask = batch.answer_mask
        start_logits = _mask(self.start_head(states), mask)
        if gold_starts is None:
            gold_starts = batch.start_positions
        T = states.shape[1]
        if (gold_starts < 0).any() or (gold_starts >= T).any():
            raise ValueError("gold start index out of range")
        end_logits = self.end_logits(states, gold_starts, mask)
        emotion_logits = self.emotion_head(states[:, 0])
        return CseOutput(start_logits, end_logits, emotion_logits, states, mask)


def _ce(logits: torch.Tensor, target: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    if logits.dim() == 3:
        # loss-aggregated multi-sample dropout: (k, B, T)
        return torch.stack([F.cross_entropy(l, target, weight=weight) for l in logits]).mean()
    return F.cross_entropy(logits, target, weight=weight)


def span_loss(start_logits, end_logits, starts, ends) -> torch.Tensor:
    return (_ce(start_logits, starts) + _ce(end_logits, ends)) / 2


def cse_loss_terms(out: CseOutput, batch: Batch) -> dict[str, torch.Tensor]:
    return {
        "span": span_loss(out.start_logits, out.end_logits, batch.start_positions, batch.end_positions),
        "emotion": F.cross_entropy(out.emotion_logits, batch.emotion_ids),
    }


def cse_loss(out: CseOutput, batch: Batch, beta: float = 1.0, emotion_enabled: bool = True) -> torch.Tensor:
    """L_span + beta * L_emotion; the emotion term is left out of the graph when disabled."""
    loss = span_loss(out.start_logits, out.end_logits, batch.start_positions, batch.end_positions)
    if emotion_enabled:
        loss = loss + beta * F.cross_entropy(out.emotion_logits, batch.emotion_ids)
    return loss


# ---------------------------------------------------------------------------
# decoding


def _feasible(s: int, e: int, max_answer_length: int) -> bool:
    if s == 0:
        return e == 0
    return s <= e <= s + max_answer_length


def _top(values: Sequence[float], candidates: Sequence[int], k: int) -> list[int]:
    return sorted(candidates, key=lambda i: (-values[i], i))[:k]


def beam_decode(
    start_logits: Sequence[float],
    end_logits_for: Callable[[list[int]], Sequence[Sequence[float]]],
    k: int,
    max_answer_length: int = 200,
    valid: Sequence[bool] | None = None,
) -> SpanPrediction:
    """k x k span search: top-k starts, top-k feasible ends for each start, best logit sum.

    ``end_logits_for(starts)`` returns one end-logit row per start. Feasible pairs
    satisfy ``start <= end <= start + max_answer_length`` with index 0 reserved for
    the empty span (0, 0). Ties resolve to the smaller start, then smaller end.
    """
    if k < 1:
        raise ValueError("beam size k must be >= 1")
    T = len(start_logits)
    if valid is None:
        valid = [True] * T
    cand = [i for i in range(T) if valid[i]]
    starts = _top(start_logits, cand, k)
    if not starts:
        return SpanPrediction(0, 0, float("-inf"), fallback=True)
    rows = end_logits_for(starts)
    best = None
    for s, row in zip(starts, rows):
        ends = [e for e in cand if _feasible(s, e, max_answer_length)]
        for e in _top(row, ends, k):
            key = (-(start_logits[s] + row[e]), s, e)
            if best is None or key < best:
                best = key
    if best is None:
        return SpanPrediction(0, 0, float("-inf"), fallback=True)
    return SpanPrediction(best[1], best[2], -best[0])


@torch.no_grad()
def cse_beam_infer(model: CseModel, batch: Batch, k: int = 3) -> tuple[list[SpanPrediction], torch.Tensor]:
    """Decode spans for a batch; returns predictions and emotion logits."""
    was_training = model.training
    model.eval()
    try:
        states, _ = model.encode(batch)
        mask = batch.answer_mask
        start_logits = _mask(model.start_head(states), mask)
        emotion_logits = model.emotion_head(states[:, 0])
        preds = []
        for b in range(len(batch)):
            T_b = int(batch.attention_mask[b].sum())
            st = states[b : b + 1, :T_b]
            m = mask[b : b + 1, :T_b]
            sl = start_logits[b, :T_b].tolist()

            def end_fn(starts, st=st, m=m):
                n = len(starts)
                return model.end_logits(st.expand(n, -1, -1), torch.tensor(starts), m.expand(n, -1)).tolist()

            pred = beam_decode(sl, end_fn, k, model.max_answer_length, m[0].tolist())
            if batch.features:
                tok = batch.features[b].tok
                pred.text = tok.token_text(pred.tok_start, pred.tok_end)
                if not pred.is_empty:
                    pred.char_span = (tok.char_offsets[pred.tok_start][0], tok.char_offsets[pred.tok_end][1])
            preds.append(pred)
        return preds, emotion_logits
    finally:
        model.train(was_training)
