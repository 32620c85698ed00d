"""Joint model: one shared encoder with emotion, cause-span and entailment heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .cee import EntailPrediction, entail_predictions
from .cse import CseModel, CseOutput, SpanPrediction, cse_beam_infer, span_loss
from .data import CAUSE_EMOTIONS, Emotion
from .features import Batch

TERMS = ("span", "entail", "emotion")


@dataclass
class E2eOutput(CseOutput):
    entail_logits: torch.Tensor | None = None


@dataclass
class EmotionPrediction:
    emotion: Emotion
    prob: float


class E2eModel(CseModel):
    """Span heads identical to :class:`CseModel`; emotion and entailment heads are single linear layers."""

    def __init__(self, encoder: nn.Module, n_emotions: int = 6, n_hidden_states: int = 12, **kw):
        kw.setdefault("emotion_hidden", None)
        super().__init__(encoder, n_emotions, n_hidden_states, **kw)
        # created last so the shared parts initialise exactly like an equally seeded CseModel
        self.entail_head = nn.Linear(encoder.dim, 2)

    def forward(self, batch: Batch, gold_starts: torch.Tensor | None = None) -> E2eOutput:
        base = super().forward(batch, gold_starts)
        entail_logits = self.entail_head(base.states[:, 0])
        return E2eOutput(
            base.start_logits, base.end_logits, base.emotion_logits, base.states, base.answer_mask, entail_logits
        )


def e2e_forward(model: E2eModel, batch: Batch):
    out = model(batch)
    return out.start_logits, out.end_logits, out.entail_logits, out.emotion_logits


def e2e_loss_terms(out: E2eOutput, batch: Batch, entail_weights=None, emotion_weights=None) -> dict[str, torch.Tensor]:
    dt = out.entail_logits.dtype
    return {
        "span": span_loss(out.start_logits, out.end_logits, batch.start_positions, batch.end_positions),
        "entail": F.cross_entropy(
            out.entail_logits, batch.entail_labels, weight=None if entail_weights is None else entail_weights.to(dt)
        ),
        "emotion": F.cross_entropy(
            out.emotion_logits, batch.emotion_ids, weight=None if emotion_weights is None else emotion_weights.to(dt)
        ),
    }


def e2e_loss(
    out: E2eOutput,
    batch: Batch,
    entail_weights: torch.Tensor | None = None,
    emotion_weights: torch.Tensor | None = None,
    terms: tuple[str, ...] = TERMS,
) -> torch.Tensor:
    """Unweighted sum L_span + L_entail + L_emotion over the selected ``terms``.

    Class weighting applies inside the entailment and emotion cross-entropies only.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    parts = e2e_loss_terms(out, batch, entail_weights, emotion_weights)
    total = None
    for name in TERMS:
        if name in terms:
            total = parts[name] if total is None else total + parts[name]
    if total is None:
        raise ValueError("at least one loss term is required")
    return total


@dataclass
class E2ePrediction:
    span: SpanPrediction
    entail: EntailPrediction
    emotion: EmotionPrediction

    @property
    def consistent(self) -> bool:
        return (self.entail.label == 1) == (not self.span.is_empty)


@torch.no_grad()
def e2e_predict(model: E2eModel, batch: Batch, k: int = 3) -> list[E2ePrediction]:
    spans, emotion_logits = cse_beam_infer(model, batch, k)
    was_training = model.training
    model.eval()
    try:
        states, _ = model.encode(batch)
        entail_logits = model.entail_head(states[:, 0])
    finally:
        model.train(was_training)
    entails = entail_predictions(entail_logits, emotion_logits)
    emo_probs = torch.softmax(emotion_logits, dim=-1)
    out = []
    for span, ent, p in zip(spans, entails, emo_probs):
        i = int(torch.argmax(p))
        out.append(E2ePrediction(span, ent, EmotionPrediction(CAUSE_EMOTIONS[i], float(p[i]))))
    return out
