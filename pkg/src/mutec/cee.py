"""Causal emotion entailment with an emotion-aware BiLSTM stack over encoder states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence, pad_sequence

from .data import CAUSE_EMOTIONS, Emotion
from .encoder import ConfigurationError, meanpool_layers
from .features import Batch, SampleError


class WeightingError(ValueError):
    pass


def inverse_class_weights(counts: Sequence[int], allow_missing: bool = False) -> torch.Tensor:
    """Weights proportional to 1 / count, scaled so they average to 1 over the weighted classes.

    A zero count is an error unless ``allow_missing``, in which case the class gets weight 0.
    """
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise WeightingError("class counts must be non-negative")
    present = [c for c in counts if c > 0]
    if not present or (len(present) < len(counts) and not allow_missing):
        raise WeightingError(f"degenerate fold: zero-count class in {counts}")
    inv = [1.0 / c if c > 0 else 0.0 for c in counts]
    scale = len(present) / sum(inv)
    return torch.tensor([w * scale for w in inv], dtype=torch.float64)


def _masked_mean(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    T = x.shape[1]
    mask = (torch.arange(T)[None, :] < lengths[:, None]).to(x.dtype)
    return (x * mask[..., None]).sum(1) / lengths[:, None].to(x.dtype)


def _run_lstm(lstm: nn.LSTM, seqs: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs])
    padded = pad_sequence(seqs, batch_first=True)
    packed = pack_padded_sequence(padded, lengths, batch_first=True, enforce_sorted=False)
    out, _ = lstm(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=padded.shape[1])
    return out, lengths


@dataclass
class CeeOutput:
    entail_logits: torch.Tensor  # (B, 2)
    emotion_logits: torch.Tensor  # (B, E)
    features: torch.Tensor  # (B, 3D) = [pool ; H_t ; H_i]
    target_repr: torch.Tensor  # (B, D)


@dataclass
class EntailPrediction:
    label: int
    prob: float  # softmax probability of the positive (entailed) class
    aux_emotion: Emotion


class CeeModel(nn.Module):
    def __init__(
        self,
        encoder: nn.Module,
        n_emotions: int = 6,
        n_hidden_states: int = 4,
        lstm_hidden: int | None = None,
        dropout: float = 0.1,
    ):
        super().__init__()
        D = encoder.dim
        H = lstm_hidden if lstm_hidden is not None else D // 2
        if 2 * H != D:
            raise ConfigurationError(f"BiLSTM output width 2*{H} must equal encoder width {D}")
        if n_hidden_states > encoder.n_layers:
            raise ConfigurationError(
                f"n_hidden_states={n_hidden_states} exceeds the encoder's {encoder.n_layers} layers"
            )
        self.encoder = encoder
        self.n_hidden_states = n_hidden_states
        self.lstm_em = nn.LSTM(D, H, batch_first=True, bidirectional=True)
        self.lstm_ca = nn.LSTM(D, H, batch_first=True, bidirectional=True)
        self.emotion_head = nn.Linear(D, n_emotions)
        self.entail_head = nn.Sequential(nn.Linear(3 * D, D), nn.Tanh(), nn.Dropout(dropout), nn.Linear(D, 2))
        self.dropout = nn.Dropout(dropout)

    def forward(self, batch: Batch) -> CeeOutput:
        out = self.encoder(batch.token_ids, batch.attention_mask)
        states = meanpool_layers(out.layer_states, self.n_hidden_states)
        t_seqs, i_seqs = [], []
        for b in range(len(batch)):
            ts, te = batch.target_ranges[b].tolist()
            cs, ce = batch.candidate_ranges[b].tolist()
            if te <= ts:
                raise SampleError(f"sample {b}: empty target utterance token range")
            t_seqs.append(states[b, ts:te])
            i_seqs.append(states[b, cs:ce])

        em_out, t_len = _run_lstm(self.lstm_em, t_seqs)
        h_t = _masked_mean(em_out, t_len)
        # time-axis concatenation of the emotion-BiLSTM outputs with the candidate's states
        ca_in = [torch.cat([em_out[b, : t_len[b]], i_seqs[b]], dim=0) for b in range(len(batch))]
        ca_out, ca_len = _run_lstm(self.lstm_ca, ca_in)
        h_i = _masked_mean(ca_out, ca_len)

        x = torch.cat([out.pooled, h_t, h_i], dim=-1)
        entail_logits = self.entail_head(self.dropout(x))
        emotion_logits = self.emotion_head(self.dropout(h_t))
        return CeeOutput(entail_logits, emotion_logits, x, h_t)


def cee_loss_terms(out: CeeOutput, batch: Batch, entail_weights=None, emotion_weights=None) -> dict[str, torch.Tensor]:
    dt = out.entail_logits.dtype
    ew = entail_weights.to(dt) if entail_weights is not None else None
    mw = emotion_weights.to(dt) if emotion_weights is not None else None
    return {
        "entail": F.cross_entropy(out.entail_logits, batch.entail_labels, weight=ew),
        "emotion": F.cross_entropy(out.emotion_logits, batch.emotion_ids, weight=mw),
    }


def cee_loss(
    out: CeeOutput,
    batch: Batch,
    entail_weights: torch.Tensor | None = None,
    emotion_weights: torch.Tensor | None = None,
    beta: float = 1.0,
    emotion_enabled: bool = True,
) -> torch.Tensor:
    """Weighted L_entail + beta * weighted L_emotion."""
    dt = out.entail_logits.dtype
    ew = entail_weights.to(dt) if entail_weights is not None else None
    loss = F.cross_entropy(out.entail_logits, batch.entail_labels, weight=ew)
    if emotion_enabled:
        mw = emotion_weights.to(dt) if emotion_weights is not None else None
        loss = loss + beta * F.cross_entropy(out.emotion_logits, batch.emotion_ids, weight=mw)
    return loss


def entail_predictions(entail_logits: torch.Tensor, emotion_logits: torch.Tensor) -> list[EntailPrediction]:
    probs = torch.softmax(entail_logits, dim=-1)
    # argmax returns the first maximal index, so exact ties go to label 0
    labels = torch.argmax(entail_logits, dim=-1)
    emos = torch.argmax(emotion_logits, dim=-1)
    return [
        EntailPrediction(int(l), float(p[1]), CAUSE_EMOTIONS[int(e)])
        for l, p, e in zip(labels, probs, emos)
    ]


@torch.no_grad()
def cee_predict(model: CeeModel, batch: Batch) -> list[EntailPrediction]:
    was_training = model.training
    model.eval()
    try:
        out = model(batch)
    finally:
        model.train(was_training)
    return entail_predictions(out.entail_logits, out.emotion_logits)
