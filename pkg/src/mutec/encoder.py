"""Encoder contract: offset-tracking tokenization, per-layer hidden states and layer mean-pooling.

The toy encoder is a small seeded transformer used for desk-scale training and
tests. Any pretrained model exposing per-layer states can be plugged in through
:class:`PretrainedEncoder`.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

PAD_ID, CLS_ID, SEP_ID, EOS_ID = 0, 1, 2, 3
N_SPECIAL = 4
SPECIAL_OFFSET = (-1, -1)

_TOKEN_RE = re.compile(r"<SEP>|\w+|[^\w\s]")


class ConfigurationError(ValueError):
    pass


class SpanLostError(ValueError):
    """The gold span lies (partly) in the truncated tail of the input."""


@dataclass
class TokenizedInput:
    input_text: str
    token_ids: list[int]
    attention_mask: list[int]
    char_offsets: list[tuple[int, int]]
    segment_spans: dict[str, tuple[int, int] | None] = field(default_factory=dict)
    truncated: bool = False
    # char position where the kept text ends (len(input_text) when not truncated)
    covered_until: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)

    def is_special(self, i: int) -> bool:
        return self.char_offsets[i] == SPECIAL_OFFSET

    def token_range(self, char_range: tuple[int, int] | None) -> tuple[int, int]:
        """Half-open token index range of non-special tokens lying inside ``char_range``."""
        if char_range is None:
            return (0, 0)
        lo, hi = char_range
        idx = [i for i, (s, e) in enumerate(self.char_offsets) if s >= lo and e <= hi and (s, e) != SPECIAL_OFFSET]
        if not idx:
            return (0, 0)
        return idx[0], idx[-1] + 1

    def token_text(self, start: int, end: int) -> str:
        """Surface text covered by tokens ``start..end`` (inclusive); empty for the null span."""
        if start == 0 and end == 0:
            return ""
        s = self.char_offsets[start][0]
        e = self.char_offsets[end][1]
        if s < 0 or e < 0:
            return ""
        return self.input_text[s:e]


class ToyTokenizer:
    """Whitespace + punctuation tokenizer with hashed vocabulary ids.

    ``<SEP>`` in the text becomes the separator special token. Sequences are
    framed as ``[CLS] ... [EOS]`` so index 0 is always the null-span position.
    """

    def __init__(self, vocab_size: int = 8192):
        if vocab_size <= N_SPECIAL:
            raise ConfigurationError("vocab_size too small")
        self.vocab_size = vocab_size

    def token_id(self, surface: str) -> int:
        if surface == "<SEP>":
            return SEP_ID
        return N_SPECIAL + zlib.crc32(surface.lower().encode("utf-8")) % (self.vocab_size - N_SPECIAL)

    def __call__(
        self,
        input_text: str,
        max_len: int = 512,
        segments: dict[str, tuple[int, int] | None] | None = None,
    ) -> TokenizedInput:
        if not input_text:
            raise ValueError("input_text must be non-empty")
        if max_len < 3:
            raise ConfigurationError("max_len must leave room for at least one token")
        matches = list(_TOKEN_RE.finditer(input_text))
        keep = matches[: max_len - 2]
        ids = [CLS_ID]
        offsets = [SPECIAL_OFFSET]
        for m in keep:
            ids.append(self.token_id(m.group()))
            offsets.append(SPECIAL_OFFSET if m.group() == "<SEP>" else (m.start(), m.end()))
        ids.append(EOS_ID)
        offsets.append(SPECIAL_OFFSET)
        truncated = len(keep) < len(matches)
        covered = keep[-1].end() if (truncated and keep) else len(input_text)
        return TokenizedInput(
            input_text=input_text,
            token_ids=ids,
            attention_mask=[1] * len(ids),
            char_offsets=offsets,
            segment_spans=dict(segments or {}),
            truncated=truncated,
            covered_until=covered,
        )


def tokenize(input_text: str, max_len: int = 512, segments=None, tokenizer=None) -> TokenizedInput:
    tokenizer = tokenizer or ToyTokenizer()
    return tokenizer(input_text, max_len, segments)


def char_span_to_token_span(tok: TokenizedInput, span: tuple[int, int]) -> tuple[int, int]:
    """Smallest inclusive token interval whose characters cover ``span``; the empty span maps to (0, 0)."""
    s, e = span
    if s == e:
        return (0, 0)
    if e > tok.covered_until:
        raise SpanLostError(f"span {span} extends past the truncated input (kept up to char {tok.covered_until})")
    first = last = None
    for i, (ts, te) in enumerate(tok.char_offsets):
        if (ts, te) == SPECIAL_OFFSET:
            continue
        if te > s and ts < e:
            if first is None:
                first = i
            last = i
    if first is None:
        raise ValueError(f"span {span} covers no token")
    return first, last


# ---------------------------------------------------------------------------
# encoders


@dataclass
class EncoderOutput:
    pooled: torch.Tensor  # (B, D)
    layer_states: tuple[torch.Tensor, ...]  # L x (B, T, D)
    meanpooled_states: torch.Tensor | None = None  # (B, T, D)

    @property
    def n_layers(self) -> int:
        return len(self.layer_states)


def meanpool_layers(layer_states: Sequence[torch.Tensor], n_hidden_states: int) -> torch.Tensor:
    """Arithmetic mean of the last ``n_hidden_states`` layers."""
    if n_hidden_states < 1:
        raise ConfigurationError("n_hidden_states must be >= 1")
    if n_hidden_states > len(layer_states):
        raise ConfigurationError(
            f"requested mean over {n_hidden_states} layers but the encoder has {len(layer_states)}"
        )
    return torch.stack(tuple(layer_states[-n_hidden_states:]), dim=0).mean(dim=0)


class _Block(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, n_heads, dropout=0.0, batch_first=True)
        self.ln1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        a, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.ln1(x + a)
        return self.ln2(x + self.ff(x))


class ToyEncoder(nn.Module):
    """Seeded embedding table + a few self-attention layers + a tanh pooler on position 0."""

    def __init__(
        self,
        vocab_size: int = 8192,
        dim: int = 32,
        n_layers: int = 2,
        n_heads: int = 2,
        max_positions: int = 512,
        seed: int = 0,
    ):
        super().__init__()
        if dim % n_heads:
            raise ConfigurationError("dim must be divisible by n_heads")
        self.dim = dim
        self.n_layers = n_layers
        self.max_positions = max_positions
        gen = torch.Generator().manual_seed(seed)
        self.tok_emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(max_positions, dim)
        with torch.no_grad():
            self.tok_emb.weight.copy_(torch.randn(vocab_size, dim, generator=gen) * 0.5)
            self.tok_emb.weight[PAD_ID].zero_()
            self.pos_emb.weight.copy_(torch.randn(max_positions, dim, generator=gen) * 0.1)
        self.emb_ln = nn.LayerNorm(dim)
        self.blocks = nn.ModuleList(_Block(dim, n_heads) for _ in range(n_layers))
        self.pooler = nn.Linear(dim, dim)

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> EncoderOutput:
        T = token_ids.shape[1]
        if T > self.max_positions:
            raise ConfigurationError(f"sequence length {T} exceeds max_positions {self.max_positions}")
        pos = torch.arange(T, device=token_ids.device)
        x = self.emb_ln(self.tok_emb(token_ids) + self.pos_emb(pos)[None])
        pad_mask = attention_mask == 0
        states = []
        for block in self.blocks:
            x = block(x, pad_mask)
            states.append(x)
        pooled = torch.tanh(self.pooler(x[:, 0]))
        return EncoderOutput(pooled=pooled, layer_states=tuple(states))


class PretrainedEncoder(nn.Module):
    """Thin adapter over a Hugging Face encoder (``external:<name>``)."""

    def __init__(self, name: str):
        super().__init__()
        from transformers import AutoModel

        self.model = AutoModel.from_pretrained(name)
        self.dim = self.model.config.hidden_size
        self.n_layers = self.model.config.num_hidden_layers

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> EncoderOutput:
        out = self.model(input_ids=token_ids, attention_mask=attention_mask, output_hidden_states=True)
        pooled = out.pooler_output if getattr(out, "pooler_output", None) is not None else out.last_hidden_state[:, 0]
        # hidden_states[0] is the embedding output
        return EncoderOutput(pooled=pooled, layer_states=tuple(out.hidden_states[1:]))


class PretrainedTokenizer:
    def __init__(self, name: str):
        from transformers import AutoTokenizer

        self.tok = AutoTokenizer.from_pretrained(name)

    def __call__(self, input_text: str, max_len: int = 512, segments=None) -> TokenizedInput:
        enc = self.tok(
            input_text,
            truncation=True,
            max_length=max_len,
            return_offsets_mapping=True,
            return_special_tokens_mask=True,
        )
        offsets = [
            SPECIAL_OFFSET if special else tuple(o)
            for o, special in zip(enc["offset_mapping"], enc["special_tokens_mask"])
        ]
        real = [o for o in offsets if o != SPECIAL_OFFSET]
        covered = real[-1][1] if real else 0
        truncated = covered < len(input_text.rstrip())
        return TokenizedInput(
            input_text=input_text,
            token_ids=list(enc["input_ids"]),
            attention_mask=list(enc["attention_mask"]),
            char_offsets=offsets,
            segment_spans=dict(segments or {}),
            truncated=truncated,
            covered_until=covered if truncated else len(input_text),
        )


def build_encoder(
    key: str = "toy",
    *,
    dim: int = 32,
    n_layers: int = 2,
    n_heads: int = 2,
    vocab_size: int = 8192,
    max_positions: int = 512,
    seed: int = 0,
):
    """Return ``(tokenizer, encoder)`` for a config key ``toy`` or ``external:<name>``."""
    if key == "toy":
        torch.manual_seed(seed)
        enc = ToyEncoder(vocab_size, dim, n_layers, n_heads, max_positions, seed)
        return ToyTokenizer(vocab_size), enc
    if key.startswith("external:"):
        name = key.split(":", 1)[1]
        return PretrainedTokenizer(name), PretrainedEncoder(name)
    raise ConfigurationError(f"unknown encoder key {key!r}")


def encode(encoder: nn.Module, tok: TokenizedInput, n_hidden_states: int) -> EncoderOutput:
    """Encode a single tokenized input and attach the layer mean-pool (batch dim kept at 1)."""
    if n_hidden_states > encoder.n_layers:
        raise ConfigurationError(
            f"requested mean over {n_hidden_states} layers but the encoder has {encoder.n_layers}"
        )
    ids = torch.tensor([tok.token_ids])
    mask = torch.tensor([tok.attention_mask])
    out = encoder(ids, mask)
    out.meanpooled_states = meanpool_layers(out.layer_states, n_hidden_states)
    return out
