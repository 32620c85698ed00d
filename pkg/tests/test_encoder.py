import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mutec.config import RunConfig
from mutec.cse import CseModel
from mutec.data import FoldSpec, build_fold
from mutec.encoder import (
    CLS_ID,
    EOS_ID,
    SEP_ID,
    ConfigurationError,
    SpanLostError,
    ToyEncoder,
    ToyTokenizer,
    build_encoder,
    char_span_to_token_span,
    encode,
    meanpool_layers,
)
from mutec.features import featurize


def scan_words(text):
    """Offset oracle: maximal runs of non-space characters."""
    spans, start = [], None
    for i, ch in enumerate(text + " "):
        if ch.isspace():
            if start is not None:
                spans.append((start, i))
                start = None
        elif start is None:
            start = i
    return spans


def covering_interval(offsets, span):
    """Brute force over all token intervals: the shortest one covering every token character in ``span``."""
    s, e = span
    real = [i for i, o in enumerate(offsets) if o != (-1, -1)]
    needed = {c for i in real for c in range(*offsets[i]) if s <= c < e}
    best = None
    for a in real:
        for b in real:
            if b < a:
                continue
            covered = {c for i in real if a <= i <= b for c in range(*offsets[i])}
            if needed <= covered and (best is None or b - a < best[1] - best[0]):
                best = (a, b)
    return best


def test_offsets_match_string_scan():
    text = "you ran a red light"
    tok = ToyTokenizer()(text)
    assert tok.char_offsets[1:-1] == scan_words(text) == [(0, 3), (4, 7), (8, 9), (10, 13), (14, 19)]
    assert tok.token_ids[0] == CLS_ID and tok.token_ids[-1] == EOS_ID
    assert [tok.input_text[s:e] for s, e in tok.char_offsets[1:-1]] == text.split()


def test_punctuation_and_separator():
    tok = ToyTokenizer()("I did?. you <SEP> ok")
    surfaces = [tok.input_text[s:e] if (s, e) != (-1, -1) else None for s, e in tok.char_offsets]
    assert surfaces == [None, "I", "did", "?", ".", "you", None, "ok", None]
    assert tok.token_ids[6] == SEP_ID


def test_token_ids_are_deterministic_and_case_folded():
    a, b = ToyTokenizer(1000), ToyTokenizer(1000)
    assert a("Red light").token_ids == b("red LIGHT").token_ids
    assert all(0 <= i < 1000 for i in a("a b c d e f g").token_ids)


def test_truncation_keeps_target_tokens(officer):
    samples = build_fold([officer], FoldSpec(1))
    neg = next(s for s in samples if not s.entail_label)
    tokenizer = ToyTokenizer()
    feat = featurize(neg, "cse", tokenizer, max_len=6)
    assert feat.tok.truncated
    assert feat.target_range[1] > feat.target_range[0]
    assert feat.answer_range == (0, 0)


def test_sequence_length_defaults():
    assert RunConfig(with_context=False).seq_len == 200
    assert RunConfig(with_context=True).seq_len == 512


def test_layer_request_beyond_encoder_depth():
    tokenizer, enc = build_encoder("toy", dim=16, n_layers=2, n_heads=2)
    tok = tokenizer("hello there")
    with pytest.raises(ConfigurationError):
        encode(enc, tok, 4)
    with pytest.raises(ConfigurationError):
        CseModel(enc, n_hidden_states=4)
    with pytest.raises(ConfigurationError):
        build_encoder("bert-base")


def test_encoding_is_bitwise_deterministic():
    tokenizer, enc = build_encoder("toy", dim=16, n_layers=2, n_heads=2, seed=7)
    _, enc2 = build_encoder("toy", dim=16, n_layers=2, n_heads=2, seed=7)
    enc.eval(), enc2.eval()
    tok = tokenizer("you ran a red light")
    a, b, c = encode(enc, tok, 2), encode(enc, tok, 2), encode(enc2, tok, 2)
    assert torch.equal(a.meanpooled_states, b.meanpooled_states)
    assert torch.equal(a.meanpooled_states, c.meanpooled_states)
    assert torch.equal(a.pooled, c.pooled)
    assert a.meanpooled_states.shape == (1, len(tok), 16)


def test_mean_of_identical_layers():
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    for L in (1, 2, 3, 4, 12):
        assert torch.allclose(meanpool_layers([x] * L, L), x, rtol=0, atol=1e-15)


def test_meanpool_linearity_under_single_layer_perturbation():
    layers = [torch.randn(1, 6, 8, dtype=torch.float64) for _ in range(5)]
    K = 4
    base = meanpool_layers(layers, K)
    delta = torch.randn(1, 6, 8, dtype=torch.float64)
    for j in range(len(layers) - K, len(layers)):
        moved = list(layers)
        moved[j] = moved[j] + delta
        assert torch.allclose(meanpool_layers(moved, K) - base, delta / K, atol=1e-12)
    # a layer outside the pooled window has no effect
    moved = list(layers)
    moved[0] = moved[0] + delta
    assert torch.equal(meanpool_layers(moved, K), base)


def test_toy_encoder_layer_states():
    enc = ToyEncoder(vocab_size=64, dim=8, n_layers=3, n_heads=2)
    out = enc(torch.tensor([[1, 5, 6, 3, 0]]), torch.tensor([[1, 1, 1, 1, 0]]))
    assert out.n_layers == 3 and out.pooled.shape == (1, 8)
    assert all(s.shape == (1, 5, 8) for s in out.layer_states)


def test_char_span_examples():
    tok = ToyTokenizer()("you ran a red light")
    assert char_span_to_token_span(tok, (0, 0)) == (0, 0)
    assert char_span_to_token_span(tok, (4, 7)) == (2, 2)
    assert char_span_to_token_span(tok, (5, 9)) == (2, 3)
    assert char_span_to_token_span(tok, (4, 19)) == (2, 5)


def test_span_in_truncated_tail():
    tok = ToyTokenizer()("you ran a red light", max_len=4)
    assert tok.covered_until == 7
    assert char_span_to_token_span(tok, (4, 7)) == (2, 2)
    with pytest.raises(SpanLostError):
        char_span_to_token_span(tok, (10, 19))


_WORDS = st.sampled_from(["you", "ran", "a", "red", "light", ",", "?", "don't", "I", "<SEP>", "officer", "."])


@settings(max_examples=200, deadline=None)
@given(words=st.lists(_WORDS, min_size=1, max_size=12), data=st.data())
def test_char_span_matches_brute_force(words, data):
    text = " ".join(words)
    tok = ToyTokenizer()(text)
    real = [o for o in tok.char_offsets if o != (-1, -1)]
    if not real:
        return
    chars = sorted({c for s, e in real for c in range(s, e)})
    s = data.draw(st.sampled_from(chars))
    last = data.draw(st.sampled_from([c for c in chars if c >= s]))
    span = (s, last + 1)
    got = char_span_to_token_span(tok, span)
    assert got == covering_interval(tok.char_offsets, span)
    # offset consistency: mapping back gives a char range containing the span
    lo, hi = tok.char_offsets[got[0]][0], tok.char_offsets[got[1]][1]
    assert lo <= span[0] and span[1] <= hi
