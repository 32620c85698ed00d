import random

import pytest
import torch
import torch.nn.functional as F

from mutec.cse import (
    CseModel,
    CseOutput,
    MultiSampleDropout,
    beam_decode,
    cse_beam_infer,
    cse_loss,
    cse_loss_terms,
    span_loss,
)

import oracles
from conftest import toy_batch, toy_config
from mutec.runner import build_model


def _model_and_batch(samples, dtype=torch.float64, **overrides):
    small = dict(toy_dim=8, toy_layers=1, n_hidden_states=1, toy_vocab=128)
    cfg = toy_config("cse", **{**small, **overrides})
    tokenizer, model = build_model(cfg)
    model = model.to(dtype)
    return cfg, model, toy_batch("cse", samples, tokenizer)


# ---------------------------------------------------------------------------
# multi-sample dropout


def test_msd_eval_is_the_plain_linear_head():
    head = MultiSampleDropout(6, p=0.5, k=5).eval()
    x = torch.randn(2, 4, 6)
    assert torch.equal(head(x), head.linear(x).squeeze(-1))


def test_msd_single_pass_without_dropout_is_linear():
    head = MultiSampleDropout(6, p=0.0, k=1).train()
    x = torch.randn(2, 4, 6)
    assert torch.equal(head(x), head.linear(x).squeeze(-1))


def test_msd_training_matches_explicit_five_pass_oracle():
    head = MultiSampleDropout(6, p=0.5, k=5).train()
    x = torch.randn(3, 4, 6, dtype=torch.float64)
    head = head.double()
    torch.manual_seed(123)
    got = head(x)
    torch.manual_seed(123)
    W, b = head.linear.weight.detach(), head.linear.bias.detach()
    passes = [(F.dropout(x, 0.5, training=True) @ W.T + b).squeeze(-1) for _ in range(5)]
    want = sum(passes) / 5
    assert torch.allclose(got, want, rtol=0, atol=1e-12)
    # the masks really differ between passes
    assert not torch.equal(passes[0], passes[1])

    loss_head = MultiSampleDropout(6, p=0.5, k=5, aggregate="loss").double().train()
    loss_head.load_state_dict(head.state_dict())
    torch.manual_seed(123)
    stacked = loss_head(x)
    assert stacked.shape == (5, 3, 4)
    assert torch.allclose(stacked.mean(0), want, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# forward and loss


def test_head_shapes(fold_samples):
    cfg, model, batch = _model_and_batch(fold_samples)
    D = model.encoder.dim
    assert model.start_head.linear.in_features == D
    assert model.end_head.linear.in_features == 2 * D
    out = model(batch)
    B, T = batch.token_ids.shape
    assert out.start_logits.shape == out.end_logits.shape == (B, T)
    assert out.emotion_logits.shape == (B, 6)


def test_zero_heads_give_log_of_valid_positions(fold_samples):
    _, model, batch = _model_and_batch(fold_samples)
    with torch.no_grad():
        for head in (model.start_head, model.end_head):
            head.linear.weight.zero_()
            head.linear.bias.zero_()
    model.eval()
    out = model(batch)
    n_valid = batch.answer_mask.sum(1).double()
    expected = torch.log(n_valid).mean()
    assert torch.allclose(span_loss(out.start_logits, out.end_logits, batch.start_positions, batch.end_positions), expected, atol=1e-12)


def test_perfect_logits_give_zero_loss(fold_samples):
    _, model, batch = _model_and_batch(fold_samples)
    B, T = batch.token_ids.shape
    start = torch.full((B, T), -50.0, dtype=torch.float64)
    end = start.clone()
    start[torch.arange(B), batch.start_positions] = 50.0
    end[torch.arange(B), batch.end_positions] = 50.0
    emo = torch.full((B, 6), -50.0, dtype=torch.float64)
    emo[torch.arange(B), batch.emotion_ids] = 50.0
    out = CseOutput(start, end, emo, None, batch.answer_mask)
    assert cse_loss(out, batch).item() < 1e-30


def test_beta_zero_and_disabled_emotion_give_span_loss(fold_samples):
    _, model, batch = _model_and_batch(fold_samples)
    torch.manual_seed(0)
    out = model(batch)
    span = cse_loss_terms(out, batch)["span"]
    assert cse_loss(out, batch, beta=0.0).item() == span.item()
    disabled = cse_loss(out, batch, emotion_enabled=False)
    assert disabled.item() == span.item()
    model.zero_grad()
    disabled.backward()
    assert all(p.grad is None or not p.grad.any() for p in model.emotion_head.parameters())
    assert model.start_head.linear.weight.grad.abs().sum() > 0


def test_beta_scales_only_the_emotion_head_gradient(fold_samples):
    _, model, batch = _model_and_batch(fold_samples)

    def grads(beta):
        model.zero_grad()
        torch.manual_seed(5)
        cse_loss(model(batch), batch, beta=beta).backward()
        return (
            [p.grad.clone() for p in model.emotion_head.parameters()],
            [p.grad.clone() for p in model.start_head.parameters()],
        )

    emo1, start1 = grads(1.0)
    emo3, start3 = grads(3.0)
    for a, b in zip(emo1, emo3):
        assert torch.allclose(3 * a, b, rtol=1e-12, atol=1e-15)
    for a, b in zip(start1, start3):
        assert torch.equal(a, b)


def test_gold_start_out_of_range(fold_samples):
    _, model, batch = _model_and_batch(fold_samples)
    with pytest.raises(ValueError):
        model(batch, gold_starts=torch.full((len(batch),), batch.token_ids.shape[1]))


def test_cse_gradients_match_finite_differences(fold_samples):
    _, model, batch = _model_and_batch(fold_samples[:4])
    model.train()

    def loss_fn():
        torch.manual_seed(0)
        return cse_loss(model(batch), batch)

    params = {n: p for n, p in model.named_parameters() if not n.startswith("encoder.tok_emb")}
    rows = oracles.gradient_check(loss_fn, params, n_coords=4)
    assert oracles.pass_rate(rows) >= 0.95, [r for r in rows if r[-1] > 1e-4]


def test_msd_loss_aggregation_trains(fold_samples):
    _, model, batch = _model_and_batch(fold_samples, msd_aggregate="loss")
    model.train()
    out = model(batch)
    assert out.start_logits.dim() == 3
    loss = cse_loss(out, batch)
    assert torch.isfinite(loss)


# ---------------------------------------------------------------------------
# decoding


def _random_instance(rng, T=None):
    T = T or rng.randint(1, 12)
    start = [float(rng.randint(-3, 3)) if rng.random() < 0.5 else rng.gauss(0, 1) for _ in range(T)]
    table = [[float(rng.randint(-3, 3)) if rng.random() < 0.5 else rng.gauss(0, 1) for _ in range(T)] for _ in range(T)]
    valid = [True] + [rng.random() < 0.8 for _ in range(T - 1)]
    return start, table, valid


def test_beam_matches_exhaustive_search():
    rng = random.Random(0)
    for _ in range(300):
        start, table, valid = _random_instance(rng)
        T = len(start)
        k = rng.randint(1, T)
        max_len = rng.choice([1, 2, 200])
        pred = beam_decode(start, lambda ss: [table[s] for s in ss], k, max_len, valid)
        best = oracles.exhaustive_beam(start, table, k, max_len, valid)
        assert (pred.tok_start, pred.tok_end) == (best[1], best[2])
        assert pred.score == -best[0]


def test_beam_k1_is_greedy():
    rng = random.Random(1)
    for _ in range(200):
        start, table, valid = _random_instance(rng)
        pred = beam_decode(start, lambda ss: [table[s] for s in ss], 1, 200, valid)
        assert (pred.tok_start, pred.tok_end) == oracles.greedy(start, table, 200, valid)


def test_beam_score_is_monotone_in_k():
    rng = random.Random(2)
    for _ in range(100):
        start, table, _ = _random_instance(rng, T=rng.randint(2, 10))
        scores = [beam_decode(start, lambda ss: [table[s] for s in ss], k, 200).score for k in range(1, len(start) + 1)]
        assert all(a <= b for a, b in zip(scores, scores[1:]))
        assert scores[-1] == oracles.best_pair_score(start, table, len(start), 200)


def test_six_token_instance_with_k3():
    start = [0.1, 2.0, 1.9, -1.0, 1.8, 0.0]
    table = [[0.0] * 6 for _ in range(6)]
    table[1] = [0, -5, -5, -5, -5, -5]  # start 1 has no good end
    table[2] = [0, 0, 0.5, 3.0, 0, 0]
    table[4] = [0, 0, 0, 0, 0.2, 4.0]
    pred = beam_decode(start, lambda ss: [table[s] for s in ss], 3, 200)
    best = oracles.exhaustive_beam(start, table, 3, 200, [True] * 6)
    assert (pred.tok_start, pred.tok_end) == (best[1], best[2]) == (4, 5)
    assert (beam_decode(start, lambda ss: [table[s] for s in ss], 2, 200).tok_start) == 2


def test_start_mass_on_index_zero_gives_empty_span():
    start = [10.0, 0.0, 0.0, 0.0]
    table = [[0.0, 1.0, 2.0, 3.0]] * 4
    pred = beam_decode(start, lambda ss: [table[s] for s in ss], 1, 200)
    assert pred.is_empty and (pred.tok_start, pred.tok_end) == (0, 0)


def test_end_logits_depend_on_the_start(fold_samples):
    _, model, batch = _model_and_batch(fold_samples[:1])
    model.eval()
    states, _ = model.encode(batch)
    T = states.shape[1]
    a = model.end_logits(states, torch.tensor([1]), batch.answer_mask)
    b = model.end_logits(states, torch.tensor([T - 2]), batch.answer_mask)
    assert not torch.equal(a, b)


def test_cse_beam_infer_texts(fold_samples):
    _, model, batch = _model_and_batch(fold_samples)
    preds, emo = cse_beam_infer(model, batch, k=3)
    assert len(preds) == len(batch) and emo.shape == (len(batch), 6)
    for p, f in zip(preds, batch.features):
        if p.is_empty:
            assert p.text == ""
        else:
            s, e = p.char_span
            assert f.tok.input_text[s:e] == p.text
            assert f.answer_range[0] <= p.tok_start <= p.tok_end < f.answer_range[1]
