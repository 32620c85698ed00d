"""Shared fixtures: the worked dialogue, small synthetic folds and toy-sized models."""

from __future__ import annotations

import pytest
import torch

from mutec.config import RunConfig
from mutec.data import Dialogue, Emotion, FoldSpec, Utterance, build_fold
from mutec.features import collate, featurize
from mutec.runner import build_model
from mutec.synthetic import make_synthetic_dialogues

OFFICER_TEXTS = [
    "What's wrong, officer?",
    "You do realize that you ran a red light, don't you?",
    "I did?",
]


def officer_dialogue() -> Dialogue:
    emotions = [Emotion.NEUTRAL, Emotion.NEUTRAL, Emotion.SURPRISE]
    utts = [Utterance(i, "AB"[i % 2], t, e) for i, (t, e) in enumerate(zip(OFFICER_TEXTS, emotions))]
    return Dialogue("dd_fig", utts, {2: [(1, "you ran a red light")]})


def toy_config(task: str, **overrides) -> RunConfig:
    """Desk-sized configuration: D=32, two layers, short sequences."""
    base = dict(
        task=task,
        toy_dim=32,
        toy_layers=2,
        toy_heads=2,
        toy_vocab=512,
        n_hidden_states=2,
        bilstm_hidden=16,
        max_seq_len=96,
        epochs=150,
        batch_size=10,
        lr=3e-3,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def ten_sample_fold():
    """Ten Fold1 samples (positives and negatives) from four synthetic dialogues."""
    return build_fold(make_synthetic_dialogues(4, seed=1), FoldSpec(1))[:10]


def toy_batch(task: str, samples, tokenizer, max_len: int = 96):
    return collate([featurize(s, task, tokenizer, max_len) for s in samples])


@pytest.fixture
def officer():
    return officer_dialogue()


@pytest.fixture
def synthetic_dialogues():
    return make_synthetic_dialogues(60, seed=3)


@pytest.fixture
def fold_samples():
    return ten_sample_fold()


@pytest.fixture
def toy_model():
    def make(task: str, **overrides):
        cfg = toy_config(task, **overrides)
        tokenizer, model = build_model(cfg)
        return cfg, tokenizer, model

    return make


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    n = marker.kwargs["criterion"]
    _ACCEPTANCE[n] = ("PASS" if report.passed else "FAIL", marker.kwargs.get("title", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
