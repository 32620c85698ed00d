"""Span and entailment metrics: EM_pos, token F1_pos, empty-span F1_neg, overall F1, class-wise F1.

Counts are accumulated as exact fractions and converted to float at the end.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(s: str, drop_articles: bool = False) -> str:
    """Lowercase, strip punctuation, optionally drop articles, collapse whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    if drop_articles:
        s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _f1_fraction(gold: str, pred: str, drop_articles: bool = False) -> tuple[Fraction, Fraction, Fraction]:
    g = normalize_answer(gold, drop_articles).split()
    p = normalize_answer(pred, drop_articles).split()
    if not g or not p:
        # nothing left after normalization: agreement iff both sides are empty
        v = Fraction(int(g == p))
        return v, v, v
    same = sum((Counter(g) & Counter(p)).values())
    if same == 0:
        return Fraction(0), Fraction(0), Fraction(0)
    prec = Fraction(same, len(p))
    rec = Fraction(same, len(g))
    return prec, rec, 2 * prec * rec / (prec + rec)


def token_f1(gold_text: str, pred_text: str, drop_articles: bool = False) -> tuple[float, float, float]:
    """(precision, recall, F1) over the multiset of normalized tokens."""
    return tuple(float(x) for x in _f1_fraction(gold_text, pred_text, drop_articles))


@dataclass(frozen=True)
class SpanEvalRecord:
    gold_text: str
    pred_text: str

    @property
    def is_positive(self) -> bool:
        return bool(self.gold_text)


def _is_empty(text: str) -> bool:
    return not text.strip()


def _em(r: SpanEvalRecord, drop_articles: bool) -> bool:
    return normalize_answer(r.pred_text, drop_articles) == normalize_answer(r.gold_text, drop_articles)


def em_pos(records: Iterable[SpanEvalRecord], drop_articles: bool = False) -> float | None:
    pos = [r for r in records if r.is_positive]
    if not pos:
        return None
    return float(Fraction(sum(_em(r, drop_articles) for r in pos), len(pos)))


def f1_pos(records: Iterable[SpanEvalRecord], drop_articles: bool = False) -> float | None:
    pos = [r for r in records if r.is_positive]
    if not pos:
        return None
    return float(sum((_f1_fraction(r.gold_text, r.pred_text, drop_articles)[2] for r in pos), Fraction(0)) / len(pos))


def _neg_counts(records: Sequence[SpanEvalRecord]) -> tuple[int, int, int]:
    same = sum(1 for r in records if not r.is_positive and _is_empty(r.pred_text))
    predicted = sum(1 for r in records if _is_empty(r.pred_text))
    gold = sum(1 for r in records if not r.is_positive)
    return same, predicted, gold


def f1_neg_detail(records: Iterable[SpanEvalRecord]) -> tuple[float, list[str]]:
    records = list(records)
    same, predicted, gold = _neg_counts(records)
    flags = []
    if predicted == 0:
        flags.append("f1_neg: no empty predictions, precision undefined")
        return 0.0, flags
    if gold == 0:
        flags.append("f1_neg: no negative records")
        return 0.0, flags
    if same == 0:
        return 0.0, flags
    p = Fraction(same, predicted)
    r = Fraction(same, gold)
    return float(2 * p * r / (p + r)), flags


def f1_neg(records: Iterable[SpanEvalRecord]) -> float:
    value, flags = f1_neg_detail(records)
    for f in flags:
        logger.warning(f)
    return value


def _record_f1(r: SpanEvalRecord, drop_articles: bool) -> Fraction:
    if r.is_positive:
        return _f1_fraction(r.gold_text, r.pred_text, drop_articles)[2]
    return Fraction(1 if _is_empty(r.pred_text) else 0)


def f1_overall(records: Iterable[SpanEvalRecord], drop_articles: bool = False, mode: str = "per_record") -> float | None:
    """Overall F1.

    ``per_record``: mean over all records of the per-record score (token F1 for
    positives, 1/0 empty-agreement for negatives). ``class_mean``: (F1_pos + F1_neg) / 2.
    """
    records = list(records)
    if not records:
        return None
    if mode == "per_record":
        return float(sum((_record_f1(r, drop_articles) for r in records), Fraction(0)) / len(records))
    if mode == "class_mean":
        fp = f1_pos(records, drop_articles)
        fn, _ = f1_neg_detail(records)
        return ((fp or 0.0) + fn) / 2
    raise ValueError(f"unknown overall F1 mode {mode!r}")


@dataclass
class EntailMetrics:
    f1_pos: float
    f1_neg: float
    macro_f1: float
    flags: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter((self.f1_pos, self.f1_neg, self.macro_f1))


def _class_f1(gold: Sequence[int], pred: Sequence[int], cls: int) -> Fraction:
    tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
    fp = sum(1 for g, p in zip(gold, pred) if g != cls and p == cls)
    fn = sum(1 for g, p in zip(gold, pred) if g == cls and p != cls)
    if tp == 0:
        return Fraction(0)
    return Fraction(2 * tp, 2 * tp + fp + fn)


def entail_metrics(gold_labels: Sequence[int], pred_labels: Sequence[int]) -> EntailMetrics:
    """Per-class F1 with each class taken as the true class in turn, plus their unweighted mean."""
    gold = [int(g) for g in gold_labels]
    pred = [int(p) for p in pred_labels]
    if len(gold) != len(pred):
        raise ValueError("gold and predicted label sequences differ in length")
    flags = [f"class {c} absent from gold labels; its F1 is 0" for c in (1, 0) if c not in gold]
    fp = _class_f1(gold, pred, 1)
    fn = _class_f1(gold, pred, 0)
    return EntailMetrics(float(fp), float(fn), float((fp + fn) / 2), flags)


def accuracy(gold: Sequence, pred: Sequence) -> float | None:
    if not gold:
        return None
    return float(Fraction(sum(1 for g, p in zip(gold, pred) if g == p), len(gold)))


@dataclass
class MetricsReport:
    em_pos: float | None = None
    f1_pos: float | None = None
    f1_neg: float | None = None
    f1_overall: float | None = None
    macro_f1: float | None = None
    emotion_acc: float | None = None
    n_records: int = 0
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("em_pos", "f1_pos", "f1_neg", "f1_overall", "macro_f1", "emotion_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self, columns: Sequence[str] | None = None) -> str:
        names = {
            "em_pos": "EM_pos",
            "f1_pos": "F1_pos",
            "f1_neg": "F1_neg",
            "f1_overall": "F1",
            "macro_f1": "macro F1",
            "emotion_acc": "Emotion Acc",
        }
        cols = columns or [c for c in names if getattr(self, c) is not None]
        head = " | ".join(f"{names[c]:>11}" for c in cols)
        row = " | ".join(f"{100 * getattr(self, c):>11.2f}" for c in cols)
        return f"{head}\n{'-' * len(head)}\n{row}\n"


def span_report(
    records: Sequence[SpanEvalRecord],
    emotion_gold: Sequence | None = None,
    emotion_pred: Sequence | None = None,
    drop_articles: bool = False,
    overall_mode: str = "per_record",
) -> MetricsReport:
    neg, flags = f1_neg_detail(records)
    return MetricsReport(
        em_pos=em_pos(records, drop_articles),
        f1_pos=f1_pos(records, drop_articles),
        f1_neg=neg,
        f1_overall=f1_overall(records, drop_articles, overall_mode),
        emotion_acc=accuracy(emotion_gold, emotion_pred) if emotion_gold is not None else None,
        n_records=len(records),
        flags=flags,
    )


def entail_report(gold, pred, emotion_gold=None, emotion_pred=None) -> MetricsReport:
    m = entail_metrics(gold, pred)
    return MetricsReport(
        f1_pos=m.f1_pos,
        f1_neg=m.f1_neg,
        macro_f1=m.macro_f1,
        emotion_acc=accuracy(emotion_gold, emotion_pred) if emotion_gold is not None else None,
        n_records=len(gold),
        flags=m.flags,
    )
