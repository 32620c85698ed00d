"""RECCON-style dialogue ingestion, fold construction and model-input formatting."""

from __future__ import annotations

import json
import logging
import random
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

SEP = "<SEP>"


class Emotion(str, Enum):
    HAPPINESS = "happiness"
    SURPRISE = "surprise"
    ANGER = "anger"
    SADNESS = "sadness"
    DISGUST = "disgust"
    FEAR = "fear"
    NEUTRAL = "neutral"


# classes predicted by the auxiliary emotion heads; targets are never neutral
CAUSE_EMOTIONS: tuple[Emotion, ...] = (
    Emotion.HAPPINESS,
    Emotion.SURPRISE,
    Emotion.ANGER,
    Emotion.SADNESS,
    Emotion.DISGUST,
    Emotion.FEAR,
)
EMOTION_TO_ID = {e: i for i, e in enumerate(CAUSE_EMOTIONS)}

_DD_ALIASES = {
    "happiness": Emotion.HAPPINESS,
    "happines": Emotion.HAPPINESS,
    "happy": Emotion.HAPPINESS,
    "surprise": Emotion.SURPRISE,
    "surprised": Emotion.SURPRISE,
    "anger": Emotion.ANGER,
    "angry": Emotion.ANGER,
    "sadness": Emotion.SADNESS,
    "sad": Emotion.SADNESS,
    "disgust": Emotion.DISGUST,
    "disgusted": Emotion.DISGUST,
    "fear": Emotion.FEAR,
    "fearful": Emotion.FEAR,
    "neutral": Emotion.NEUTRAL,
}

_IEMOCAP_MAP = {
    "happy": Emotion.HAPPINESS,
    "excited": Emotion.HAPPINESS,
    "anger": Emotion.ANGER,
    "angry": Emotion.ANGER,
    "frustrated": Emotion.ANGER,
    "sadness": Emotion.SADNESS,
    "sad": Emotion.SADNESS,
    "neutral": Emotion.NEUTRAL,
}


class CorpusError(ValueError):
    """Malformed corpus record."""

    def __init__(self, message: str, dialogue_id: str | None = None):
        self.dialogue_id = dialogue_id
        if dialogue_id is not None:
            message = f"dialogue {dialogue_id!r}: {message}"
        super().__init__(message)


class AnnotationError(CorpusError):
    """A cause annotation is inconsistent with the dialogue text."""


class EmotionMappingError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


def map_iemocap_emotion(raw: str) -> Emotion:
    """Map a raw IEMOCAP label onto the shared inventory (excited->happiness, frustrated->anger)."""
    try:
        return _IEMOCAP_MAP[raw.strip().lower()]
    except KeyError:
        raise EmotionMappingError(f"unknown IEMOCAP emotion label {raw!r}") from None


def canonical_emotion(raw: str) -> Emotion:
    try:
        return _DD_ALIASES[raw.strip().lower()]
    except KeyError:
        raise EmotionMappingError(f"unknown emotion label {raw!r}") from None


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: str
    text: str
    emotion: Emotion

    def to_dict(self) -> dict:
        return {"index": self.index, "speaker": self.speaker, "text": self.text, "emotion": self.emotion.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Utterance":
        return cls(int(d["index"]), str(d["speaker"]), d["text"], Emotion(d["emotion"]))


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]
    # target index -> [(cause index, span text), ...]
    cause_annotations: dict[int, list[tuple[int, str]]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = len(self.utterances)
        for pos, utt in enumerate(self.utterances):
            if utt.index != pos:
                raise CorpusError(f"utterance at position {pos} has index {utt.index}", self.id)
            if not utt.text:
                raise CorpusError(f"utterance {pos} has empty text", self.id)
        for target, causes in self.cause_annotations.items():
            if not 0 <= target < n:
                raise AnnotationError(f"target index {target} out of range", self.id)
            for cause, span in causes:
                if not 0 <= cause < n:
                    raise AnnotationError(f"cause index {cause} out of range for target {target}", self.id)
                if not span or span not in self.utterances[cause].text:
                    raise AnnotationError(
                        f"span {span!r} not found in cause utterance {cause} (target {target})", self.id
                    )

    def targets(self) -> list[int]:
        return [u.index for u in self.utterances if u.emotion is not Emotion.NEUTRAL]

    def history(self, upto: int) -> tuple[str, list[tuple[int, int]]]:
        """Context string for utterances 0..upto plus each utterance's char range in it."""
        ranges = []
        pos = 0
        for utt in self.utterances[: upto + 1]:
            ranges.append((pos, pos + len(utt.text)))
            pos += len(utt.text) + 1
        return " ".join(u.text for u in self.utterances[: upto + 1]), ranges


@dataclass
class FoldSpec:
    fold_id: int = 1
    balanced: bool = False
    split: str = "train"
    seed: int = 0
    # Fold2/3 quota overrides; None -> one negative per Fold1 non-cause utterance
    negatives_per_target: int | None = None
    negatives_total: int | None = None
    # whether U_t itself is a Fold1 candidate (the target belongs to its own history)
    target_in_history: bool = True

    def __post_init__(self):
        if self.fold_id not in (1, 2, 3):
            raise ValueError(f"fold_id must be 1, 2 or 3, got {self.fold_id}")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"split must be train/val/test, got {self.split!r}")


@dataclass
class Sample:
    sample_id: str
    dialogue_id: str
    target: Utterance
    candidate: Utterance
    context: str
    emotion: Emotion
    gold_span: tuple[int, int] | None
    entail_label: int
    fold: int
    with_context: bool = True
    candidate_dialogue_id: str = ""

    def __post_init__(self):
        if not self.candidate_dialogue_id:
            self.candidate_dialogue_id = self.dialogue_id
        if (self.entail_label == 1) != (self.gold_span is not None):
            raise ValueError(f"{self.sample_id}: entail_label must be 1 iff a gold span is present")

    @property
    def span_text(self) -> str:
        if self.gold_span is None:
            return ""
        return self.context[self.gold_span[0] : self.gold_span[1]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = self.target.to_dict()
        d["candidate"] = self.candidate.to_dict()
        d["emotion"] = self.emotion.value
        d["gold_span"] = list(self.gold_span) if self.gold_span is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        span = d.get("gold_span")
        return cls(
            sample_id=d["sample_id"],
            dialogue_id=d["dialogue_id"],
            target=Utterance.from_dict(d["target"]),
            candidate=Utterance.from_dict(d["candidate"]),
            context=d["context"],
            emotion=Emotion(d["emotion"]),
            gold_span=tuple(span) if span is not None else None,
            entail_label=int(d["entail_label"]),
            fold=int(d["fold"]),
            with_context=bool(d.get("with_context", True)),
            candidate_dialogue_id=d.get("candidate_dialogue_id", ""),
        )


# ---------------------------------------------------------------------------
# corpus ingestion


def _natural_key(s: str):
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s))


def _emotion_mapper(corpus: str):
    corpus = corpus.upper()
    if corpus in ("IEMO", "IEMOCAP"):
        return map_iemocap_emotion
    if corpus in ("DD", "DAILYDIALOG"):
        return canonical_emotion
    raise ValueError(f"unknown corpus {corpus!r}; expected DD or IEMO")


def _parse_record(rec: dict, to_emotion) -> Dialogue:
    did = str(rec.get("id", "?"))
    try:
        utterances = [
            Utterance(i, str(u["speaker"]), u["text"], to_emotion(u["emotion"]))
            for i, u in enumerate(rec["utterances"])
        ]
        causes: dict[int, list[tuple[int, str]]] = defaultdict(list)
        for c in rec.get("causes", []):
            causes[int(c["target_idx"])].append((int(c["cause_idx"]), c["span"]))
    except AnnotationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"malformed record ({exc})", did) from exc
    return Dialogue(did, utterances, dict(causes))


def _parse_reccon_native(did: str, turns_wrapped, to_emotion) -> Dialogue:
    # released annotation layout: {id: [[{turn, speaker, utterance, emotion, ...}, ...]]}
    try:
        turns = turns_wrapped[0] if turns_wrapped and isinstance(turns_wrapped[0], list) else turns_wrapped
        utterances = []
        causes: dict[int, list[tuple[int, str]]] = {}
        for i, t in enumerate(turns):
            utterances.append(Utterance(i, str(t["speaker"]), t["utterance"], to_emotion(t["emotion"])))
            evidence = t.get("expanded emotion cause evidence")
            if evidence is None:
                continue
            spans = t.get("expanded emotion cause span", [])
            if len(spans) != len(evidence):
                # latent ("b") evidence may come without a span entry
                evidence = [e for e in evidence if isinstance(e, int)]
            pairs = []
            for ev, span in zip(evidence, spans):
                if isinstance(ev, int):
                    pairs.append((ev - 1, span))
            causes[i] = pairs
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, EmotionMappingError):
            raise CorpusError(str(exc), did) from exc
        raise CorpusError(f"malformed record ({exc!r})", did) from exc
    return Dialogue(did, utterances, causes)


def load_corpus(path: str | Path, corpus: str = "DD") -> list[Dialogue]:
    """Read dialogues from a JSON / JSON-lines file.

    Accepted layouts: a list (or JSON lines) of ``{id, utterances, causes}``
    records, or the released RECCON annotation mapping ``{id: [[turn, ...]]}``.
    Latent causes are dropped.
    """
    to_emotion = _emotion_mapper(corpus)
    raw = Path(path).read_text(encoding="utf-8")
    if not raw.strip():
        return []
    try:
        payload = json.loads(raw)
        records = payload
    except json.JSONDecodeError:
        records = []
        for lineno, line in enumerate(raw.splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc

    if isinstance(records, dict):
        return [_parse_reccon_native(str(k), v, to_emotion) for k, v in records.items()]
    if not isinstance(records, list):
        raise CorpusError("top-level JSON must be a list of dialogues or an id mapping")
    out = []
    for rec in records:
        if not isinstance(rec, dict):
            raise CorpusError(f"dialogue record must be an object, got {type(rec).__name__}")
        try:
            out.append(_parse_record(rec, to_emotion))
        except EmotionMappingError as exc:
            raise CorpusError(str(exc), str(rec.get("id", "?"))) from exc
    return out


def dump_corpus(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    records = []
    for d in dialogues:
        records.append(
            {
                "id": d.id,
                "utterances": [
                    {"speaker": u.speaker, "text": u.text, "emotion": u.emotion.value} for u in d.utterances
                ],
                "causes": [
                    {"target_idx": t, "cause_idx": c, "span": s}
                    for t, cs in sorted(d.cause_annotations.items())
                    for c, s in cs
                ],
            }
        )
    Path(path).write_text(json.dumps(records, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# fold construction


def _rng(*parts) -> random.Random:
    return random.Random(":".join(str(p) for p in parts))


def _positives(d: Dialogue, t: int, fold: int, dropped: Counter) -> list[Sample]:
    out = []
    target = d.utterances[t]
    context, ranges = d.history(t)
    for n, (ci, span) in enumerate(d.cause_annotations.get(t, [])):
        if ci > t:
            dropped["cause_after_target"] += 1
            continue
        cand = d.utterances[ci]
        start, end = locate_span(context, ranges[ci], span)
        out.append(
            Sample(
                sample_id=f"{d.id}_utt_{t + 1}_cause_utt_{ci + 1}_span_{n}",
                dialogue_id=d.id,
                target=target,
                candidate=cand,
                context=context,
                emotion=target.emotion,
                gold_span=(start, end),
                entail_label=1,
                fold=fold,
            )
        )
    return out


def _fold1_negative_indices(d: Dialogue, t: int, include_target: bool = True) -> list[int]:
    causes = {ci for ci, _ in d.cause_annotations.get(t, [])}
    upto = t + 1 if include_target else t
    return [j for j in range(upto) if j not in causes]


def build_fold(dialogues: Sequence[Dialogue], spec: FoldSpec) -> list[Sample]:
    """Build positive and negative (target, candidate) samples for one split of one fold.

    Positives are every annotated (target, cause, span) triple and are the same
    for all folds. Negatives follow the fold's strategy: same-dialogue non-causes
    (Fold1), random utterances of other dialogues (Fold2), or other-dialogue
    utterances sharing the target's emotion (Fold3). Output is sorted by
    (dialogue id, target index, candidate).
    """
    dialogues = sorted(dialogues, key=lambda d: _natural_key(d.id))
    dropped: Counter = Counter()
    samples: list[Sample] = []

    pool: dict[Emotion | None, list[tuple[int, int]]] = defaultdict(list)
    per_dialogue: dict[tuple[int, Emotion | None], int] = Counter()
    if spec.fold_id in (2, 3):
        for di, d in enumerate(dialogues):
            for u in d.utterances:
                key = u.emotion if spec.fold_id == 3 else None
                pool[key].append((di, u.index))
                per_dialogue[(di, key)] += 1

    histories: dict[int, dict[int, str]] = defaultdict(dict)

    for di, d in enumerate(dialogues):
        for t in d.targets():
            target = d.utterances[t]
            samples.extend(_positives(d, t, spec.fold_id, dropped))
            fold1_neg = _fold1_negative_indices(d, t, spec.target_in_history)
            negs: list[Sample] = []
            if spec.fold_id == 1:
                context, _ = d.history(t)
                for j in fold1_neg:
                    negs.append(
                        Sample(
                            sample_id=f"{d.id}_utt_{t + 1}_neg_utt_{j + 1}",
                            dialogue_id=d.id,
                            target=target,
                            candidate=d.utterances[j],
                            context=context,
                            emotion=target.emotion,
                            gold_span=None,
                            entail_label=0,
                            fold=1,
                        )
                    )
            else:
                key = target.emotion if spec.fold_id == 3 else None
                candidates = pool.get(key, [])
                own = per_dialogue[(di, key)]
                quota = spec.negatives_per_target if spec.negatives_per_target is not None else len(fold1_neg)
                if spec.balanced:
                    quota = min(quota, 2)
                if quota > 0 and len(candidates) - own <= 0:
                    raise SamplingError(
                        f"no other-dialogue utterances with emotion {target.emotion.value!r} "
                        f"to sample Fold{spec.fold_id} negatives for {d.id} utterance {t + 1}"
                    )
                rng = _rng(spec.seed, spec.fold_id, d.id, t)
                draw = rng.sample(range(len(candidates)), min(len(candidates), quota + own))
                picked = [candidates[i] for i in draw if candidates[i][0] != di][:quota]
                for odi, j in picked:
                    other = dialogues[odi]
                    if j not in histories[odi]:
                        histories[odi][j] = other.history(j)[0]
                    negs.append(
                        Sample(
                            sample_id=f"{d.id}_utt_{t + 1}_neg_{other.id}_utt_{j + 1}",
                            dialogue_id=d.id,
                            target=target,
                            candidate=other.utterances[j],
                            context=histories[odi][j],
                            emotion=target.emotion,
                            gold_span=None,
                            entail_label=0,
                            fold=spec.fold_id,
                            candidate_dialogue_id=other.id,
                        )
                    )
            if spec.balanced and len(negs) > 2:
                keep = sorted(_rng(spec.seed, "balanced", d.id, t).sample(range(len(negs)), 2))
                negs = [negs[i] for i in keep]
            samples.extend(negs)

    if spec.negatives_total is not None:
        neg_idx = [i for i, s in enumerate(samples) if s.entail_label == 0]
        if len(neg_idx) > spec.negatives_total:
            keep = set(_rng(spec.seed, "total", spec.fold_id).sample(neg_idx, spec.negatives_total))
            samples = [s for i, s in enumerate(samples) if s.entail_label == 1 or i in keep]
        elif len(neg_idx) < spec.negatives_total:
            logger.warning("only %d negatives available, %d requested", len(neg_idx), spec.negatives_total)

    if dropped:
        logger.warning("dropped annotations: %s", dict(dropped))
    samples.sort(key=_sample_order)
    return samples


def _sample_order(s: Sample):
    return (
        _natural_key(s.dialogue_id),
        s.target.index,
        s.candidate_dialogue_id != s.dialogue_id,
        _natural_key(s.candidate_dialogue_id),
        s.candidate.index,
        s.sample_id,
    )


def fold_counts(samples: Iterable[Sample]) -> tuple[int, int]:
    pos = neg = 0
    for s in samples:
        if s.entail_label:
            pos += 1
        else:
            neg += 1
    return pos, neg


def write_fold(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def read_fold(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(Sample.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# model inputs


@dataclass(frozen=True)
class SpanTarget:
    char_start: int
    char_end: int
    text: str

    @property
    def is_empty(self) -> bool:
        return self.char_start == self.char_end == 0 and not self.text


EMPTY_SPAN = SpanTarget(0, 0, "")


@dataclass(frozen=True)
class FormattedInput:
    input_text: str
    gold: SpanTarget | int
    # char ranges of U_t, U_i and the context inside input_text
    segments: dict[str, tuple[int, int] | None]


def format_input(sample: Sample, task: str, with_context: bool | None = None) -> FormattedInput:
    """Render a sample as model input text.

    w/ context: ``"U_t. U_i <SEP> Context"`` for both tasks; w/o context:
    ``"U_t. U_i"`` (CSE) and ``"U_t <SEP> U_i"`` (CEE). The CSE gold target is
    the cause span located inside the context (or inside U_i without context).
    """
    task = task.upper()
    if task not in ("CSE", "CEE"):
        raise ValueError(f"task must be CSE or CEE, got {task!r}")
    if with_context is None:
        with_context = sample.with_context
    ut, ui = sample.target.text, sample.candidate.text

    if with_context or task == "CSE":
        joiner = ". "
    else:
        joiner = f" {SEP} "
    target_rng = (0, len(ut))
    cand_start = len(ut) + len(joiner)
    cand_rng = (cand_start, cand_start + len(ui))
    text = ut + joiner + ui
    context_rng = None
    if with_context:
        text += f" {SEP} "
        context_rng = (len(text), len(text) + len(sample.context))
        text += sample.context
    segments = {"target": target_rng, "candidate": cand_rng, "context": context_rng}

    if task == "CEE":
        return FormattedInput(text, int(sample.entail_label), segments)
    if sample.gold_span is None:
        return FormattedInput(text, EMPTY_SPAN, segments)

    span = sample.span_text
    if not span:
        raise AlignmentError(f"{sample.sample_id}: empty gold span text")
    if span not in ui:
        raise AlignmentError(f"{sample.sample_id}: gold span {span!r} is not part of the candidate utterance")
    if with_context:
        s, e = sample.gold_span
        if e > len(sample.context) or sample.context[s:e] != span:
            raise AlignmentError(f"{sample.sample_id}: gold span does not index the context")
        start = context_rng[0] + s
    else:
        off = ui.find(span)
        if off < 0:
            raise AlignmentError(f"{sample.sample_id}: span {span!r} not found in candidate utterance")
        start = cand_rng[0] + off
    return FormattedInput(text, SpanTarget(start, start + len(span), span), segments)


def locate_span(context: str, region: tuple[int, int], span: str) -> tuple[int, int]:
    """First occurrence of ``span`` fully inside ``context[region]``."""
    lo, hi = region
    idx = context.find(span, lo)
    if idx < 0 or idx + len(span) > hi:
        raise AlignmentError(f"span {span!r} not found inside region {region}")
    return idx, idx + len(span)


# reported pos/neg counts for the released RECCON folds, keyed by (corpus, fold, balanced)
RECCON_REPORTED_COUNTS: dict[tuple[str, int, bool], dict[str, tuple[int, int]]] = {
    ("DD", 1, False): {"train": (7269, 20646), "val": (347, 838), "test": (1894, 5330)},
    ("DD", 2, False): {"train": (7269, 18428), "val": (347, 800), "test": (1184, 4396)},
    ("DD", 3, False): {"train": (7269, 18428), "val": (347, 800), "test": (1894, 4396)},
    ("IEMO", 1, False): {"test": (1080, 11305)},
    ("IEMO", 2, False): {"test": (1080, 7410)},
    ("IEMO", 3, False): {"test": (1080, 7410)},
    ("DD", 1, True): {"train": (7269, 7356), "val": (347, 308), "test": (1894, 1811)},
    ("DD", 2, True): {"train": (7269, 9124), "val": (347, 400), "test": (1184, 2198)},
    ("DD", 3, True): {"train": (7269, 9124), "val": (347, 400), "test": (1894, 2198)},
}
