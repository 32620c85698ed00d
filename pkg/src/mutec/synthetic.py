"""Small synthetic dyadic dialogues with emotion-cause annotations, for desk-scale runs."""

from __future__ import annotations

import random

from .data import Dialogue, Emotion, Utterance

_EVENTS = {
    Emotion.HAPPINESS: ["I passed the final exam", "we won the big game", "my sister got married", "I got the new job"],
    Emotion.SURPRISE: ["you ran a red light", "the store closed early", "my old friend called", "the train left without us"],
    Emotion.ANGER: ["someone scratched my car", "the waiter ignored us", "they cancelled my order", "he broke my laptop"],
    Emotion.SADNESS: ["my dog passed away", "I lost my wallet", "the trip was cancelled", "she moved to another city"],
    Emotion.DISGUST: ["the soup had a hair", "the kitchen smelled of rot", "he spat on the floor"],
    Emotion.FEAR: ["a stranger followed me home", "the brakes stopped working", "I heard a noise downstairs"],
}

_REACTIONS = {
    Emotion.HAPPINESS: ["That is wonderful news!", "I am so happy for you!", "Great, let us celebrate!"],
    Emotion.SURPRISE: ["Really? I did not expect that!", "What? Are you serious?", "No way, really?"],
    Emotion.ANGER: ["That makes me so angry!", "How dare they do that!", "This is outrageous!"],
    Emotion.SADNESS: ["Oh no, that is so sad.", "I am really sorry to hear that.", "That breaks my heart."],
    Emotion.DISGUST: ["Ugh, that is disgusting.", "Gross, I feel sick.", "That is revolting."],
    Emotion.FEAR: ["That is terrifying!", "I am scared now.", "Oh no, I am frightened."],
}

_OPENERS = ["Hi, how are you today?", "Good morning, anything new?", "Hey, what is up?", "Hello, long time no see."]
_FILLERS = ["You know,", "Guess what,", "Listen,", "Well,", "Honestly,"]
_TAILS = ["yesterday.", "this morning.", "last night.", "just now.", "again."]
_CLOSERS = ["Okay, see you later.", "Let us talk tomorrow.", "I need to go now.", "Thanks for telling me."]


def make_synthetic_dialogues(n: int = 20, seed: int = 0, prefix: str = "syn") -> list[Dialogue]:
    """Dialogues of 3-5 turns where one turn reports an event and the next reacts to it.

    The reaction carries the event's emotion and its cause span is the event phrase.
    """
    rng = random.Random(seed)
    emotions = list(_EVENTS)
    out = []
    for i in range(n):
        emo = emotions[rng.randrange(len(emotions))]
        event = rng.choice(_EVENTS[emo])
        turns = [(rng.choice(_OPENERS), Emotion.NEUTRAL)]
        if rng.random() < 0.5:
            turns.append(("I am fine, thanks for asking.", Emotion.NEUTRAL))
        cause_idx = len(turns)
        turns.append((f"{rng.choice(_FILLERS)} {event} {rng.choice(_TAILS)}", Emotion.NEUTRAL))
        target_idx = len(turns)
        turns.append((rng.choice(_REACTIONS[emo]), emo))
        if rng.random() < 0.5:
            turns.append((rng.choice(_CLOSERS), Emotion.NEUTRAL))
        utts = [Utterance(j, "AB"[j % 2], text, e) for j, (text, e) in enumerate(turns)]
        out.append(Dialogue(f"{prefix}_{i}", utts, {target_idx: [(cause_idx, event)]}))
    return out
