"""Synthetic persona/story task with a known useful story per persona.

Every persona has a hobby topic.  Exactly one story in the corpus (its oracle)
mentions that topic together with an item keyword; every machine turn
names that item.  Without retrieval the item can only be guessed.
The remaining stories are distractors: a few share the topic but name a
different item, the rest are about unrelated themes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, DialogueSample, Story, samples_from_dialogue

FILLER_PERSONA = [
    "i have two dogs .", "i work at a bank .", "i live in a small town .", "i drink coffee every day .",
    "my favorite color is blue .", "i am a night owl .", "i have three sisters .", "i drive an old truck .",
    "i like rainy days .", "i grew up on a farm .", "i am learning to cook .", "i wear glasses .",
    "i listen to jazz .", "my dad is a teacher .", "i walk to work .", "i enjoy long naps .",
]
FILLER_STORY = [
    "the weather was nice that day .", "i called my friend after lunch .", "it was a long week .",
    "i went home early .", "everyone was very kind .", "i had a sandwich for dinner .",
    "my mom was proud of me .", "i could not stop smiling .", "the bus was late again .",
    "i told my brother about it .", "it started to rain later .", "i slept very well that night .",
]
GREETINGS = ["hi !", "hello there .", "hey , how are you ?", "good morning !"]
MENTIONS = ["i got a {item} recently .", "my {item} came from the club .", "i keep my {item} at home .",
            "the {item} was a gift ."]
ASK_ITEM = ["did you ever get anything at your club ?", "what did you get at the club ?",
            "nice ! did the club give you anything ?"]


@dataclass
class SyntheticTask:
    corpus: Corpus
    train: list[DialogueSample]
    heldout: list[DialogueSample]
    oracle: dict[str, str]  # dialogue id -> oracle story id
    dialogues_train: list[dict]
    dialogues_heldout: list[dict]

    def oracle_ids(self, samples) -> list[str]:
        return [self.oracle[s.dialogue_id] for s in samples]


def _story(sid: str, title: str, core: list[str], rng: np.random.Generator) -> Story:
    fill = [FILLER_STORY[i] for i in rng.choice(len(FILLER_STORY), 5 - len(core), replace=False)]
    sents = list(core) + fill
    order = [0, *(1 + rng.permutation(len(sents) - 1))]
    return Story(sid, title, tuple(sents[i] for i in order))


def make_task(n_personas: int = 200, n_distractors: int = 99, n_topic_distractors: int = 6,
              n_items: int = 40, n_heldout: int = 40, mention_rate: float = 0.5,
              n_dialogues: int = 16, seed: int = 0) -> SyntheticTask:
    """Build the corpus and dialogue samples.

    ``mention_rate`` of the training personas also state their item in a persona
    sentence, which teaches the no-retrieval generator to copy an item word
    whenever one is present in its input.
    """
    rng = np.random.default_rng(seed)
    topics = [f"hobby{i}" for i in range(n_personas)]
    items = [f"item{i}" for i in range(n_items)]
    themes = [f"theme{i}" for i in range(max(50, n_personas // 2))]
    stories: list[Story] = []
    oracle: dict[str, str] = {}
    dialogues_train: list[dict] = []
    dialogues_heldout: list[dict] = []
    heldout = set(rng.choice(n_personas, n_heldout, replace=False).tolist())
    for p, topic in enumerate(topics):
        item = items[int(rng.integers(n_items))]
        oid = f"s{p}_oracle"
        stories.append(_story(oid, f"{topic} club", [
            f"i joined a {topic} club last year .", f"at the {topic} club i got a {item} ."], rng))
        for j in range(n_topic_distractors):
            other = items[(items.index(item) + 1 + int(rng.integers(n_items - 1))) % n_items]
            stories.append(_story(f"s{p}_t{j}", f"{topic} show", [
                f"i watched a {topic} show on tv .", f"at the {topic} show i saw a {other} ."], rng))
        for j in range(n_distractors - n_topic_distractors):
            theme = themes[int(rng.integers(len(themes)))]
            stories.append(_story(f"s{p}_d{j}", f"{theme} trip", [
                f"i went on a {theme} trip .", f"the {theme} trip was long ."], rng))
        fill = [FILLER_PERSONA[i] for i in rng.choice(len(FILLER_PERSONA), 3, replace=False)]
        persona = [f"i really love {topic} .", f"{topic} is my favorite hobby .", *fill]
        if p not in heldout and rng.random() < mention_rate:
            persona[-1] = MENTIONS[int(rng.integers(len(MENTIONS)))].format(item=item)
        persona = [persona[i] for i in rng.permutation(len(persona))]
        for k in range(n_dialogues):
            ask = f"{GREETINGS[int(rng.integers(len(GREETINGS)))]} {ASK_ITEM[int(rng.integers(len(ASK_ITEM)))]}"
            turns = [{"speaker": "human", "text": ask}, {"speaker": "machine", "text": f"i got a {item} ."}]
            rec = {"id": f"d{p}_{k}", "persona": persona, "turns": turns}
            oracle[rec["id"]] = oid
            (dialogues_heldout if p in heldout else dialogues_train).append(rec)
    perm = rng.permutation(len(stories))
    corpus = Corpus(stories[i] for i in perm)
    return SyntheticTask(corpus, _samples(dialogues_train), _samples(dialogues_heldout), oracle,
                         dialogues_train, dialogues_heldout)


def _samples(dialogues: list[dict], max_turns: int = 3) -> list[DialogueSample]:
    return [s for d in dialogues for s in samples_from_dialogue(d, max_turns)]
