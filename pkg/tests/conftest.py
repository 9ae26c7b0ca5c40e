import json
import random

import pytest
import torch

from lapdog.corpus import DialogueSample, Story, Turn

torch.set_num_threads(1)

WORDS = "the a cat dog sat on mat i like cats dogs ran to park and is was my red big".split()


def random_sentence(rng: random.Random, lo=0, hi=12) -> str:
    toks = [rng.choice(WORDS) for _ in range(rng.randint(lo, hi))]
    if toks and rng.random() < 0.3:
        toks.append(rng.choice([".", "!", "?"]))
    return " ".join(toks)


def story(i: int, words: str = "") -> Story:
    base = words or f"story number {i} is here"
    return Story(f"s{i}", f"title {i}", tuple(f"{base} sentence {j} ." for j in range(5)))


def sample(persona=("i like cats .", "i have a dog ."), turns=("hi there !",), target="me too .") -> DialogueSample:
    ctx = tuple(Turn("human" if k % 2 == 0 else "machine", t) for k, t in enumerate(turns))
    return DialogueSample(tuple(persona), ctx, target, "d0")


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    return path


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
