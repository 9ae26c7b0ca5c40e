"""Story corpus and persona-dialogue ingestion.

Stories are 5-sentence narratives stored as JSON lines.  Raw third-person
stories can be rewritten into first person with :func:`first_personify`, which
takes a pluggable person tagger and agreement corrector; rule-based defaults
are shipped so the pipeline runs without any model downloads.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SENTENCES_PER_STORY = 5
SPEAKERS = ("human", "machine")
QUERY_MODES = ("persona", "persona+dialogue", "generated", "one_persona")


class DataError(ValueError):
    """Raised for malformed story or dialogue input."""


@dataclass(frozen=True)
class Story:
    id: str
    title: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        if len(self.sentences) != SENTENCES_PER_STORY:
            raise DataError(
                f"story {self.id!r} has {len(self.sentences)} sentences, expected {SENTENCES_PER_STORY}")

    @property
    def text(self) -> str:
        return " ".join(self.sentences)

    def to_json(self) -> dict:
        return {"id": self.id, "title": self.title, "sentences": list(self.sentences)}


class Corpus:
    """Ordered story collection with id -> position lookup."""

    def __init__(self, stories: Iterable[Story]):
        self.stories: list[Story] = list(stories)
        self._pos: dict[str, int] = {}
        for i, s in enumerate(self.stories):
            if s.id in self._pos:
                raise DataError(f"duplicate story id {s.id!r}")
            self._pos[s.id] = i

    def __len__(self) -> int:
        return len(self.stories)

    def __getitem__(self, i: int) -> Story:
        return self.stories[i]

    def __iter__(self):
        return iter(self.stories)

    def position(self, story_id: str) -> int:
        return self._pos[story_id]

    def lookup(self, story_id: str) -> Story:
        return self.stories[self._pos[story_id]]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.stories]


def _read_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None


def story_from_record(rec: dict, lineno: int | None = None) -> Story:
    where = f"line {lineno}: " if lineno is not None else ""
    if not isinstance(rec, dict) or not all(k in rec for k in ("id", "title", "sentences")):
        raise DataError(f"{where}story record needs id, title and sentences")
    sents = rec["sentences"]
    if not isinstance(sents, list) or not all(isinstance(s, str) for s in sents):
        raise DataError(f"{where}story {rec['id']!r}: sentences must be a list of strings")
    if len(sents) != SENTENCES_PER_STORY:
        raise DataError(
            f"{where}story {rec['id']!r} has {len(sents)} sentences, expected {SENTENCES_PER_STORY}")
    return Story(str(rec["id"]), str(rec["title"]), tuple(sents))


def load_stories(path: str | Path) -> Corpus:
    return Corpus(story_from_record(rec, lineno) for lineno, rec in _read_jsonl(path))


def write_stories(stories: Iterable[Story], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in stories:
            f.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# first-personification

_PIECE_RE = re.compile(r"\s+|\w+(?:'\w+)?|[^\w\s]")

# Tokens that are capitalized for reasons other than being a name.
_NOT_NAMES = frozenset("""
i a an the he she it they we you his her hers him them their my me our us your
this that these those there then when while after before one today yesterday
tomorrow monday tuesday wednesday thursday friday saturday sunday january february
march april may june july august september october november december christmas
easter halloween thanksgiving mom dad grandma grandpa
""".split())

DEFAULT_NAMES = frozenset("""
aaron adam alex alice amanda amy andrew angela anna anne ashley barbara ben betty
bill bob brad brian carl carol charles chris cindy claire dan daniel david dennis
diana donna doug ed edward elizabeth ellen emily emma eric frank fred gary george
gina greg hannah harry helen henry jack jake james jane jason jeff jen jennifer
jenny jessica jill jim jimmy joe john jon josh julia julie kate katie kelly ken
kevin kim kyle larry laura lauren leo linda lisa lucy luke mark martha mary matt
max megan melissa michael mike molly nancy nick nina oliver pam pat paul peter
rachel randy ray rebecca rick rob robert ron rose ruth ryan sally sam sandra
sara sarah scott sean sophie steve susan tim timmy tina todd tom tommy tony vicky
zoe
""".split())

_SUBJECT_PRONOUNS = {"he": "I", "she": "I"}
_OBJECT_PRONOUNS = {"him": "me", "himself": "myself", "herself": "myself", "hers": "mine"}
_POSSESSIVE_PRONOUNS = {"his": "my"}
_CLAUSE_OPENERS = frozenset("and but so then when because while after before until if or".split())
_PREPOSITIONS = frozenset("""
to for with at by from of on in about into onto over under behind near like than
without around through toward towards upon
""".split())

IRREGULAR_AGREEMENT = {"is": "am", "has": "have", "does": "do", "goes": "go", "doesn't": "don't",
                       "isn't": "am not", "hasn't": "haven't"}
_NOT_VERBS = frozenset("was always perhaps sometimes is has does goes less unless".split())
_ADVERBS = frozenset("""
always never often also really usually still just sometimes finally quickly slowly
actually even already soon then
""".split())

PersonTagger = Callable[[list[str]], list[bool]]
Corrector = Callable[[list[str]], list[str]]


def _words(pieces: list[str]) -> list[int]:
    return [i for i, p in enumerate(pieces) if not p.isspace()]


class RuleTagger:
    """Marks capitalized tokens found in a name table as person names."""

    def __init__(self, names: Iterable[str] | None = None, extra: Iterable[str] = ()):
        base = DEFAULT_NAMES if names is None else frozenset(n.lower() for n in names)
        self.names = frozenset(base) | {n.lower() for n in extra}

    def __call__(self, tokens: list[str]) -> list[bool]:
        out = []
        for tok in tokens:
            stem = tok[:-2] if tok.endswith("'s") else tok
            cap = stem[:1].isupper() and stem.lower() not in _NOT_NAMES
            # a capitalized word right after a known name is taken as its surname
            out.append(cap and (stem.lower() in self.names or bool(out and out[-1])))
        return out


class RuleCorrector:
    """Repairs subject-verb agreement after first-person ``I``.

    ``I loves`` -> ``I love``; one intervening adverb is allowed
    (``I always goes`` -> ``I always go``).
    """

    def __init__(self, irregular: dict[str, str] | None = None):
        self.irregular = dict(IRREGULAR_AGREEMENT)
        if irregular:
            self.irregular.update({k.lower(): v for k, v in irregular.items()})

    def base_form(self, verb: str) -> str | None:
        low = verb.lower()
        if low in self.irregular:
            return self.irregular[low]
        if low in _NOT_VERBS or not low.isalpha() or len(low) < 3 or not low.endswith("s"):
            return None
        if low.endswith("ss") or low.endswith("us"):
            return None
        if low.endswith("ies") and len(low) > 4:
            return low[:-3] + "y"
        if low.endswith(("ches", "shes", "sses", "xes", "zzes", "oes")):
            return low[:-2]
        return low[:-1]

    def __call__(self, tokens: list[str]) -> list[str]:
        out = list(tokens)
        for i, tok in enumerate(tokens):
            if tok != "I":
                continue
            j = i + 1
            if j < len(out) and out[j].lower() in _ADVERBS:
                j += 1
            if j < len(out):
                base = self.base_form(out[j])
                if base is not None:
                    out[j] = base
        return out


def _sentence_start(words: list[str], k: int) -> bool:
    return k == 0 or words[k - 1] in {".", "!", "?", '"'}


def _cap(word: str, at_start: bool) -> str:
    return word[:1].upper() + word[1:] if at_start else word


def personify_sentence(sentence: str, tagger: PersonTagger, corrector: Corrector,
                       replace_pronouns: bool) -> tuple[str, int]:
    """Rewrite one sentence; returns (new sentence, number of name spans replaced)."""
    pieces = _PIECE_RE.findall(sentence)
    idx = _words(pieces)
    words = [pieces[i] for i in idx]
    tags = tagger(words)
    n_ent = 0
    new = list(words)
    for k, w in enumerate(words):
        low = w.lower()
        start = _sentence_start(words, k)
        prev = words[k - 1].lower() if k > 0 else ""
        if tags[k]:
            # collapse "Mary Smith" into one span
            if k > 0 and tags[k - 1]:
                new[k] = ""
                continue
            n_ent += 1
            if w.endswith("'s"):
                new[k] = _cap("my", start)
            elif start or prev in _CLAUSE_OPENERS:
                new[k] = "I"
            else:
                new[k] = "me"
        elif replace_pronouns:
            if low in _SUBJECT_PRONOUNS:
                new[k] = "I"
            elif low in _POSSESSIVE_PRONOUNS:
                new[k] = _cap(_POSSESSIVE_PRONOUNS[low], start)
            elif low in _OBJECT_PRONOUNS:
                new[k] = _cap(_OBJECT_PRONOUNS[low], start)
            elif low == "her":
                nxt = words[k + 1] if k + 1 < len(words) else "."
                is_object = (not nxt[:1].isalnum()) or nxt.lower() in _PREPOSITIONS \
                    or nxt.lower() in _CLAUSE_OPENERS or prev in _PREPOSITIONS
                new[k] = _cap("me" if is_object else "my", start)
    new = corrector(new)
    for i, w in zip(idx, new):
        pieces[i] = w
    text = "".join(pieces)
    text = re.sub(r"\s{2,}", " ", text).strip()
    text = re.sub(r"\s+([.,!?;:])", r"\1", text)
    return text, n_ent


def first_personify(story: Story, tagger: PersonTagger | None = None,
                    corrector: Corrector | None = None) -> Story:
    return first_personify_counted(story, tagger, corrector)[0]


def first_personify_counted(story: Story, tagger: PersonTagger | None = None,
                            corrector: Corrector | None = None) -> tuple[Story, int]:
    """Like :func:`first_personify` but also returns how many name spans were replaced."""
    tagger = tagger or RuleTagger()
    corrector = corrector or RuleCorrector()
    has_person = any(any(tagger([w for w in _PIECE_RE.findall(s) if not w.isspace()]))
                     for s in story.sentences)
    sentences, total = [], 0
    for s in story.sentences:
        out, n = personify_sentence(s, tagger, corrector, replace_pronouns=has_person)
        sentences.append(out)
        total += n
    return Story(story.id, story.title, tuple(sentences)), total


def load_rules(path: str | Path) -> tuple[RuleTagger, RuleCorrector]:
    """Rules file: JSON with optional ``names`` (extra person names) and ``agreement``
    (verb -> base form overrides)."""
    with open(path, encoding="utf-8") as f:
        rules = json.load(f)
    return RuleTagger(extra=rules.get("names", ())), RuleCorrector(rules.get("agreement"))


# ---------------------------------------------------------------------------
# dialogues

@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass(frozen=True)
class DialogueSample:
    persona: tuple[str, ...]
    context: tuple[Turn, ...]
    target: str
    dialogue_id: str = ""
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "persona", tuple(self.persona))
        object.__setattr__(self, "context", tuple(self.context))
        if not self.target.strip():
            raise DataError(f"dialogue {self.dialogue_id!r}: empty target")
        if self.context and self.context[0].speaker != "human":
            raise DataError(f"dialogue {self.dialogue_id!r}: context must start with a human turn")


def tagged_turns(turns: Sequence[Turn]) -> str:
    return " ".join(f"{t.speaker}: {t.text}" for t in turns)


def samples_from_dialogue(rec: dict, max_turns: int) -> list[DialogueSample]:
    if max_turns < 1:
        raise ValueError("max_turns must be positive")
    did = str(rec.get("id", ""))
    try:
        persona = [str(p) for p in rec["persona"]]
        turns = [Turn(t["speaker"], str(t["text"])) for t in rec["turns"]]
    except (KeyError, TypeError):
        raise DataError(f"dialogue {did!r}: needs persona and turns with speaker/text") from None
    for i, t in enumerate(turns):
        if t.speaker != SPEAKERS[i % 2]:
            raise DataError(
                f"dialogue {did!r}: turn {i} has speaker {t.speaker!r}, expected {SPEAKERS[i % 2]!r} "
                "(turns must alternate starting with human)")
    # context + target spans at most max_turns exchanges, so context keeps 2*max_turns - 1 turns
    keep = 2 * max_turns - 1
    out = []
    for i, t in enumerate(turns):
        if t.speaker != "machine":
            continue
        ctx = turns[max(0, i - keep):i]
        out.append(DialogueSample(tuple(persona), tuple(ctx), t.text, did, {"turn": i}))
    return out


def build_samples(dialogue_file: str | Path, max_turns: int) -> list[DialogueSample]:
    samples = []
    for _, rec in _read_jsonl(dialogue_file):
        samples.extend(samples_from_dialogue(rec, max_turns))
    return samples


def make_query(sample: DialogueSample, mode: str = "persona",
               rng: np.random.Generator | None = None, draft: str | None = None) -> str:
    if mode == "persona":
        return " ".join(sample.persona)
    if mode == "persona+dialogue":
        return " ".join([*sample.persona, *(t.text for t in sample.context)])
    if mode == "one_persona":
        if rng is None:
            raise ValueError("one_persona mode needs an rng")
        return sample.persona[int(rng.integers(len(sample.persona)))]
    if mode == "generated":
        if draft is None:
            raise ValueError("generated query mode needs a draft response")
        return draft
    raise ValueError(f"unknown query mode {mode!r}; expected one of {QUERY_MODES}")
