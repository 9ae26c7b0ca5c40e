"""Word-level vocabulary shared by the retriever and the generator."""
from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable

from .textmetrics import normalize

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for t in tokens:
            if t not in seen:
                self.itos.append(t)
                seen.add(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    pad_id = 0
    unk_id = 1
    bos_id = 2
    eos_id = 3

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, extra: Iterable[str] = ()) -> "Vocab":
        counts = Counter()
        for text in texts:
            counts.update(normalize(text))
        # frequency order, ties alphabetical, so the vocabulary is reproducible
        ordered = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls([*extra, *ordered])

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in normalize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(tokens[len(SPECIALS):])
