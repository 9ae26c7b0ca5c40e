"""Dense story retrieval.

A single transformer encoder embeds both queries and stories by mean-pooling
its final hidden states; relevance is the dot product of the two embeddings.
The corpus side is materialized into a :class:`StoryIndex` for exact top-K
search, while :func:`score_candidates` recomputes scores with live parameters
so the retriever loss can backpropagate into the encoder.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, Story
from .layers import EncoderLayer, pad_batch
from .textmetrics import normalize
from .vocab import Vocab


class EmptyInputError(ValueError):
    """Raised when a text has no tokens to embed."""


class TextEncoder(nn.Module):
    def __init__(self, vocab: Vocab, d_model: int = 64, n_layers: int = 1, n_heads: int = 4,
                 d_ff: int | None = None, max_len: int = 256, dropout: float = 0.0):
        super().__init__()
        self.vocab = vocab
        self.d_model = d_model
        self.max_len = max_len
        self.config = dict(d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                           d_ff=d_ff or 2 * d_model, max_len=max_len, dropout=dropout)
        self.embed = nn.Embedding(len(vocab), d_model, padding_idx=vocab.pad_id)
        nn.init.normal_(self.embed.weight, std=1.0)
        with torch.no_grad():
            self.embed.weight[vocab.pad_id].zero_()
        # learned positions starting at zero: the untrained encoder is order-insensitive
        self.pos = nn.Parameter(torch.zeros(max_len, d_model))
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, n_heads, d_ff or 2 * d_model, dropout) for _ in range(n_layers))
        # zero residual branches: each layer starts as the identity, so the initial
        # embedding is plain mean-pooled token vectors
        for layer in self.layers:
            for lin in (layer.att.o, layer.ff.fc2):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        # bumped by the trainer after every optimizer step touching these weights
        self.version = 0

    def tokenize(self, texts: Sequence[str]) -> list[list[int]]:
        out = []
        for t in texts:
            ids = self.vocab.encode(t)[: self.max_len]
            if not ids:
                raise EmptyInputError(f"text has no tokens: {t!r}")
            out.append(ids)
        return out

    def hidden_states(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Final hidden states (B, T, d) and token mask (B, T)."""
        ids, mask = pad_batch(self.tokenize(texts), self.vocab.pad_id)
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        for layer in self.layers:
            x = layer(x, mask)
        return x, mask

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        h, mask = self.hidden_states(texts)
        m = mask.to(h.dtype).unsqueeze(-1)
        return (h * m).sum(1) / m.sum(1)


def embed(encoder: TextEncoder, text: str) -> torch.Tensor:
    return encoder([text])[0]


def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for s in corpus:
        h.update(s.id.encode("utf-8"))
        h.update(b"\x00")
        h.update(s.text.encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()


@dataclass
class StoryIndex:
    embeddings: np.ndarray  # (N, d) float32, row i = corpus position i
    ids: list[str]
    version: int
    fingerprint: str

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def scores(self, query_vec) -> np.ndarray:
        q = np.asarray(_to_numpy(query_vec), dtype=np.float64)
        return self.embeddings.astype(np.float64) @ q

    def is_stale(self, encoder: TextEncoder) -> bool:
        return self.version < encoder.version


def _to_numpy(v):
    if isinstance(v, torch.Tensor):
        return v.detach().cpu().numpy()
    return v


@torch.no_grad()
def encode_texts(encoder: TextEncoder, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    # sort by length so batches carry little padding; results are put back in order
    order = sorted(range(len(texts)), key=lambda i: len(texts[i]))
    out = np.zeros((len(texts), encoder.d_model), dtype=np.float32)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        out[chunk] = encoder([texts[i] for i in chunk]).float().numpy()
    encoder.train(was_training)
    return out


def build_index(encoder: TextEncoder, corpus: Corpus, batch_size: int = 256) -> StoryIndex:
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    emb = encode_texts(encoder, [s.text for s in corpus], batch_size)
    return StoryIndex(emb, corpus.ids, encoder.version, corpus_fingerprint(corpus))


@dataclass
class RetrievalSet:
    query: str
    items: list[tuple[str, float]]
    augmented: bool = False
    replaced: list[bool] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.items]

    def __len__(self) -> int:
        return len(self.items)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest scores, descending, ties to the lower position."""
    n = scores.shape[0]
    if k > n:
        raise ValueError(f"K={k} exceeds corpus size {n}")
    if k <= 0:
        raise ValueError("K must be positive")
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > kth)
        tied = np.flatnonzero(scores == kth)[: k - above.size]
        cand = np.concatenate([above, tied])
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order]


def retrieve(index: StoryIndex, query_vec, k: int, query: str = "") -> RetrievalSet:
    s = index.scores(query_vec)
    pos = top_k(s, k)
    return RetrievalSet(query, [(index.ids[p], float(s[p])) for p in pos], False, [False] * k)


def candidate_augment(rset: RetrievalSet, corpus: Corpus, rho: float,
                      rng: np.random.Generator) -> RetrievalSet:
    """Swap each slot, with probability ``rho``, for a uniformly drawn story not in the set.

    Replaced slots carry a NaN score; callers rescore with :func:`score_candidates`.
    """
    if rset.augmented:
        raise ValueError("retrieval set is already augmented")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    k = len(rset)
    n = len(corpus)
    if n < 2 * k:
        raise ValueError(f"corpus of {n} stories is too small to augment K={k} candidates")
    taken = {corpus.position(i) for i in rset.ids}
    flips = rng.random(k) < rho
    items, replaced = [], []
    for (sid, score), flip in zip(rset.items, flips):
        if not flip:
            items.append((sid, score))
            replaced.append(False)
            continue
        # rejection sampling; at least half the corpus is always free
        while True:
            p = int(rng.integers(n))
            if p not in taken:
                break
        taken.add(p)
        items.append((corpus[p].id, math.nan))
        replaced.append(True)
    return RetrievalSet(rset.query, items, True, replaced)


def score_candidates(encoder: TextEncoder, query: str, stories: Sequence[Story]) -> torch.Tensor:
    """Differentiable dot-product scores of ``query`` against each story."""
    if not stories:
        raise ValueError("score_candidates needs at least one story")
    for s in stories:
        if not s.text.strip():
            raise EmptyInputError(f"story {s.id!r} has empty text")
    vecs = encoder([query, *(s.text for s in stories)])
    return vecs[1:] @ vecs[0]


# ---------------------------------------------------------------------------
# persistence: fixed header, N*d little-endian float32 rows, sidecar JSON of row ids

_MAGIC = b"LPDIDX01"
_HEADER = struct.Struct("<8sIIQ32s")


class IndexMismatchError(ValueError):
    """Raised when a persisted index does not belong to the given corpus."""


def save_index(index: StoryIndex, path: str | Path) -> None:
    path = Path(path)
    header = _HEADER.pack(_MAGIC, len(index), index.dim, index.version, bytes.fromhex(index.fingerprint))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
    os.replace(tmp, path)
    sidecar = {"rows": index.ids, "n": len(index), "dim": index.dim,
               "version": index.version, "fingerprint": index.fingerprint}
    _sidecar(path).write_text(json.dumps(sidecar, indent=1), encoding="utf-8")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_index(path: str | Path, corpus: Corpus | None = None) -> StoryIndex:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    magic, n, d, version, fp = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a story index file")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != n * d:
        raise ValueError(f"{path}: expected {n * d} floats, found {body.size}")
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    ids = list(meta["rows"])
    if len(ids) != n:
        raise ValueError(f"{path}: sidecar lists {len(ids)} rows, header says {n}")
    fingerprint = fp.hex()
    if corpus is not None:
        expected = corpus_fingerprint(corpus)
        if expected != fingerprint:
            raise IndexMismatchError(
                f"{path}: index fingerprint {fingerprint[:12]} does not match corpus {expected[:12]}")
    return StoryIndex(body.reshape(n, d).astype(np.float32), ids, int(version), fingerprint)



def lexical_init(encoder: TextEncoder, corpus: Corpus) -> None:
    """Warm start standing in for a pretrained retriever.

    Token embeddings are rescaled by inverse document frequency over the story
    corpus, so an untrained encoder behaves like an IDF-weighted bag of words:
    rare words shared by query and story dominate the dot product.
    """
    df = Counter()
    for s in corpus:
        df.update(set(normalize(s.text)))
    n = len(corpus)
    scale = torch.tensor([math.log((n + 1) / (df.get(t, 0) + 1)) / math.log(n + 1)
                          for t in encoder.vocab.itos], dtype=encoder.embed.weight.dtype)
    scale[encoder.vocab.pad_id] = 0.0
    with torch.no_grad():
        encoder.embed.weight.mul_(scale[:, None])
    encoder.version += 1
