"""Fusion-in-Decoder sequence-to-sequence generator.

Each (story, persona, context) segment is encoded on its own; the encoder
states are concatenated along the position axis and the decoder
cross-attends over the whole concatenation.  The optional copy head mixes the
vocabulary softmax with the last cross-attention distribution scattered onto
source token ids (pointer-generator), which lets a small model trained from
scratch reproduce rare words that appear in its input.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .corpus import Story, Turn, tagged_turns
from .layers import DecoderLayer, EncoderLayer, pad_batch, sinusoidal_positions
from .vocab import Vocab

DEFAULT_MAX_SOURCE_LEN = 512


@dataclass(frozen=True)
class FiDInput:
    segments: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("FiDInput needs at least one segment")


def _segment(story: Story | None, persona: str, turns: Sequence[Turn]) -> str:
    parts = []
    if story is not None:
        parts.append(f"story: {story.text}")
    parts.append(f"persona: {persona}")
    parts.append(f"context: {tagged_turns(turns)}")
    return " ".join(parts)


def assemble_fid(stories: Sequence[Story], persona: Sequence[str], context: Sequence[Turn],
                 vocab: Vocab | None = None, max_source_len: int = DEFAULT_MAX_SOURCE_LEN) -> FiDInput:
    """One segment per story (or a single story-less segment).

    When ``vocab`` is given, segments longer than ``max_source_len`` tokens drop
    their oldest context turns first; persona and story are never cut.
    """
    if not persona:
        raise ValueError("persona must be nonempty")
    if not context:
        raise ValueError("context must be nonempty")
    persona_text = " ".join(persona)
    segs = []
    for story in (stories or [None]):
        turns = list(context)
        seg = _segment(story, persona_text, turns)
        if vocab is not None:
            while len(turns) > 1 and len(vocab.encode(seg)) > max_source_len:
                turns.pop(0)
                seg = _segment(story, persona_text, turns)
        segs.append(seg)
    return FiDInput(tuple(segs))


class Seq2SeqModel(nn.Module):
    def __init__(self, vocab: Vocab, d_model: int = 64, n_heads: int = 4, n_enc: int = 2,
                 n_dec: int = 2, d_ff: int | None = None, dropout: float = 0.1,
                 max_source_len: int = DEFAULT_MAX_SOURCE_LEN, max_target_len: int = 32,
                 copy: bool = True):
        super().__init__()
        self.vocab = vocab
        self.config = dict(d_model=d_model, n_heads=n_heads, n_enc=n_enc, n_dec=n_dec,
                           d_ff=d_ff or 4 * d_model, dropout=dropout, max_source_len=max_source_len,
                           max_target_len=max_target_len, copy=copy)
        self.max_source_len = max_source_len
        self.max_target_len = max_target_len
        self.copy = copy
        d_ff = d_ff or 4 * d_model
        self.embed = nn.Embedding(len(vocab), d_model, padding_idx=vocab.pad_id)
        nn.init.normal_(self.embed.weight, std=d_model ** -0.5)
        n_pos = max(max_source_len, max_target_len + 1)
        self.register_buffer("pos", sinusoidal_positions(n_pos, d_model).float(), persistent=False)
        self.encoder = nn.ModuleList(EncoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_enc))
        self.enc_norm = nn.LayerNorm(d_model)
        self.decoder = nn.ModuleList(DecoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_dec))
        self.dec_norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, len(vocab))
        if copy:
            self.gate = nn.Linear(2 * d_model, 1)
        self.drop = nn.Dropout(dropout)
        self.truncated_targets = 0

    # -- encoder -----------------------------------------------------------

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) * (self.embed.embedding_dim ** 0.5)
        return self.drop(x + self.pos[: ids.shape[1]].to(x.dtype))

    def encode_segments(self, segments: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor, list[list[int]]]:
        seqs = []
        for seg in segments:
            ids = self.vocab.encode(seg)[: self.max_source_len]
            seqs.append(ids or [self.vocab.unk_id])
        ids, mask = pad_batch(seqs, self.vocab.pad_id)
        x = self._embed(ids)
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x), mask, seqs

    def encode_batch(self, inputs: Sequence[FiDInput]):
        """Encode every segment of every input; returns padded memory (B, M, d),
        memory mask (B, M) and source ids (B, M) for the copy head."""
        flat = [seg for inp in inputs for seg in inp.segments]
        states, _, seqs = self.encode_segments(flat)
        mems, ids, k = [], [], 0
        for inp in inputs:
            blocks, block_ids = [], []
            for _ in inp.segments:
                n = len(seqs[k])
                blocks.append(states[k, :n])
                block_ids.extend(seqs[k])
                k += 1
            mems.append(torch.cat(blocks, dim=0))
            ids.append(block_ids)
        M = max(m.shape[0] for m in mems)
        d = states.shape[-1]
        memory = states.new_zeros(len(inputs), M, d)
        mask = torch.zeros(len(inputs), M, dtype=torch.bool)
        src = torch.full((len(inputs), M), self.vocab.pad_id, dtype=torch.long)
        for b, (m, i) in enumerate(zip(mems, ids)):
            memory[b, : m.shape[0]] = m
            mask[b, : m.shape[0]] = True
            src[b, : len(i)] = torch.tensor(i, dtype=torch.long)
        return memory, mask, src

    # -- decoder -----------------------------------------------------------

    def step_log_probs(self, dec_in: torch.Tensor, memory, mem_mask, src_ids) -> torch.Tensor:
        """Log-probabilities (B, T, V) of the next token at every decoder position."""
        y = self._embed(dec_in)
        attn = None
        for i, layer in enumerate(self.decoder):
            if self.copy and i == len(self.decoder) - 1:
                h = layer.ln1(y)
                y = y + layer.drop(layer.self_att(h, h, causal=True))
                c, attn = layer.cross_att(layer.ln2(y), memory, key_mask=mem_mask, return_weights=True)
                y = y + layer.drop(c)
                y = y + layer.drop(layer.ff(layer.ln3(y)))
            else:
                y = layer(y, memory, mem_mask)
        y = self.dec_norm(y)
        logits = self.out(y)
        if not self.copy:
            return F.log_softmax(logits, dim=-1)
        ctx = attn @ memory
        p_gen = torch.sigmoid(self.gate(torch.cat([y, ctx], dim=-1)))
        vocab_p = torch.softmax(logits, dim=-1)
        copy_p = torch.zeros_like(vocab_p).scatter_add(
            -1, src_ids[:, None, :].expand(-1, attn.shape[1], -1), attn)
        p = p_gen * vocab_p + (1 - p_gen) * copy_p
        return torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))

    def target_ids(self, target: str) -> list[int]:
        ids = self.vocab.encode(target)
        if len(ids) > self.max_target_len:
            self.truncated_targets += 1
            ids = ids[: self.max_target_len]
        return ids + [self.vocab.eos_id]


def encode_concat(model: Seq2SeqModel, inp: FiDInput) -> torch.Tensor:
    """Concatenated encoder states (L, d) of all segments, in segment order."""
    memory, mask, _ = model.encode_batch([inp])
    return memory[0, : int(mask[0].sum())]


def nll_batch(model: Seq2SeqModel, inputs: Sequence[FiDInput], targets: Sequence[str]) -> torch.Tensor:
    """Per-example summed negative log-likelihood (B,), teacher forced, EOS included."""
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    for t in targets:
        if not t.strip():
            raise ValueError("target must be nonempty")
    memory, mem_mask, src = model.encode_batch(inputs)
    tgt = [model.target_ids(t) for t in targets]
    gold, gold_mask = pad_batch(tgt, model.vocab.pad_id)
    dec_in = torch.cat([torch.full((len(tgt), 1), model.vocab.bos_id, dtype=torch.long), gold[:, :-1]], dim=1)
    logp = model.step_log_probs(dec_in, memory, mem_mask, src)
    tok = logp.gather(-1, gold[..., None]).squeeze(-1)
    return -(tok * gold_mask.to(tok.dtype)).sum(dim=1)


def nll(model: Seq2SeqModel, inp: FiDInput, target: str) -> torch.Tensor:
    return nll_batch(model, [inp], [target])[0]


@torch.no_grad()
def generate_batch(model: Seq2SeqModel, inputs: Sequence[FiDInput], max_len: int = 32) -> list[str]:
    was_training = model.training
    model.eval()
    memory, mem_mask, src = model.encode_batch(inputs)
    B = len(inputs)
    out = torch.full((B, 1), model.vocab.bos_id, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        logp = model.step_log_probs(out, memory, mem_mask, src)[:, -1]
        nxt = logp.argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, model.vocab.eos_id), nxt)
        out = torch.cat([out, nxt[:, None]], dim=1)
        done |= nxt == model.vocab.eos_id
        if bool(done.all()):
            break
    model.train(was_training)
    return [model.vocab.decode(row[1:].tolist()) for row in out]


def generate(model: Seq2SeqModel, inp: FiDInput, max_len: int = 32) -> str:
    return generate_batch(model, [inp], max_len)[0]


# ---------------------------------------------------------------------------
# checkpoints: <dir>/model.pt, <dir>/vocab.txt, <dir>/manifest.json

def save_checkpoint(model: nn.Module, path: str | Path, kind: str, stage: int, step: int,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "model.pt")
    model.vocab.save(path / "vocab.txt")
    manifest = {"kind": kind, "stage": stage, "step": step, "vocab_size": len(model.vocab),
                "config": model.config, **(extra or {})}
    if kind == "retriever":
        manifest["version"] = model.version
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))


def load_checkpoint(path: str | Path):
    """Rebuild a generator or retriever encoder from a checkpoint directory."""
    from .retriever import TextEncoder

    path = Path(path)
    manifest = read_manifest(path)
    vocab = Vocab.load(path / "vocab.txt")
    if manifest["kind"] == "generator":
        model = Seq2SeqModel(vocab, **manifest["config"])
    elif manifest["kind"] == "retriever":
        model = TextEncoder(vocab, **manifest["config"])
        model.version = int(manifest.get("version", 0))
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {manifest['kind']!r}")
    model.load_state_dict(torch.load(path / "model.pt", weights_only=True))
    model.eval()
    return model, manifest
