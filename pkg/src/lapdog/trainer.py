"""Two-stage training.

Stage 1 fits the generator on (persona, context) -> response with no retrieval.
Stage 2 freezes a copy of that generator as an evaluator, scores each retrieved
story by how good the evaluator's response becomes when the story is added,
turns those scores into a target distribution, and trains the retriever
towards it with a KL loss while the generator keeps training on the retrieved
stories.  Both losses are summed and optimized together.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import QUERY_MODES, Corpus, DialogueSample, Story, make_query
from .generator import FiDInput, Seq2SeqModel, assemble_fid, generate_batch, nll_batch
from .retriever import (RetrievalSet, StoryIndex, TextEncoder, build_index, candidate_augment,
                        encode_texts, retrieve, score_candidates)
from .textmetrics import MetricBundle, corpus_eval, guidance_metric
from .vocab import Vocab

log = logging.getLogger(__name__)

RETRIEVER_UPDATES = ("none", "lapdog")


@dataclass
class TrainConfig:
    tau_g: float = 0.85
    tau_s: float = 0.8
    rho: float = 0.5
    K: int = 6
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    dropout: float = 0.1
    max_turns: int = 3
    max_source_len: int = 512
    batch_size: int = 8
    query_mode: str = "persona"
    retriever_update: str = "lapdog"
    index_refresh_steps: int = 200
    seed: int = 0
    # desk-scale schedule and model sizes
    stage1_epochs: int = 10
    stage2_epochs: int = 1
    max_target_len: int = 32
    generate_max_len: int = 32
    eval_every: int = 0
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    copy: bool = True
    retriever_d_model: int = 256
    retriever_layers: int = 1
    retriever_init_std: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.K < 2:
            raise ValueError(f"K must be at least 2, got {self.K}")
        if self.tau_g <= 0 or self.tau_s <= 0:
            raise ValueError("temperatures must be positive")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        if self.retriever_update not in RETRIEVER_UPDATES:
            raise ValueError(f"retriever_update must be one of {RETRIEVER_UPDATES}")
        for name in ("max_turns", "max_source_len", "batch_size", "index_refresh_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


def torch_seed(seed: int, name: str) -> int:
    return int(rng_stream(seed, name).integers(2**62))


def new_generator(vocab: Vocab, cfg: TrainConfig) -> Seq2SeqModel:
    torch.manual_seed(torch_seed(cfg.seed, "init/generator"))
    return Seq2SeqModel(vocab, d_model=cfg.d_model, n_heads=cfg.n_heads, n_enc=cfg.enc_layers,
                        n_dec=cfg.dec_layers, dropout=cfg.dropout, max_source_len=cfg.max_source_len,
                        max_target_len=cfg.max_target_len, copy=cfg.copy)


def new_retriever(vocab: Vocab, cfg: TrainConfig) -> TextEncoder:
    torch.manual_seed(torch_seed(cfg.seed, "init/retriever"))
    enc = TextEncoder(vocab, d_model=cfg.retriever_d_model, n_layers=cfg.retriever_layers,
                      n_heads=cfg.n_heads, dropout=0.0)
    with torch.no_grad():
        enc.embed.weight.mul_(cfg.retriever_init_std)
    return enc


SEGMENT_MARKERS = ("story", "persona", "context", "human", "machine", ":")


def task_vocab(corpus: Corpus, samples: Sequence[DialogueSample], min_count: int = 1) -> Vocab:
    """Vocabulary over story text, personas, contexts and targets, plus segment markers."""
    texts = [s.text for s in corpus]
    for s in samples:
        texts.extend(s.persona)
        texts.extend(t.text for t in s.context)
        texts.append(s.target)
    return Vocab.build(texts, min_count=min_count, extra=SEGMENT_MARKERS)


def no_retrieval_input(sample: DialogueSample, vocab: Vocab, cfg: TrainConfig) -> FiDInput:
    return assemble_fid([], sample.persona, sample.context, vocab, cfg.max_source_len)


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, size):
        yield [int(j) for j in order[i:i + size]]


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# stage 1

@dataclass
class Checkpoint:
    model: Seq2SeqModel
    stage: int
    step: int
    losses: list[float] = field(default_factory=list)


def train_stage1(model: Seq2SeqModel, samples: Sequence[DialogueSample], cfg: TrainConfig,
                 max_steps: int | None = None,
                 on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Supervised generator training on persona + context with no retrieved stories."""
    if not samples:
        raise ValueError("train_stage1 needs samples")
    torch.manual_seed(torch_seed(cfg.seed, "dropout/stage1"))
    order_rng = rng_stream(cfg.seed, "data_order/stage1")
    inputs = [no_retrieval_input(s, model.vocab, cfg) for s in samples]
    opt = _adam(model.parameters(), cfg)
    model.train()
    losses, step = [], 0
    for _ in range(cfg.stage1_epochs):
        for idx in _batches(len(samples), cfg.batch_size, order_rng):
            loss = nll_batch(model, [inputs[i] for i in idx], [samples[i].target for i in idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(loss.item())
            if on_step:
                on_step(step, loss.item())
            if max_steps is not None and step >= max_steps:
                model.eval()
                return Checkpoint(model, 1, step, losses)
    model.eval()
    return Checkpoint(model, 1, step, losses)


# ---------------------------------------------------------------------------
# guidance and retriever loss

@dataclass(frozen=True)
class GuidanceDistribution:
    p: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.p)


def guidance_distribution(metric_values: Sequence[float], tau_g: float) -> GuidanceDistribution:
    m = np.asarray(metric_values, dtype=np.float64)
    if m.ndim != 1 or m.size < 2:
        raise ValueError("need at least two metric values")
    if tau_g <= 0:
        raise ValueError("tau_g must be positive")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"non-finite metric values: {m.tolist()}")
    z = (m - m.max()) / tau_g
    e = np.exp(z)
    return GuidanceDistribution(tuple((e / e.sum()).tolist()))


def retriever_loss(scores: torch.Tensor, guidance: GuidanceDistribution | Sequence[float],
                   tau_s: float) -> torch.Tensor:
    """KL(guidance || softmax(scores / tau_s)); gradients reach ``scores`` only."""
    p_vals = guidance.p if isinstance(guidance, GuidanceDistribution) else tuple(guidance)
    if len(p_vals) != scores.shape[-1]:
        raise ValueError(f"{len(p_vals)} guidance entries for {scores.shape[-1]} scores")
    p = torch.tensor(p_vals, dtype=scores.dtype)
    log_q = F.log_softmax(scores / tau_s, dim=-1)
    return (torch.xlogy(p, p) - p * log_q).sum()


# ---------------------------------------------------------------------------
# stage 2

@dataclass
class StepReport:
    step: int
    retriever_loss: float
    generator_loss: float
    joint_loss: float
    replaced_slots: int
    metric_values: list[list[float]]
    candidates: list[list[str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Plan:
    """Non-differentiable part of a step: queries, candidates and guidance."""
    samples: list[DialogueSample]
    queries: list[str]
    retrieved: list[RetrievalSet]
    candidates: list[RetrievalSet]
    stories: list[list[Story]]
    metric_values: list[list[float]]
    guidance: list[GuidanceDistribution]


class Stage2Trainer:
    """Owns both models, the frozen evaluator, the optimizer and the story index."""

    def __init__(self, gen: Seq2SeqModel, enc: TextEncoder, corpus: Corpus, cfg: TrainConfig,
                 evaluator: Seq2SeqModel | None = None, index: StoryIndex | None = None):
        if cfg.K > len(corpus):
            raise ValueError(f"K={cfg.K} exceeds corpus size {len(corpus)}")
        self.gen, self.enc, self.corpus, self.cfg = gen, enc, corpus, cfg
        self.evaluator = copy.deepcopy(evaluator if evaluator is not None else gen)
        self.evaluator.eval()
        for p in self.evaluator.parameters():
            p.requires_grad_(False)
        self.update_retriever = cfg.retriever_update == "lapdog"
        for p in enc.parameters():
            p.requires_grad_(self.update_retriever)
        params = list(gen.parameters())
        if self.update_retriever:
            params += list(enc.parameters())
        self.opt = _adam(params, cfg)
        self.aug_rng = rng_stream(cfg.seed, "augmentation")
        self.query_rng = rng_stream(cfg.seed, "query")
        self.index = index if index is not None else build_index(enc, corpus)
        self.steps = 0

    # -- pieces ------------------------------------------------------------

    def queries(self, samples: Sequence[DialogueSample], model: Seq2SeqModel | None = None) -> list[str]:
        drafts: list[str | None] = [None] * len(samples)
        if self.cfg.query_mode == "generated":
            model = model or self.evaluator
            drafts = generate_batch(model, [no_retrieval_input(s, model.vocab, self.cfg) for s in samples],
                                    self.cfg.generate_max_len)
            drafts = [d if d.strip() else " ".join(s.persona) for d, s in zip(drafts, samples)]
        return [make_query(s, self.cfg.query_mode, self.query_rng, draft=d) for s, d in zip(samples, drafts)]

    def retrieve(self, queries: Sequence[str]) -> list[RetrievalSet]:
        vecs = encode_texts(self.enc, list(queries))
        return [retrieve(self.index, v, self.cfg.K, q) for q, v in zip(queries, vecs)]

    def plan(self, batch: Sequence[DialogueSample]) -> Plan:
        samples = list(batch)
        queries = self.queries(samples)
        retrieved = self.retrieve(queries)
        cands = [candidate_augment(r, self.corpus, self.cfg.rho, self.aug_rng) for r in retrieved]
        stories = [[self.corpus.lookup(i) for i in c.ids] for c in cands]
        inputs = [assemble_fid([st], s.persona, s.context, self.evaluator.vocab, self.cfg.max_source_len)
                  for s, sts in zip(samples, stories) for st in sts]
        preds = generate_batch(self.evaluator, inputs, self.cfg.generate_max_len)
        K = self.cfg.K
        metrics = [[guidance_metric(preds[b * K + i], s.target) for i in range(K)]
                   for b, s in enumerate(samples)]
        guidance = [guidance_distribution(m, self.cfg.tau_g) for m in metrics]
        return Plan(samples, queries, retrieved, cands, stories, metrics, guidance)

    def loss_terms(self, plan: Plan) -> tuple[torch.Tensor, torch.Tensor]:
        """Batch-mean retriever KL and generator NLL for a fixed plan."""
        r_losses = []
        for q, sts, g in zip(plan.queries, plan.stories, plan.guidance):
            scores = score_candidates(self.enc, q, sts)
            r_losses.append(retriever_loss(scores, g, self.cfg.tau_s))
        inputs = [assemble_fid(sts, s.persona, s.context, self.gen.vocab, self.cfg.max_source_len)
                  for s, sts in zip(plan.samples, plan.stories)]
        g_loss = nll_batch(self.gen, inputs, [s.target for s in plan.samples]).mean()
        return torch.stack(r_losses).mean(), g_loss

    def step(self, batch: Sequence[DialogueSample] | DialogueSample) -> StepReport:
        if isinstance(batch, DialogueSample):
            batch = [batch]
        plan = self.plan(batch)
        self.gen.train()
        self.enc.train()
        l_r, l_g = self.loss_terms(plan)
        loss = l_r + l_g
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        if self.update_retriever:
            self.enc.version += 1
        self.steps += 1
        if self.steps % self.cfg.index_refresh_steps == 0 and self.index.is_stale(self.enc):
            self.refresh_index()
        r, g = l_r.item(), l_g.item()
        return StepReport(self.steps, r, g, r + g, sum(sum(c.replaced) for c in plan.candidates),
                          plan.metric_values, [c.ids for c in plan.candidates])

    def refresh_index(self) -> None:
        self.index = build_index(self.enc, self.corpus)


def stage2_step(trainer: Stage2Trainer, batch) -> StepReport:
    return trainer.step(batch)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    metrics: MetricBundle
    unique_retrievals: int | None
    hyps: list[str]
    retrieved: list[list[str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {**self.metrics.to_dict(), "unique_retrievals": self.unique_retrievals,
                "n": len(self.hyps)}


def retrieve_for(enc: TextEncoder, index: StoryIndex, samples: Sequence[DialogueSample],
                 cfg: TrainConfig, draft_model: Seq2SeqModel | None = None) -> list[RetrievalSet]:
    """Top-K retrieval (no augmentation) for evaluation samples."""
    rng = rng_stream(cfg.seed, "query/eval")
    drafts: list[str | None] = [None] * len(samples)
    if cfg.query_mode == "generated":
        if draft_model is None:
            raise ValueError("generated query mode needs a draft model")
        drafts = generate_batch(draft_model, [no_retrieval_input(s, draft_model.vocab, cfg) for s in samples],
                                cfg.generate_max_len)
        drafts = [d if d.strip() else " ".join(s.persona) for d, s in zip(drafts, samples)]
    queries = [make_query(s, cfg.query_mode, rng, draft=d) for s, d in zip(samples, drafts)]
    vecs = encode_texts(enc, queries)
    return [retrieve(index, v, cfg.K, q) for q, v in zip(queries, vecs)]


def count_unique_retrievals(enc: TextEncoder, index: StoryIndex, samples: Sequence[DialogueSample],
                            cfg: TrainConfig, draft_model: Seq2SeqModel | None = None) -> int:
    seen: set[str] = set()
    for r in retrieve_for(enc, index, samples, cfg, draft_model):
        seen.update(r.ids)
    return len(seen)


def evaluate(gen: Seq2SeqModel, samples: Sequence[DialogueSample], cfg: TrainConfig,
             enc: TextEncoder | None = None, index: StoryIndex | None = None,
             corpus: Corpus | None = None, no_retrieval: bool = False,
             batch_size: int = 32) -> EvalReport:
    if not samples:
        raise ValueError("evaluate needs samples")
    retrieved: list[list[str]] = []
    if no_retrieval:
        inputs = [no_retrieval_input(s, gen.vocab, cfg) for s in samples]
        unique = None
    else:
        if enc is None or index is None or corpus is None:
            raise ValueError("retrieval evaluation needs an encoder, index and corpus")
        sets = retrieve_for(enc, index, samples, cfg, draft_model=gen)
        retrieved = [r.ids for r in sets]
        unique = len({i for ids in retrieved for i in ids})
        inputs = [assemble_fid([corpus.lookup(i) for i in ids], s.persona, s.context, gen.vocab,
                               cfg.max_source_len) for s, ids in zip(samples, retrieved)]
    hyps: list[str] = []
    for i in range(0, len(inputs), batch_size):
        hyps.extend(generate_batch(gen, inputs[i:i + batch_size], cfg.generate_max_len))
    return EvalReport(corpus_eval(hyps, [s.target for s in samples]), unique, hyps, retrieved)


def story_probability(enc: TextEncoder, index: StoryIndex, corpus: Corpus,
                      samples: Sequence[DialogueSample], story_ids: Sequence[str],
                      cfg: TrainConfig) -> float:
    """Mean retriever probability softmax(scores / tau_s) given to a designated story
    when it competes with the K-1 best other stories for each sample's query."""
    rng = rng_stream(cfg.seed, "query/eval")
    queries = [make_query(s, cfg.query_mode, rng, draft=" ".join(s.persona)) for s in samples]
    vecs = encode_texts(enc, queries)
    probs = []
    for v, sid in zip(vecs, story_ids):
        s = index.scores(v)
        target = corpus.position(sid)
        t = s[target]
        s[target] = -np.inf
        others = np.sort(s)[::-1][: cfg.K - 1]
        z = np.concatenate([[t], others]) / cfg.tau_s
        z -= z.max()
        e = np.exp(z)
        probs.append(float(e[0] / e.sum()))
    return float(np.mean(probs))


# ---------------------------------------------------------------------------

@dataclass
class Stage2Result:
    gen: Seq2SeqModel
    enc: TextEncoder
    index: StoryIndex
    reports: list[StepReport]
    evals: list[dict]
    final_eval: EvalReport | None


def train_stage2(gen: Seq2SeqModel, enc: TextEncoder, corpus: Corpus,
                 samples: Sequence[DialogueSample], cfg: TrainConfig,
                 evaluator: Seq2SeqModel | None = None,
                 eval_samples: Sequence[DialogueSample] | None = None,
                 max_steps: int | None = None,
                 on_step: Callable[[StepReport], None] | None = None) -> Stage2Result:
    """Joint retriever/generator training for ``cfg.stage2_epochs`` epochs.

    ``evaluator`` defaults to a frozen copy of ``gen`` as passed in, i.e. the
    stage-1 generator (or a random one in from-scratch mode).
    """
    torch.manual_seed(torch_seed(cfg.seed, "dropout/stage2"))
    order_rng = rng_stream(cfg.seed, "data_order/stage2")
    trainer = Stage2Trainer(gen, enc, corpus, cfg, evaluator=evaluator)
    reports: list[StepReport] = []
    evals: list[dict] = []
    done = max_steps is not None and max_steps <= 0
    for _ in range(cfg.stage2_epochs):
        if done:
            break
        for idx in _batches(len(samples), cfg.batch_size, order_rng):
            rep = trainer.step([samples[i] for i in idx])
            reports.append(rep)
            if on_step:
                on_step(rep)
            if eval_samples and cfg.eval_every and rep.step % cfg.eval_every == 0:
                if trainer.index.is_stale(enc):
                    trainer.refresh_index()
                ev = evaluate(gen, eval_samples, cfg, enc, trainer.index, corpus)
                evals.append({"step": rep.step, **ev.to_dict()})
            if max_steps is not None and rep.step >= max_steps:
                done = True
                break
    if trainer.index.is_stale(enc):
        trainer.refresh_index()
    gen.eval()
    enc.eval()
    final = evaluate(gen, eval_samples, cfg, enc, trainer.index, corpus) if eval_samples else None
    return Stage2Result(gen, enc, trainer.index, reports, evals, final)
