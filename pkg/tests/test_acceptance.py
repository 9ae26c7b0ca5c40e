"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line that is
printed in the terminal summary (see conftest.py)."""
import copy
import json
import math
import random
import time

import numpy as np
import pytest
import sacrebleu
import torch

from lapdog.cli import main
from lapdog.corpus import Corpus, Turn
from lapdog.gradcheck import fd_check
from lapdog.generator import Seq2SeqModel, assemble_fid, nll
from lapdog.retriever import RetrievalSet, StoryIndex, candidate_augment, lexical_init, retrieve
from lapdog.synthetic import make_task
from lapdog.textmetrics import corpus_bleu, normalize, rouge_l, sentence_bleu, token_f1
from lapdog.trainer import (Stage2Trainer, TrainConfig, evaluate, guidance_distribution,
                            new_generator, new_retriever, story_probability, task_vocab, train_stage1,
                            train_stage2)
from lapdog.vocab import Vocab

from conftest import random_sentence, story
from oracles import bleu_bruteforce, f1_bruteforce, rouge_l_bruteforce

RESULTS: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------

def test_c1_metric_oracles():
    t0 = time.perf_counter()
    rng = random.Random(7)
    worst = 0.0
    for _ in range(500):
        h, r = random_sentence(rng), random_sentence(rng)
        ht, rt = normalize(h), normalize(r)
        worst = max(worst, abs(token_f1(h, r) - f1_bruteforce(ht, rt)),
                    abs(rouge_l(h, r) - rouge_l_bruteforce(ht, rt)),
                    abs(sentence_bleu(h, r) - bleu_bruteforce(ht, rt)),
                    abs(sentence_bleu(h, r, smoothing=True) - bleu_bruteforce(ht, rt, smoothing=True)))
    hyps = [random_sentence(rng, 1) for _ in range(50)]
    refs = [random_sentence(rng, 1) for _ in range(50)]
    ref = sacrebleu.corpus_bleu([" ".join(normalize(h)) for h in hyps], [[" ".join(normalize(r)) for r in refs]],
                                tokenize="none", smooth_method="none").score
    corpus_err = abs(corpus_bleu(hyps, refs) - ref)
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-9 and corpus_err <= 1e-6 and dt < 10,
            f"max sentence error {worst:.2e}, corpus BLEU error {corpus_err:.2e}, {dt:.1f}s")


def test_c2_exact_retrieval():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    bad = 0
    for i in range(200):
        n, d, k = int(rng.integers(6, 10_001)), int(rng.integers(1, 65)), int(rng.integers(1, 7))
        if i % 2:
            emb = rng.integers(-2, 3, size=(n, d)).astype(np.float32)  # many ties
            q = rng.integers(-2, 3, size=d).astype(np.float32)
        else:
            emb = rng.standard_normal((n, d)).astype(np.float32)
            q = rng.standard_normal(d).astype(np.float32)
        idx = StoryIndex(emb, [f"s{j}" for j in range(n)], 0, "0" * 64)
        got = retrieve(idx, q, k)
        s = emb.astype(np.float64) @ q.astype(np.float64)
        order = np.lexsort((np.arange(n), -s))[:k]
        if got.ids != [f"s{j}" for j in order] or got.scores != [float(s[j]) for j in order]:
            bad += 1
    dt = time.perf_counter() - t0
    verdict(2, bad == 0 and dt < 30, f"{200 - bad}/200 instances exact, {dt:.1f}s")


def _tiny_task():
    task = make_task(n_personas=12, n_distractors=9, n_topic_distractors=2, n_items=5, n_heldout=4,
                     n_dialogues=2, seed=1)
    vocab = task_vocab(task.corpus, task.train + task.heldout)
    cfg = TrainConfig(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, retriever_d_model=16,
                      max_source_len=96, batch_size=4, generate_max_len=8, stage1_epochs=1, dropout=0.0)
    return task, vocab, cfg


def test_c3_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    vocab = Vocab("i like cats dogs story persona context human machine : hi there . red".split())
    m = Seq2SeqModel(vocab, d_model=16, n_heads=2, n_enc=1, n_dec=2, dropout=0.0).double().eval()
    inp = assemble_fid([story(0, "i like cats")], ["i like dogs ."], [Turn("human", "hi there .")], vocab, 64)
    a = fd_check(lambda: nll(m, inp, "i like red dogs ."), m.named_parameters(), 0.01, 1e-4,
                 np.random.default_rng(0))

    task, vocab, cfg = _tiny_task()
    gen, enc = new_generator(vocab, cfg).double(), new_retriever(vocab, cfg).double()
    lexical_init(enc, task.corpus)
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    plan = tr.plan(task.train[:2])
    gen.eval()
    enc.eval()

    def joint():
        r, g = tr.loss_terms(plan)
        return r + g

    named = [("gen." + n, p) for n, p in gen.named_parameters()] + [("enc." + n, p) for n, p in
                                                                     enc.named_parameters()]
    b = fd_check(joint, named, 0.01, 1e-4, np.random.default_rng(1))
    dt = time.perf_counter() - t0
    verdict(3, a.max_rel_error <= 1e-3 and b.max_rel_error <= 1e-3 and dt < 120,
            f"nll {a.max_rel_error:.1e} over {a.n_checked}, joint {b.max_rel_error:.1e} over {b.n_checked}, "
            f"{dt:.1f}s")


def test_c4_guidance_distribution():
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(2000):
        m = rng.uniform(0, 3, size=int(rng.integers(2, 9)))
        if rng.random() < 0.3:
            m[1] = m[0]
        p = np.array(guidance_distribution(m.tolist(), float(rng.uniform(0.05, 5))).p)
        ok &= abs(p.sum() - 1) <= 1e-9
        for i in range(len(m)):
            for j in range(len(m)):
                if m[i] > m[j]:
                    ok &= p[i] >= p[j]
                elif m[i] == m[j]:
                    ok &= p[i] == p[j]
    ref = guidance_distribution([1.0, 0.0], 0.85).p
    ok &= abs(ref[0] - 0.7643) <= 1e-4 and abs(ref[1] - 0.2357) <= 1e-4
    verdict(4, bool(ok), f"reference case ({ref[0]:.4f}, {ref[1]:.4f})")


def test_c5_augmentation_statistics():
    corpus = Corpus(story(i) for i in range(100))
    base = RetrievalSet("q", [(f"s{i}", float(6 - i)) for i in range(6)], False, [False] * 6)
    rng = np.random.default_rng(5)
    slots = flips = 0
    for _ in range(2000):
        out = candidate_augment(base, corpus, 0.5, rng)
        slots += len(out)
        flips += sum(out.replaced)
    z = abs(flips - 0.5 * slots) / math.sqrt(slots * 0.25)
    same = sum(candidate_augment(base, corpus, 0.0, rng).items == base.items for _ in range(2000))
    verdict(5, slots >= 10_000 and z <= 3 and same == 2000,
            f"{flips}/{slots} replaced (z={z:.2f}), rho=0 identity on {same}/2000")


# ---------------------------------------------------------------------------
# synthetic end-to-end; shared by criteria 6, 7 and 9

E2E_CFG = dict(stage1_epochs=3, max_source_len=128)


def run_e2e(rho: float | None = None, stage1=None):
    """Stage 1 then one stage-2 epoch on the default synthetic task.  Returns a log of
    every number the run produces, plus the stage-1 model for reuse."""
    task = make_task()
    vocab = task_vocab(task.corpus, task.train + task.heldout)
    cfg = TrainConfig(**E2E_CFG)
    log: dict = {}
    if stage1 is None:
        gen = new_generator(vocab, cfg)
        log["stage1_losses"] = train_stage1(gen, task.train, cfg).losses
        stage1 = copy.deepcopy(gen)
    else:
        gen = copy.deepcopy(stage1)
    if rho is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "rho": rho})
    enc = new_retriever(vocab, cfg)
    lexical_init(enc, task.corpus)
    res0 = train_stage2(gen, enc, task.corpus, task.train, cfg, max_steps=0)

    def p_oracle(e, idx):
        return [story_probability(e, idx, task.corpus, s, task.oracle_ids(s), cfg) for s in (task.train, task.heldout)]

    log["p_oracle_init"] = p_oracle(res0.enc, res0.index)
    log["baseline"] = evaluate(gen, task.heldout, cfg, no_retrieval=True).metrics.to_dict()
    res = train_stage2(gen, enc, task.corpus, task.train, cfg, eval_samples=task.heldout)
    log["steps"] = [r.to_dict() for r in res.reports]
    log["p_oracle_final"] = p_oracle(res.enc, res.index)
    log["final"] = res.final_eval.metrics.to_dict()
    log["unique"] = res.final_eval.unique_retrievals
    return log, stage1


@pytest.fixture(scope="module")
def e2e():
    t0 = time.perf_counter()
    log, stage1 = run_e2e()
    return log, stage1, time.perf_counter() - t0


@pytest.mark.slow
def test_c6_synthetic_end_to_end(e2e):
    log, _, dt = e2e
    (tr0, he0), (tr1, he1) = log["p_oracle_init"], log["p_oracle_final"]
    gain = log["final"]["f1"] / log["baseline"]["f1"] - 1
    verdict(6, tr1 > tr0 and he1 > he0 and gain >= 0.05 and dt <= 600,
            f"oracle probability train {tr0:.4f}->{tr1:.4f}, held-out {he0:.4f}->{he1:.4f}; "
            f"held-out F1 {log['baseline']['f1']:.4f}->{log['final']['f1']:.4f} ({100 * gain:+.2f}%), {dt:.0f}s")


@pytest.mark.slow
def test_c7_diversity_trend(e2e):
    log, stage1, _ = e2e
    plain, _ = run_e2e(rho=0.0, stage1=stage1)
    verdict(7, log["unique"] >= plain["unique"],
            f"unique retrievals with augmentation {log['unique']}, without {plain['unique']}")


def test_c8_ablation_plumbing(tmp_path, monkeypatch):
    task, vocab, cfg = _tiny_task()
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "retriever_update": "none"})
    gen, enc = new_generator(vocab, cfg), new_retriever(vocab, cfg)
    lexical_init(enc, task.corpus)
    snap = {k: v.clone() for k, v in enc.state_dict().items()}
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    rng = np.random.default_rng(0)
    for _ in range(100):
        tr.step([task.train[i] for i in rng.choice(len(task.train), cfg.batch_size, replace=False)])
    frozen = all(torch.equal(v, snap[k]) for k, v in enc.state_dict().items())

    monkeypatch.setenv("LAPDOG_RUN_DIR", str(tmp_path / "runs"))
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--personas", "6", "--heldout", "2",
                 "--dialogues-per-persona", "2"]) == 0
    code = main(["train", "--stage", "2", "--scratch", "--stories", str(data / "stories.jsonl"),
                 "--dialogues", str(data / "train.jsonl"), "--eval", str(data / "heldout.jsonl"),
                 "--d-model", "16", "--n-heads", "2", "--enc-layers", "1", "--dec-layers", "1",
                 "--retriever-d-model", "16", "--max-source-len", "96", "--batch-size", "4",
                 "--generate-max-len", "8", "--name", "scratch"])
    report = json.loads((tmp_path / "runs" / "scratch" / "report.json").read_text()) if code == 0 else {}
    verdict(8, frozen and code == 0 and "eval" in report,
            f"retriever unchanged over {tr.steps} steps: {frozen}; scratch run exit code {code}")


@pytest.mark.slow
def test_c9_determinism(e2e):
    log, _, _ = e2e
    again, _ = run_e2e()
    a, b = json.dumps(log, sort_keys=True), json.dumps(again, sort_keys=True)
    verdict(9, a == b, f"{len(log['steps'])} stage-2 steps, logs {'identical' if a == b else 'differ'}")
