import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lapdog.generator import assemble_fid, generate_batch
from lapdog.gradcheck import fd_check
from lapdog.retriever import lexical_init
from lapdog.synthetic import make_task
from lapdog.trainer import (GuidanceDistribution, Stage2Trainer, TrainConfig, count_unique_retrievals,
                            evaluate, guidance_distribution, new_generator, new_retriever, retriever_loss,
                            rng_stream, story_probability, train_stage1, train_stage2)
from lapdog.vocab import Vocab


def test_guidance_reference_case():
    g = guidance_distribution([1.0, 0.0], 0.85)
    assert g.p[0] == pytest.approx(0.7643126128217471, abs=1e-12)
    assert g.p[1] == pytest.approx(1 - 0.7643126128217471, abs=1e-12)
    assert guidance_distribution([2.0, 2.0, 2.0], 0.85).p == pytest.approx((1 / 3,) * 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 3.0), min_size=2, max_size=8), st.floats(0.05, 5.0))
def test_guidance_is_order_preserving_distribution(values, tau):
    p = guidance_distribution(values, tau).p
    assert abs(sum(p) - 1.0) <= 1e-9
    for i in range(len(values)):
        for j in range(len(values)):
            if values[i] > values[j]:
                assert p[i] >= p[j]
            if values[i] == values[j]:
                assert p[i] == p[j]


def test_guidance_errors():
    with pytest.raises(ValueError):
        guidance_distribution([1.0], 0.85)
    with pytest.raises(ValueError):
        guidance_distribution([1.0, float("nan")], 0.85)
    with pytest.raises(ValueError):
        guidance_distribution([1.0, 0.0], 0.0)
    # very large metrics do not overflow
    assert sum(guidance_distribution([1e4, 0.0], 0.01).p) == pytest.approx(1.0)


def test_retriever_loss_value_and_gradient():
    p = (0.7, 0.2, 0.1)
    s = torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64, requires_grad=True)
    tau = 0.8
    z = [math.exp(v / tau) for v in (1.0, 0.0, -1.0)]
    q = [v / sum(z) for v in z]
    expected = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    loss = retriever_loss(s, GuidanceDistribution(p), tau)
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    loss.backward()
    # d KL / d s_i = (q_i - p_i) / tau
    np.testing.assert_allclose(s.grad.numpy(), [(qi - pi) / tau for pi, qi in zip(p, q)], atol=1e-12)


def test_retriever_loss_zero_at_match_and_handles_zero_mass():
    p = torch.softmax(torch.tensor([0.3, -0.2, 1.0], dtype=torch.float64) / 0.8, 0)
    s = torch.tensor([0.3, -0.2, 1.0], dtype=torch.float64)
    assert retriever_loss(s, p.tolist(), 0.8).item() == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(retriever_loss(s, [1.0, 0.0, 0.0], 0.8).item())
    with pytest.raises(ValueError):
        retriever_loss(s, [0.5, 0.5], 0.8)


def test_rng_streams_are_named_and_reproducible():
    a1, a2 = rng_stream(0, "augmentation"), rng_stream(0, "augmentation")
    assert np.array_equal(a1.random(5), a2.random(5))
    assert not np.array_equal(rng_stream(0, "augmentation").random(5), rng_stream(0, "query").random(5))
    assert not np.array_equal(rng_stream(0, "x").random(5), rng_stream(1, "x").random(5))


def test_config_roundtrip_and_validation(tmp_path):
    cfg = TrainConfig(K=4, rho=0.25)
    p = tmp_path / "cfg.json"
    import json
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(p) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"bogus": 1})
    for bad in ({"rho": 1.5}, {"K": 1}, {"tau_g": 0}, {"query_mode": "x"}, {"retriever_update": "x"},
                {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    d = TrainConfig()
    assert (d.tau_g, d.tau_s, d.rho, d.K, d.learning_rate) == (0.85, 0.8, 0.5, 6, 5e-4)


# ---------------------------------------------------------------------------
# small end-to-end fixtures

@pytest.fixture(scope="module")
def toy():
    task = make_task(n_personas=12, n_distractors=9, n_topic_distractors=2, n_items=5, n_heldout=4,
                     n_dialogues=2, seed=1)
    texts = [s.text for s in task.corpus]
    texts += [" ".join(s.persona) + " " + s.target + " " + " ".join(t.text for t in s.context)
              for s in task.train + task.heldout]
    vocab = Vocab.build(texts, extra="human machine story persona context :".split())
    cfg = TrainConfig(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, retriever_d_model=16,
                      max_source_len=96, batch_size=4, generate_max_len=8, stage1_epochs=1)
    return task, vocab, cfg


def _models(toy, **over):
    task, vocab, cfg = toy
    cfg = TrainConfig.from_dict({**cfg.to_dict(), **over})
    gen = new_generator(vocab, cfg)
    enc = new_retriever(vocab, cfg)
    lexical_init(enc, task.corpus)
    return task, cfg, gen, enc


def test_stage1_reduces_loss(toy):
    task, cfg, gen, _ = _models(toy, stage1_epochs=6, dropout=0.0, learning_rate=3e-3)
    ck = train_stage1(gen, task.train, cfg)
    assert ck.stage == 1 and ck.step == len(ck.losses) == 6 * math.ceil(len(task.train) / cfg.batch_size)
    assert np.mean(ck.losses[-3:]) < 0.7 * np.mean(ck.losses[:3])
    assert not gen.training


def test_stage1_deterministic(toy):
    task, cfg, g1, _ = _models(toy)
    _, _, g2, _ = _models(toy)
    assert train_stage1(g1, task.train, cfg, max_steps=4).losses == train_stage1(g2, task.train, cfg,
                                                                                  max_steps=4).losses


def test_stage2_step_report_and_frozen_evaluator(toy):
    task, cfg, gen, enc = _models(toy)
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    before = {k: v.clone() for k, v in tr.evaluator.state_dict().items()}
    enc_before = enc.embed.weight.detach().clone()
    rep = tr.step(task.train[:4])
    assert rep.step == 1 and len(rep.metric_values) == 4 and all(len(m) == cfg.K for m in rep.metric_values)
    assert rep.joint_loss == pytest.approx(rep.retriever_loss + rep.generator_loss)
    assert 0 <= rep.replaced_slots <= 4 * cfg.K
    assert all(len(set(c)) == cfg.K for c in rep.candidates)
    for k, v in tr.evaluator.state_dict().items():
        assert torch.equal(v, before[k])
    assert not torch.equal(enc.embed.weight, enc_before)
    assert enc.version == 2  # one bump from the warm start, one from the step


def test_plan_metric_values_match_evaluator_outputs(toy):
    task, cfg, gen, enc = _models(toy)
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    plan = tr.plan(task.train[:2])
    from lapdog.textmetrics import guidance_metric
    for s, sts, m, g in zip(plan.samples, plan.stories, plan.metric_values, plan.guidance):
        inputs = [assemble_fid([x], s.persona, s.context, gen.vocab, cfg.max_source_len) for x in sts]
        preds = generate_batch(tr.evaluator, inputs, cfg.generate_max_len)
        assert m == [guidance_metric(p, s.target) for p in preds]
        assert g == guidance_distribution(m, cfg.tau_g)


def test_retriever_update_none_freezes_encoder(toy):
    task, cfg, gen, enc = _models(toy, retriever_update="none")
    snap = {k: v.clone() for k, v in enc.state_dict().items()}
    v0 = enc.version
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    for i in range(3):
        tr.step(task.train[i * 4:(i + 1) * 4])
    for k, v in enc.state_dict().items():
        assert torch.equal(v, snap[k])
    assert enc.version == v0 and not tr.index.is_stale(enc)


def test_index_refresh_schedule(toy):
    task, cfg, gen, enc = _models(toy, index_refresh_steps=2)
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    first = tr.index
    tr.step(task.train[:2])
    assert tr.index is first and tr.index.is_stale(enc)
    tr.step(task.train[2:4])
    assert tr.index is not first and tr.index.version == enc.version


def test_joint_loss_gradient_matches_finite_differences(toy):
    task, cfg, gen, enc = _models(toy, dropout=0.0)
    gen.double()
    enc.double()
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    plan = tr.plan(task.train[:2])
    gen.eval()
    enc.eval()

    def loss():
        r, g = tr.loss_terms(plan)
        return r + g

    named = [("gen." + n, p) for n, p in gen.named_parameters()] + [("enc." + n, p) for n, p in
                                                                     enc.named_parameters()]
    res = fd_check(loss, named, fraction=0.01, h=1e-4, rng=np.random.default_rng(0))
    assert res.max_rel_error <= 1e-3, res.worst


def test_train_stage2_deterministic(toy):
    def run():
        task, cfg, gen, enc = _models(toy)
        res = train_stage2(gen, enc, task.corpus, task.train, cfg, eval_samples=task.heldout, max_steps=3)
        return [r.to_dict() for r in res.reports], res.final_eval.to_dict()
    assert run() == run()


def test_evaluate_paths(toy):
    task, cfg, gen, enc = _models(toy)
    plain = evaluate(gen, task.heldout, cfg, no_retrieval=True)
    assert plain.unique_retrievals is None and len(plain.hyps) == len(task.heldout)
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    rep = evaluate(gen, task.heldout, cfg, enc, tr.index, task.corpus)
    assert rep.unique_retrievals == count_unique_retrievals(enc, tr.index, task.heldout, cfg)
    assert all(len(r) == cfg.K for r in rep.retrieved)
    with pytest.raises(ValueError):
        evaluate(gen, task.heldout, cfg)
    p = story_probability(enc, tr.index, task.corpus, task.heldout, task.oracle_ids(task.heldout), cfg)
    assert 0.0 < p < 1.0


def test_guidance_limits_and_shift_invariance():
    g = guidance_distribution([0.3, 0.9, 0.5], 0.01)
    assert max(g.p) >= 0.99 and g.p.index(max(g.p)) == 1
    a = guidance_distribution([0.3, 0.9, 0.5], 0.85).p
    b = guidance_distribution([10.3, 10.9, 10.5], 0.85).p
    assert a == pytest.approx(b, abs=1e-12)
    assert a[1] > a[2] > a[0]


def test_retriever_loss_hand_value():
    s = torch.zeros(2, dtype=torch.float64)
    assert retriever_loss(s, [0.9, 0.1], 0.8).item() == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2),
                                                                      abs=1e-12)
    assert retriever_loss(s, [0.5, 0.5], 0.8).item() == pytest.approx(0.0, abs=1e-15)


def test_stage1_zero_learning_rate_and_uniform_start(toy):
    task, cfg, gen, _ = _models(toy, learning_rate=0.0, weight_decay=0.0, copy=False)
    torch.nn.init.zeros_(gen.out.weight)
    torch.nn.init.zeros_(gen.out.bias)
    snap = {k: v.clone() for k, v in gen.state_dict().items()}
    ck = train_stage1(gen, task.train, cfg, max_steps=3)
    for k, v in gen.state_dict().items():
        assert torch.equal(v, snap[k])
    # first batch under a uniform output layer: mean (target length + EOS) * ln V
    from lapdog.trainer import _batches, rng_stream as rs
    first = next(_batches(len(task.train), cfg.batch_size, rs(cfg.seed, "data_order/stage1")))
    lens = [len(gen.vocab.encode(task.train[i].target)) + 1 for i in first]
    assert ck.losses[0] == pytest.approx(np.mean(lens) * math.log(len(gen.vocab)), rel=1e-5)


def test_count_unique_retrievals_cardinality(toy):
    task, cfg, gen, enc = _models(toy)
    from lapdog.retriever import StoryIndex, build_index
    idx = build_index(enc, task.corpus)
    assert count_unique_retrievals(enc, idx, task.heldout[:1], cfg) == cfg.K
    # an encoder that sends every text to the same vector retrieves the same K stories for all queries
    flat = new_retriever(gen.vocab, cfg)
    with torch.no_grad():
        flat.embed.weight.fill_(1.0)
    assert count_unique_retrievals(flat, build_index(flat, task.corpus), task.heldout, cfg) == cfg.K
    # two queries that rank disjoint blocks of the corpus first
    n, d = len(task.corpus), enc.d_model
    emb = np.zeros((n, d), np.float32)
    emb[: cfg.K, 0] = 1.0
    emb[cfg.K: 2 * cfg.K, 1] = 1.0
    fake = StoryIndex(emb, task.corpus.ids, 0, idx.fingerprint)
    from lapdog.retriever import retrieve
    a = retrieve(fake, np.eye(d)[0], cfg.K).ids
    b = retrieve(fake, np.eye(d)[1], cfg.K).ids
    assert len(set(a) | set(b)) == 2 * cfg.K


def test_zero_steps_leave_models_unchanged(toy):
    task, cfg, gen, enc = _models(toy)
    g0 = {k: v.clone() for k, v in gen.state_dict().items()}
    e0 = {k: v.clone() for k, v in enc.state_dict().items()}
    res = train_stage2(gen, enc, task.corpus, task.train, cfg, max_steps=0)
    assert res.reports == []
    for k, v in gen.state_dict().items():
        assert torch.equal(v, g0[k])
    for k, v in enc.state_dict().items():
        assert torch.equal(v, e0[k])


def test_rho_zero_candidates_are_raw_top_k(toy):
    task, cfg, gen, enc = _models(toy, rho=0.0)
    tr = Stage2Trainer(gen, enc, task.corpus, cfg)
    plan = tr.plan(task.train[:4])
    for r, c in zip(plan.retrieved, plan.candidates):
        assert r.items == c.items and not any(c.replaced)
