import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wayfinder import lexicon as lx
from wayfinder import model as md
from wayfinder import numerics as nx
from wayfinder import perturb as pt
from wayfinder import train as tr
from wayfinder.errors import ConfigError, NumericError
from wayfinder.seeding import as_rng

from conftest import make_corpus

SMALL = md.ModelConfig(hidden=32, heads=2, lang_layers=1, vis_layers=1, co_layers=1)

# Dyadic values keep the shifted differences exact in floating point.
dyadic = st.integers(-2 ** 20, 2 ** 20).map(lambda k: k / 1024)


def test_contrastive_closed_forms():
    assert tr.contrastive_loss(1.7, 1.7) == pytest.approx(math.log(2), abs=1e-9)
    assert tr.contrastive_loss(1.0, 0.0) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert tr.contrastive_loss(1.0, 0.0) == pytest.approx(0.3133, abs=1e-4)
    assert 0.0 <= tr.contrastive_loss(50.0, 0.0) < 1e-20


@given(dyadic, dyadic, dyadic)
def test_contrastive_shift_invariance(a, b, c):
    assert tr.contrastive_loss(a + c, b + c) == tr.contrastive_loss(a, b)
    assert tr.contrastive_loss(a, b) >= 0


def test_mle_closed_forms():
    assert tr.mle_loss(0.0, 0) == pytest.approx(math.log(2), abs=1e-12)
    assert tr.mle_loss(0.0, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert 0.0 <= tr.mle_loss(-50.0, 1) < 1e-20
    s = nx.Tensor(np.array([0.3, -1.2]), requires_grad=True)
    tr.mle_loss(s, np.array([1, 1])).sum().backward()
    assert np.all(s.grad > 0)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert nx.gradcheck(tr.contrastive_loss, [a, b]) < 1e-6
        y = rng.integers(0, 2, 4)
        assert nx.gradcheck(lambda s: tr.mle_loss(s, y), [a]) < 1e-6


def test_losses_reject_non_finite():
    with pytest.raises(NumericError):
        tr.contrastive_loss(float("nan"), 0.0)
    with pytest.raises(NumericError):
        tr.mle_loss(float("inf"), 1)


def test_train_config_problems():
    assert tr.TrainConfig().problems() == []
    bad = tr.TrainConfig(lr=0, batch_size=0, objective="hinge", mask_prob=0)
    with pytest.raises(ConfigError) as err:
        bad.validate()
    assert len(err.value.problems) == 4


@pytest.fixture(scope="module")
def data(lex):
    items = make_corpus(120, seed=11)
    vocab = md.Vocab.build([it.instruction.tokens for it in items], lex)
    bank = {it.id: md.encode_trajectory_input(it.trajectory) for it in items}
    pre = [tr.PretrainItem(it.id, list(it.instruction.tokens)) for it in items]
    pairs = list(pt.build_training_set(items, lex, pt.SynthConfig(), 3, 400))
    dev = pt.build_eval_set(items[:30], lex, pt.SynthConfig(), 4, 80)
    return items, vocab, bank, pre, pairs, dev


def test_mlm_loss_at_init_near_log_vocab(data):
    _, vocab, bank, pre, _, _ = data
    m = md.TwoTowerModel(md.ModelConfig(), vocab, 0, np.float64)
    with nx.no_grad():
        loss = tr.mlm_loss(m, m.params(), pre[:64], bank, as_rng(0), 0.15).item()
    assert abs(loss - math.log(len(vocab))) < 0.5


def test_pretrain_zero_steps_keeps_parameters(data):
    _, vocab, bank, pre, _, _ = data
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float64)
    before = m.store.digest()
    tr.pretrain(m, pre, bank, tr.TrainConfig(pretrain_steps=0))
    assert m.store.digest() == before
    with pytest.raises(ConfigError):
        tr.pretrain(m, [], bank, tr.TrainConfig())


def test_pretrain_logs_both_tasks(data):
    _, vocab, bank, pre, _, _ = data
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float32)
    log = io.StringIO()
    hist = tr.pretrain(m, pre, bank, tr.TrainConfig(pretrain_steps=4, batch_size=8), log)
    recs = [json.loads(l) for l in log.getvalue().splitlines()]
    assert [r["task"] for r in recs] == ["mlm", "pair", "mlm", "pair"]
    assert len(hist.losses) == 4


def test_shuffled_partners_never_match():
    items = [tr.PretrainItem(f"t{k}", ["go"]) for k in range(5)]
    partners = tr.shuffled_partners(items)
    assert sorted(partners) == sorted(it.traj_id for it in items)
    assert all(p != it.traj_id for p, it in zip(partners, items))


def test_patience_zero_returns_after_first_evaluation(data):
    _, vocab, bank, _, pairs, dev = data
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float32)
    cfg = tr.TrainConfig(max_steps=50, eval_every=5, patience=0, batch_size=8)
    _, hist = tr.finetune(m, pairs, dev, bank, cfg)
    assert len(hist.records) == 1 and len(hist.losses) == 5


def test_finetune_rejects_empty_data(data):
    _, vocab, bank, _, pairs, dev = data
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float32)
    with pytest.raises(ConfigError):
        tr.finetune(m, [], dev, bank, tr.TrainConfig())
    with pytest.raises(ConfigError):
        tr.finetune(m, pairs, [], bank, tr.TrainConfig())


def test_best_checkpoint_property(data):
    _, vocab, bank, _, pairs, dev = data
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float32)
    cfg = tr.TrainConfig(max_steps=60, eval_every=10, patience=10, batch_size=16, lr=1e-3)
    saved = []
    m, hist = tr.finetune(m, pairs, dev, bank, cfg, on_best=lambda s: saved.append(s.digest()))
    recorded = [r["dev_f1"] for r in hist.records]
    assert len(recorded) == 6
    assert 100 * hist.best_f1 == pytest.approx(max(recorded), abs=1e-3)
    from wayfinder import evaluation as ev
    _, f1 = ev.sweep_threshold(tr.dev_scores(m, dev, bank))
    assert f1 == pytest.approx(hist.best_f1, abs=1e-9)
    assert m.store.digest() == saved[-1]


def test_loss_decreases_over_200_steps(lex):
    items = make_corpus(300, seed=12)
    vocab = md.Vocab.build([it.instruction.tokens for it in items], lex)
    bank = {it.id: md.encode_trajectory_input(it.trajectory) for it in items}
    pairs = list(pt.build_training_set(items, lex, pt.SynthConfig(), 5, 2000))
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float32)
    probe = pairs[:128]
    with nx.no_grad():
        start = tr.pair_loss(m, m.params(), probe, bank, "contrastive").item()
    cfg = tr.TrainConfig(max_steps=200, eval_every=200, patience=1, lr=1e-3)
    dev = pt.build_eval_set(items[:20], lex, pt.SynthConfig(), 1, 40)
    m, _ = tr.finetune(m, pairs, dev, bank, cfg)
    with nx.no_grad():
        end = tr.pair_loss(m, m.params(), probe, bank, "contrastive").item()
    assert end < start


def test_separable_fixture_reaches_full_pair_accuracy(lex):
    # The negative differs only by "right" in place of "left": one token decides the pair.
    items = make_corpus(40, seed=13)
    vocab = md.Vocab.build([["walk", "left", "right", "."]], lex)
    bank = {it.id: md.encode_trajectory_input(it.trajectory) for it in items}
    pairs = [pt.ContrastivePair(f"p{k}", it.house_id, it.id, 1, ["walk", "left", "."], ["walk", "right", "."], [],
                                pt.INTRINSIC) for k, it in enumerate(items)]
    dev = [pt.LabeledExample(f"d{k}", it.id, ["walk", w, "."], 1, y, "none", "direction")
           for k, it in enumerate(items[:10]) for w, y in (("left", 0), ("right", 1))]
    m = md.TwoTowerModel(SMALL, vocab, 0, np.float32)
    cfg = tr.TrainConfig(max_steps=500, eval_every=50, patience=2, batch_size=16, lr=1e-3)
    m, hist = tr.finetune(m, pairs, dev, bank, cfg)
    lang_p = m.lang_batch([md.encode_instruction_input(p.pos_tokens, 1, vocab) for p in pairs])
    lang_n = m.lang_batch([md.encode_instruction_input(p.neg_tokens, 1, vocab) for p in pairs])
    vis = m.vision_batch([bank[p.traj_id] for p in pairs])
    assert np.all(m.score_batch(lang_p, vis) > m.score_batch(lang_n, vis))


def test_speaker_training_lowers_loss(data):
    _, vocab, bank, pre, _, _ = data
    sp = md.SpeakerModel(SMALL, vocab, 0, np.float32)
    hist = tr.train_speaker(sp, pre, bank, tr.TrainConfig(speaker_steps=60, batch_size=16, lr=1e-3))
    assert np.mean(hist.losses[-10:]) < np.mean(hist.losses[:10])
