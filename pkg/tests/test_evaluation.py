import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wayfinder import evaluation as ev
from wayfinder import model as md
from wayfinder.errors import InputError, UndefinedMetricError
from wayfinder.perturb import LabeledExample


def _scored(probs, labels, types=None):
    types = types or ["direction"] * len(probs)
    return [ev.ScoredExample(f"e{k}", float(p), int(y), t) for k, (p, y, t) in enumerate(zip(probs, labels, types))]


def _examples(n, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledExample(f"x{k}", "t", ["go"], 0, int(rng.random() < 0.3), "none", "direction")
            for k in range(n)]


def test_prf_examples():
    preds = [1, 1, 1, 1, 1, 0, 0]
    labels = [1, 1, 1, 0, 0, 1, 0]
    p, r, f = ev.prf(preds, labels)
    assert (p, r) == (0.6, 0.75) and f == pytest.approx(2 / 3, abs=1e-12)
    assert ev.prf([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0)
    assert ev.prf([0, 0], [1, 0]) == (0.0, 0.0, 0.0)
    with pytest.raises(InputError):
        ev.prf([1], [1, 0])


def _confusion_oracle(preds, labels):
    tp = fp = fn = 0
    for a, b in zip(preds, labels):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def test_prf_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, 2, n)
        labels = rng.integers(0, 2, n)
        assert ev.prf(preds, labels) == _confusion_oracle(preds.tolist(), labels.tolist())


def test_sweep_example():
    t, f = ev.sweep_threshold(_scored([0.2, 0.6, 0.9], [0, 1, 1]))
    assert t == pytest.approx(0.4) and f == 1.0


def test_sweep_all_positive():
    dev = _scored([0.3, 0.1, 0.7], [1, 1, 1])
    t, f = ev.sweep_threshold(dev)
    assert t == 0.0 and ev.metrics_at(dev, t)["recall"] == 100.0


def test_sweep_undefined():
    with pytest.raises(UndefinedMetricError):
        ev.sweep_threshold([])
    with pytest.raises(UndefinedMetricError):
        ev.sweep_threshold(_scored([0.1, 0.9], [0, 0]))


def test_sweep_matches_brute_force_over_candidates():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        probs = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, n)
        if not labels.any():
            labels[0] = 1
        dev = _scored(probs, labels)
        t, f = ev.sweep_threshold(dev)
        brute = [(ev.prf(probs >= c, labels)[2], c) for c in ev.threshold_candidates(probs)]
        best = max(b[0] for b in brute)
        assert f == pytest.approx(best, abs=1e-12)
        assert t == min(c for v, c in brute if v == best)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.data())
def test_recall_monotone_in_threshold(probs, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(probs), max_size=len(probs)))
    scored = _scored(probs, labels)
    cands = ev.threshold_candidates(probs)
    recalls = [ev.metrics_at(scored, c)["recall"] for c in cands]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_random_baseline():
    ex = _examples(10_000)
    assert all(e.prob == 0.0 for e in ev.random_baseline(ex[:50], 0.0, 1))
    assert all(e.prob == 1.0 for e in ev.random_baseline(ex[:50], 1.0, 1))
    scored = ev.random_baseline(ex, 0.3, 2)
    rec = ev.metrics_at(scored, 0.5)["recall"] / 100
    assert abs(rec - 0.3) <= 0.05
    assert [e.prob for e in scored] == [e.prob for e in ev.random_baseline(ex, 0.3, 2)]
    with pytest.raises(InputError):
        ev.random_baseline(ex, 1.5)


class _FixedSpeaker:
    def __init__(self, lp):
        self.lp = lp

    def token_logprobs(self, items, batch_size=64):
        return np.full(len(items), self.lp)


def test_speaker_probability_arithmetic():
    ex = _examples(3)
    bank = {"t": None}
    assert [e.prob for e in ev.speaker_prob_baseline(_FixedSpeaker(0.0), ex, bank)] == [0.0] * 3
    probs = [e.prob for e in ev.speaker_prob_baseline(_FixedSpeaker(np.log(0.9)), ex, bank)]
    assert probs == pytest.approx([0.1] * 3, abs=1e-12)


def test_scored_example_validates():
    with pytest.raises(InputError):
        ev.ScoredExample("a", 1.5, 0, "room")
    e = ev.ScoredExample("a", 0.25, 1, "room")
    assert ev.ScoredExample.from_dict(e.to_dict()) == e


def test_identical_dev_and_test_give_identical_f1():
    rng = np.random.default_rng(3)
    s = _scored(rng.random(50), rng.integers(0, 2, 50))
    r = ev.evaluate_system("x", s, s)
    assert r.dev["f1"] == r.test["f1"]


def test_word_type_partition_and_report():
    rng = np.random.default_rng(4)
    types = list(rng.choice(ev.WORD_TYPES, 60))
    dev = _scored(rng.random(60), rng.integers(0, 2, 60), types)
    test = _scored(rng.random(60), rng.integers(0, 2, 60), types)
    rep = ev.report({"a": (dev, test), "b": (dev, dev)}, {"pretrain=on,objective=mle": "a"}, {"seed": 1})
    by = rep.systems["a"].by_type
    assert sum(m["support"] for m in by.values()) == rep.systems["a"].test["support"] == 60
    assert rep.ablation == {"pretrain=on,objective=mle": rep.systems["a"].test["f1"]}
    d = rep.to_dict()
    assert d["header"] == {"seed": 1} and set(d["systems"]) == {"a", "b"}
    text = rep.to_text()
    assert text.startswith('# {"seed": 1}') and "Ablation grid" in text
    assert rep.to_svg().startswith("<svg")
