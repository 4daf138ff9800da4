import collections

import pytest
from hypothesis import given, settings, strategies as st

from wayfinder import lexicon as lx
from wayfinder import perturb as pt
from wayfinder import worldgen as wg
from wayfinder.errors import ConfigError, SynthesisError

from conftest import make_corpus


def _tagged(text, lex):
    toks = text.split()
    return toks, lx.tag_tokens(toks, lex)


def test_direction_edit_walk_down_becomes_up(lex):
    toks, tags = _tagged("Walk down one flight of stairs .", lex)
    out, edits = pt.inject_intrinsic(toks, tags, lex, 1)
    assert out == "Walk up one flight of stairs .".split()
    assert edits == [pt.Edit(1, "direction", "down", "up")]


def test_room_edit_replaces_bedroom(lex):
    toks, tags = _tagged("Exit the bedroom .", lex)
    out, edits = pt.inject_intrinsic(toks, tags, lex, 0, exclude={0})
    assert out[2] != "bedroom" and out[2] in lex.rooms
    assert out[:2] == toks[:2] and len(out) == len(toks)
    assert edits[0].rule == "room"


def test_swap_rule_exchanges_door_and_step(lex):
    toks, tags = _tagged("Pass the door on the left and stop at the second step .", lex)
    out, edits = pt.inject_intrinsic(toks, tags, lex, 0)
    assert out[2] == "step" and out[11] == "door"
    assert {e.position for e in edits} == {2, 11}
    assert all(e.rule == "swap" for e in edits)


def test_no_candidates_raises(lex):
    toks, tags = _tagged("and then stop .", lex)
    with pytest.raises(SynthesisError):
        pt.inject_intrinsic(toks, tags, lex, 0)


def test_lone_object_falls_back_to_named_candidate(lex):
    toks, tags = _tagged("Pass the door and turn left .", lex)
    for seed in range(20):
        out, edits = pt.inject_intrinsic(toks, tags, lex, seed)
        assert edits[0].rule == "direction" and out[2] == "door"


def test_lone_object_without_fallback_raises(lex):
    toks, tags = _tagged("Pass the door .", lex)
    with pytest.raises(SynthesisError):
        pt.inject_intrinsic(toks, tags, lex, 0)


def test_extrinsic_self_donation_duplicates_sentence(lex):
    toks = "Walk out of the office . Walk into the hallway and turn left .".split()
    spans = wg.split_sentences(toks)
    for seed in range(50):
        out, (a, b) = pt.inject_extrinsic(toks, spans, [], seed)
        if out[a:b] == toks[6:] and a == len(toks):
            assert out == toks + toks[6:]
            return
    pytest.fail("no seed duplicated the second sentence at the end")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_extrinsic_span_properties(seed):
    toks = "Walk out of the office . Walk into the hallway and turn left .".split()
    donors = ["Go up the stairs .".split(), "Stop by the sofa . Turn right .".split()]
    out, (a, b) = pt.inject_extrinsic(toks, wg.split_sentences(toks), donors, seed)
    assert len(out) == len(toks) + (b - a)
    assert out[:a] + out[b:] == toks
    assert out[b - 1] == "."


def test_extrinsic_empty_instruction_raises():
    with pytest.raises(SynthesisError):
        pt.inject_extrinsic([], [], [], 0)


def test_degenerate_coins_give_single_edit(corpus, lex):
    cfg = pt.SynthConfig(double_edit_prob=0.0)
    for k, it in enumerate(corpus[:50]):
        p = pt.make_pair(it.instruction, it.trajectory, lex, cfg, k, kind=pt.INTRINSIC)
        assert p.pos_tokens == it.instruction.tokens and p.pos_labels == []
        assert len({e.position for e in p.edit_log}) == len(p.edit_log)
        assert p.edit_log[0].rule == "swap" or len(p.edit_log) == 1


def _sides(pair, item):
    yield pair.pos_tokens, pair.pos_labels, item.instruction.alignment
    yield pair.neg_tokens, pair.neg_labels, pair.neg_alignment


def _check_pair(pair, item, lex):
    assert pair.i in pair.neg_labels and pair.pos_i not in pair.pos_labels
    for toks, labels, align in _sides(pair, item):
        f = wg.faithfulness(toks, align, wg.split_sentences(toks), item.trajectory, item.house, lex)
        assert set(labels) <= set(f)
        for k, ok in f.items():
            assert ok != (k in labels), (pair.pair_id, k, toks[k])
    for e in pair.edit_log:
        if e.rule == "direction":
            assert e.new in lex.group(e.old) and e.new != e.old.lower()
        elif e.rule == "room":
            assert e.new in lex.rooms and e.new != e.old
    if pair.kind == pt.INTRINSIC:
        src = item.instruction.tokens
        neg_edited = {e.position for e in pair.edit_log if e.side == "neg"}
        if len(pair.neg_tokens) == len(src):
            assert {k for k in range(len(src)) if pair.neg_tokens[k] != src[k]} <= neg_edited
    else:
        a = pair.edit_log[0].position
        b = a + len(pair.neg_tokens) - len(pair.pos_tokens)
        assert pair.neg_tokens[:a] + pair.neg_tokens[b:] == pair.pos_tokens
        span_cands = [c for c in lx.select_candidates(pair.neg_tokens, lx.tag_tokens(pair.neg_tokens, lex), lex)
                      if a <= c < b]
        assert pair.neg_labels == span_cands


def test_pairs_are_sound(lex):
    corpus = make_corpus(150, seed=4)
    by_id = {c.id: c for c in corpus}
    for p in pt.build_training_set(corpus, lex, pt.SynthConfig(), 5, 2000):
        _check_pair(p, by_id[p.traj_id], lex)


def test_pair_round_trip(corpus, lex):
    p = pt.make_pair(corpus[0].instruction, corpus[0].trajectory, lex, pt.SynthConfig(), 3, traj_id="t0")
    q = pt.ContrastivePair.from_dict(p.to_dict())
    assert q.to_dict() == p.to_dict()


def test_mix_and_double_edit_frequency(lex):
    corpus = make_corpus(150, seed=2)
    pairs = list(pt.build_training_set(corpus, lex, pt.SynthConfig(), 9, 4000))
    kinds = collections.Counter(p.kind for p in pairs)
    assert abs(kinds[pt.INTRINSIC] / 4000 - 0.7) < 0.03
    intr = [p for p in pairs if p.kind == pt.INTRINSIC]
    # The first negative edit is one log entry (two for a swap); any later "neg" entry is the second edit.
    second = sum(any(e.side == "neg" for e in p.edit_log[2 if p.edit_log[0].rule == "swap" else 1:]) for p in intr)
    assert abs(second / len(intr) - 0.5) < 0.03


def test_training_stream_deterministic_and_empty(corpus, lex):
    cfg = pt.SynthConfig()
    a = [p.to_dict() for p in pt.build_training_set(corpus, lex, cfg, 1, 30)]
    b = [p.to_dict() for p in pt.build_training_set(corpus, lex, cfg, 1, 30)]
    assert a == b
    assert list(pt.build_training_set(corpus, lex, cfg, 1, 0)) == []
    with pytest.raises(ConfigError):
        list(pt.build_training_set([], lex, cfg, 1, 5))


def test_follower_filter_on_speaker_positives(lex):
    corpus = make_corpus(30, seed=6)
    cfg = pt.SynthConfig()
    rng_words = ["walk", "left", "right", "forward", "kitchen", "."]
    spk = []
    for k, it in enumerate(corpus):
        toks = it.instruction.tokens if k % 2 else [rng_words[(k + j) % 6] for j in range(8)]
        ins = wg.GroundTruthInstruction(toks, lx.tag_tokens(toks, lex), wg.split_sentences(toks), [])
        spk.append(pt.CorpusItem(it.id + "-spk", it.house_id, it.house, it.trajectory, ins, source="speaker"))
    kept = [it for it in spk if pt.admissible(it, cfg, 0)]
    assert 0 < len(kept) < len(spk)
    for it in kept:
        t = it.trajectory
        rerun = wg.ensemble_success_rate(it.house, it.instruction.tokens, t.start, t.goal, cfg.follower_k, 0)
        assert rerun == it.success_rate >= 0.8


def test_eval_set_labels(lex):
    corpus = make_corpus(40, seed=8)
    cfg = pt.SynthConfig()
    clean = pt.build_eval_set(corpus, lex, pt.SynthConfig(eval_clean=1.0, eval_intrinsic=0.0, eval_extrinsic=0.0), 0, 100)
    assert len(clean) == 100 and all(e.label == 0 for e in clean)
    dev = pt.build_eval_set(corpus, lex, cfg, 0, 209)
    test = pt.build_eval_set(corpus, lex, cfg, 1, 632)
    assert (len(dev), len(test)) == (209, 632)
    assert all(e.word_type in (lx.DIRECTION, lx.ROOM, lx.OBJECT) for e in test)
    assert 0 < sum(e.label for e in test) < len(test)
    by_id = {c.id: c for c in corpus}
    for e in test:
        if e.kind == pt.INTRINSIC:
            src = by_id[e.traj_id].instruction.tokens
            assert len(e.tokens) == len(src) and e.tokens[e.i] != src[e.i]


def test_single_flip_labels_exactly_that_index(lex):
    corpus = make_corpus(40, seed=8)
    cfg = pt.SynthConfig(double_edit_prob=0.0)
    for k, it in enumerate(corpus):
        dirs = [c for c in lx.select_candidates(it.instruction.tokens, it.instruction.tags, lex)
                if it.instruction.tags[c] == lx.DIRECTION]
        toks = list(it.instruction.tokens)
        c = dirs[0]
        s, e = lx.phrase_at(toks, c, lex)
        toks[s:e] = lx.alternative_direction(" ".join(toks[s:e]), lex, k).split()
        if e - s != 1 or len(toks) != len(it.instruction.tokens):
            continue
        f = wg.faithfulness(toks, it.instruction.alignment, wg.split_sentences(toks), it.trajectory, it.house, lex)
        assert [k2 for k2, ok in f.items() if not ok] == [c]


def test_synth_config_problems():
    assert pt.SynthConfig().problems() == []
    probs = pt.SynthConfig(intrinsic_fraction=2, follower_k=0, eval_clean=0.9).problems()
    assert len(probs) == 3
