"""Synthetic intrinsic and extrinsic hallucinations, contrastive pairs and labeled eval sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

from . import lexicon as lx
from .errors import ConfigError, SynthesisError
from .seeding import SeedLike, as_rng, mix
from .worldgen import (GroundTruthInstruction, ToyHouse, Trajectory, ensemble_success_rate,
                       split_sentences)

INTRINSIC = "intrinsic"
EXTRINSIC = "extrinsic"
NONE = "none"


@dataclass(frozen=True)
class SynthConfig:
    intrinsic_fraction: float = 0.7
    double_edit_prob: float = 0.5
    self_donor_prob: float = 0.5
    swap_retries: int = 10
    follower_k: int = 5
    follower_threshold: float = 0.8
    eval_clean: float = 0.4
    eval_intrinsic: float = 0.4
    eval_extrinsic: float = 0.2

    def problems(self) -> list[str]:
        out = []
        for name in ("intrinsic_fraction", "double_edit_prob", "self_donor_prob", "follower_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} must lie in [0, 1] (got {v})")
        if self.follower_k < 1:
            out.append("follower_k must be >= 1")
        mix_ = (self.eval_clean, self.eval_intrinsic, self.eval_extrinsic)
        if min(mix_) < 0 or abs(sum(mix_) - 1.0) > 1e-9:
            out.append("eval_clean + eval_intrinsic + eval_extrinsic must sum to 1")
        return out


@dataclass(frozen=True)
class Edit:
    position: int
    rule: str  # direction | room | swap | extrinsic
    old: str
    new: str
    side: str = "neg"

    def to_list(self) -> list:
        return [self.position, self.rule, self.old, self.new, self.side]


@dataclass
class CorpusItem:
    """A positive instruction with the trajectory it describes."""
    id: str
    house_id: str
    house: ToyHouse
    trajectory: Trajectory
    instruction: GroundTruthInstruction
    source: str = "template"
    success_rate: Optional[float] = None


@dataclass
class ContrastivePair:
    pair_id: str
    house_id: str
    traj_id: str
    i: int
    pos_tokens: list[str]
    neg_tokens: list[str]
    edit_log: list[Edit]
    kind: str
    pos_labels: list[int] = field(default_factory=list)
    neg_labels: list[int] = field(default_factory=list)
    neg_alignment: list = field(default_factory=list)

    @property
    def pos_i(self) -> int:
        """Index classified in the positive (clamped when an extrinsic span runs past its end)."""
        return min(self.i, len(self.pos_tokens) - 1)

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "house_id": self.house_id, "traj_id": self.traj_id,
                "i": self.i, "pos_tokens": self.pos_tokens, "neg_tokens": self.neg_tokens,
                "edit_log": [e.to_list() for e in self.edit_log], "kind": self.kind,
                "pos_labels": self.pos_labels, "neg_labels": self.neg_labels}

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastivePair":
        return cls(d["pair_id"], d["house_id"], d["traj_id"], int(d["i"]), list(d["pos_tokens"]),
                   list(d["neg_tokens"]), [Edit(*e) for e in d["edit_log"]], d["kind"],
                   list(d.get("pos_labels", [])), list(d.get("neg_labels", [])))


@dataclass
class LabeledExample:
    id: str
    traj_id: str
    tokens: list[str]
    i: int
    label: int
    kind: str
    word_type: str
    house_id: str = ""

    def to_dict(self) -> dict:
        return {"id": self.id, "traj_id": self.traj_id, "house_id": self.house_id,
                "tokens": self.tokens, "i": self.i, "label": self.label, "kind": self.kind,
                "word_type": self.word_type}

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledExample":
        return cls(d["id"], d["traj_id"], list(d["tokens"]), int(d["i"]), int(d["label"]),
                   d["kind"], d["word_type"], d.get("house_id", ""))


# -- single edits ----------------------------------------------------------------

def _replace(tokens: list[str], start: int, end: int, new: str, single_token: bool) -> list[str]:
    repl = [new] if single_token else new.split()
    return tokens[:start] + repl + tokens[end:]


def inject_intrinsic(tokens: Sequence[str], tags: Sequence[str], lex: lx.Lexicon, seed: SeedLike,
                     exclude: Iterable[int] = (), swap_retries: int = 10) -> tuple[list[str], list[Edit]]:
    """Replace one candidate word with an inconsistent alternative.

    Directions move within their word group, rooms are redrawn from the room
    list, any other noun is swapped with a different noun of the instruction
    (both positions are recorded). Positions in ``exclude`` are never touched.
    """
    rng = as_rng(seed)
    tokens = list(tokens)
    banned = set(exclude)
    spans = {s: (s, e, t) for s, e, t in lx.tag_spans(tokens, lex)}
    cands = [s for s in lx.select_candidates(tokens, tags, lex) if s not in banned]
    if not cands:
        raise SynthesisError("instruction has no editable candidate word")
    c = cands[int(rng.integers(len(cands)))]

    def edit_named(pos: int) -> tuple[list[str], list[Edit]]:
        s, e, _ = spans[pos]
        old = " ".join(tokens[s:e])
        if tags[pos] == lx.DIRECTION:
            new = lx.alternative_direction(old, lex, rng)
            return _replace(tokens, s, e, new, single_token=False), [Edit(s, "direction", old, new)]
        new = lx.alternative_room(old, lex, rng)
        return _replace(tokens, s, e, new, single_token=True), [Edit(s, "room", old, new)]

    if tags[c] in (lx.DIRECTION, lx.ROOM):
        return edit_named(c)

    partners = [s for s in cands if s != c and tags[s] == lx.OBJECT]
    if partners:
        for _ in range(swap_retries):
            p = partners[int(rng.integers(len(partners)))]
            if tokens[p].lower() != tokens[c].lower():
                out = list(tokens)
                out[c], out[p] = tokens[p], tokens[c]
                return out, [Edit(c, "swap", tokens[c], tokens[p]), Edit(p, "swap", tokens[p], tokens[c])]
    named = [s for s in cands if tags[s] in (lx.DIRECTION, lx.ROOM)]
    if not named:
        raise SynthesisError("no legal swap partner and no direction or room to edit")
    return edit_named(named[int(rng.integers(len(named)))])


def inject_extrinsic(tokens: Sequence[str], sentence_spans: Sequence[tuple[int, int]],
                     donor_pool: Sequence[Sequence[str]], seed: SeedLike,
                     self_donor_prob: float = 0.5) -> tuple[list[str], tuple[int, int]]:
    """Insert a donor sentence after a uniformly chosen sentence; returns the inserted span."""
    if not tokens or not sentence_spans:
        raise SynthesisError("cannot add an extrinsic sentence to an empty instruction")
    rng = as_rng(seed)
    use_self = not donor_pool or rng.random() < self_donor_prob
    if use_self:
        a, b = sentence_spans[int(rng.integers(len(sentence_spans)))]
        donor = list(tokens[a:b])
    else:
        other = donor_pool[int(rng.integers(len(donor_pool)))]
        sents = split_sentences(other) or [(0, len(other))]
        a, b = sents[int(rng.integers(len(sents)))]
        donor = list(other[a:b])
    if not donor:
        raise SynthesisError("empty donor sentence")
    after = sentence_spans[int(rng.integers(len(sentence_spans)))][1]
    out = list(tokens[:after]) + donor + list(tokens[after:])
    return out, (after, after + len(donor))


# -- instruction-level helpers ---------------------------------------------------

def _retag(tokens: list[str], base: GroundTruthInstruction, lex: lx.Lexicon) -> GroundTruthInstruction:
    return GroundTruthInstruction(tokens, lx.tag_tokens(tokens, lex), split_sentences(tokens),
                                  list(base.alignment))


def _shifted(positions: Iterable[int], edits: Sequence[Edit], before: int, after: int) -> set[int]:
    """Move positions past a length-changing edit."""
    delta = after - before
    if not delta or not edits:
        return set(positions)
    at = edits[0].position
    return {p + delta if p > at else p for p in positions}


def intrinsic_edit(instr: GroundTruthInstruction, lex: lx.Lexicon, seed: SeedLike,
                   exclude: Iterable[int] = (), swap_retries: int = 10):
    toks, edits = inject_intrinsic(instr.tokens, instr.tags, lex, seed, exclude, swap_retries)
    return _retag(toks, instr, lex), edits


def extrinsic_edit(instr: GroundTruthInstruction, donor_pool, lex: lx.Lexicon, seed: SeedLike,
                   self_donor_prob: float = 0.5):
    toks, (a, b) = inject_extrinsic(instr.tokens, instr.sentence_spans, donor_pool, seed, self_donor_prob)
    sent_after = next(k for k, (_, e) in enumerate(instr.sentence_spans) if e == a)
    alignment = list(instr.alignment)
    alignment.insert(sent_after + 1, None)
    new = GroundTruthInstruction(toks, lx.tag_tokens(toks, lex), split_sentences(toks), alignment)
    return new, (a, b)


def _candidates(instr: GroundTruthInstruction, lex: lx.Lexicon) -> list[int]:
    return lx.select_candidates(instr.tokens, instr.tags, lex)


def perturb_instruction(instr: GroundTruthInstruction, kind: str, lex: lx.Lexicon, seed: SeedLike,
                        cfg: SynthConfig, donor_pool=()) -> tuple[GroundTruthInstruction, set[int], list[Edit]]:
    """Apply one perturbation recipe; returns the instruction, hallucinated candidate indices and edits."""
    rng = as_rng(seed)
    if kind == NONE:
        return instr, set(), []
    if kind == INTRINSIC:
        neg, edits = intrinsic_edit(instr, lex, rng, swap_retries=cfg.swap_retries)
        labels = {e.position for e in edits}
        if rng.random() < cfg.double_edit_prob:
            neg2, more = intrinsic_edit(neg, lex, rng, exclude=labels, swap_retries=cfg.swap_retries)
            labels = _shifted(labels, more, len(neg.tokens), len(neg2.tokens)) | {e.position for e in more}
            neg, edits = neg2, edits + more
        return neg, labels, edits
    if kind == EXTRINSIC:
        neg, (a, b) = extrinsic_edit(instr, donor_pool, lex, rng, cfg.self_donor_prob)
        labels = {c for c in _candidates(neg, lex) if a <= c < b}
        edits = [Edit(a, "extrinsic", "", " ".join(neg.tokens[a:b]))]
        return neg, labels, edits
    raise ValueError(f"unknown perturbation kind {kind!r}")


# -- pairs ---------------------------------------------------------------------

def make_pair(positive: GroundTruthInstruction, trajectory: Trajectory, lex: lx.Lexicon,
              cfg: SynthConfig, seed: SeedLike, donor_pool: Sequence[Sequence[str]] = (),
              pair_id: str = "", traj_id: str = "", kind: Optional[str] = None) -> ContrastivePair:
    """Build one contrastive pair from a faithful positive.

    Intrinsic: the negative gets one edit; then, each with probability
    ``double_edit_prob``, the positive gets an edit away from the classified
    index and the negative gets an edit away from its earlier edits.
    Extrinsic: the negative gets an inserted sentence and the classified index
    is a candidate inside it.
    """
    rng = as_rng(seed)
    if kind is None:
        kind = INTRINSIC if rng.random() < cfg.intrinsic_fraction else EXTRINSIC
    house_id = trajectory.house_id
    if kind == INTRINSIC:
        neg, edits = intrinsic_edit(positive, lex, rng, swap_retries=cfg.swap_retries)
        i = edits[0].position
        neg_labels = {e.position for e in edits}
        pos = positive
        pos_labels: set[int] = set()
        log = list(edits)
        coin_pos = rng.random() < cfg.double_edit_prob
        coin_neg = rng.random() < cfg.double_edit_prob
        if coin_pos:
            try:
                pos2, more = intrinsic_edit(positive, lex, rng, exclude={i}, swap_retries=cfg.swap_retries)
            except SynthesisError:
                pass
            else:
                if len(pos2.tokens) == len(positive.tokens):
                    pos = pos2
                    pos_labels = {e.position for e in more}
                    log += [Edit(e.position, e.rule, e.old, e.new, "pos") for e in more]
        if coin_neg:
            try:
                neg2, more = intrinsic_edit(neg, lex, rng, exclude=neg_labels, swap_retries=cfg.swap_retries)
            except SynthesisError:
                pass
            else:
                neg_labels = _shifted(neg_labels, more, len(neg.tokens), len(neg2.tokens))
                neg_labels |= {e.position for e in more}
                neg = neg2
                log += list(more)
        return ContrastivePair(pair_id, house_id, traj_id, i, list(pos.tokens), list(neg.tokens), log,
                               INTRINSIC, sorted(pos_labels), sorted(neg_labels), list(neg.alignment))
    neg, (a, b) = extrinsic_edit(positive, donor_pool, lex, rng, cfg.self_donor_prob)
    span_cands = [c for c in _candidates(neg, lex) if a <= c < b]
    i = span_cands[int(rng.integers(len(span_cands)))] if span_cands else a
    log = [Edit(a, "extrinsic", "", " ".join(neg.tokens[a:b]))]
    return ContrastivePair(pair_id, house_id, traj_id, i, list(positive.tokens), list(neg.tokens), log,
                           EXTRINSIC, [], sorted(span_cands), list(neg.alignment))


def admissible(item: CorpusItem, cfg: SynthConfig, seed: int = 0) -> bool:
    """Template positives always pass; model-generated ones need the follower ensemble."""
    if item.source == "template":
        return True
    if item.success_rate is None:
        item.success_rate = ensemble_success_rate(item.house, item.instruction.tokens,
                                                  item.trajectory.start, item.trajectory.goal,
                                                  cfg.follower_k, seed)
    return item.success_rate >= cfg.follower_threshold


def build_training_set(corpus: Sequence[CorpusItem], lex: lx.Lexicon, cfg: SynthConfig, seed: int,
                       size: int) -> Iterator[ContrastivePair]:
    """Deterministic stream of ``size`` pairs cycling over admissible positives."""
    if size < 0:
        raise ConfigError("training set size must be >= 0")
    if not corpus:
        raise ConfigError("training corpus is empty")
    if size == 0:
        return
    pool = [it for it in corpus if admissible(it, cfg, mix(seed, "follower", it.id))]
    if not pool:
        raise ConfigError("no admissible positives in the training corpus")
    donors = [it.instruction.tokens for it in pool]
    n = len(pool)
    epoch_order: list[int] = []
    for k in range(size):
        if k % n == 0:
            epoch_order = [int(x) for x in as_rng(mix(seed, "epoch", k // n)).permutation(n)]
        j = epoch_order[k % n]
        item = pool[j]
        rng = as_rng(mix(seed, "pair", k))
        others = donors[:j] + donors[j + 1:]
        yield make_pair(item.instruction, item.trajectory, lex, cfg, rng, others,
                        pair_id=f"pair-{k:06d}", traj_id=item.id)


def build_eval_set(corpus: Sequence[CorpusItem], lex: lx.Lexicon, cfg: SynthConfig, seed: int,
                   size: int, prefix: str = "ex") -> list[LabeledExample]:
    """Emit every candidate of clean and perturbed held-out instructions until ``size`` examples."""
    if not corpus:
        raise ConfigError("evaluation corpus is empty")
    donors = [it.instruction.tokens for it in corpus]
    order = [int(x) for x in as_rng(mix(seed, "eval-order")).permutation(len(corpus))]
    kinds = (NONE, INTRINSIC, EXTRINSIC)
    probs = (cfg.eval_clean, cfg.eval_intrinsic, cfg.eval_extrinsic)
    out: list[LabeledExample] = []
    k = 0
    while len(out) < size:
        j = order[k % len(order)]
        item = corpus[j]
        rng = as_rng(mix(seed, "eval", k))
        kind = kinds[int(rng.choice(3, p=probs))]
        others = donors[:j] + donors[j + 1:]
        instr, labels, _ = perturb_instruction(item.instruction, kind, lex, rng, cfg, others)
        for c in _candidates(instr, lex):
            if len(out) >= size:
                break
            y = int(c in labels)
            out.append(LabeledExample(f"{prefix}-{len(out):05d}", item.id, list(instr.tokens), c, y,
                                      kind if y else NONE, instr.tags[c], item.house_id))
        k += 1
    return out
