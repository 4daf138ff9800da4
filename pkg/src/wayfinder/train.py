"""Pre-training, contrastive and MLE fine-tuning, and speaker training loops."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence, TextIO

import numpy as np

from . import evaluation as ev
from . import model as md
from . import numerics as nx
from .errors import ConfigError, NumericError
from .numerics import Tensor
from .perturb import ContrastivePair, LabeledExample
from .seeding import as_rng, mix

OBJECTIVES = ("contrastive", "mle")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    max_steps: int = 5000
    seed: int = 0
    objective: str = "contrastive"
    pretrain: bool = True
    eval_every: int = 100
    patience: int = 10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    pretrain_steps: int = 1000
    mask_prob: float = 0.15
    speaker_steps: int = 1000
    dtype: str = "float32"

    def problems(self) -> list[str]:
        out = []
        if not self.lr > 0:
            out.append(f"lr must be positive (got {self.lr})")
        for name in ("batch_size", "eval_every"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        for name in ("max_steps", "patience", "pretrain_steps", "speaker_steps"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.objective not in OBJECTIVES:
            out.append(f"objective must be one of {OBJECTIVES} (got {self.objective!r})")
        if not 0.0 < self.mask_prob <= 1.0:
            out.append("mask_prob must lie in (0, 1]")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if self.dtype not in ("float32", "float64"):
            out.append("dtype must be float32 or float64")
        return out

    def validate(self) -> "TrainConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ----------------------------------------------------------------------

def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float))):
            raise NumericError("loss received a non-finite score")


def contrastive_loss(s_pos, s_neg):
    """``-log softmax([s+, s-])[0] = log(1 + exp(s- - s+))``, elementwise."""
    _finite(s_pos, s_neg)
    if isinstance(s_pos, Tensor) or isinstance(s_neg, Tensor):
        return nx.softplus(nx.sub(s_neg, s_pos))
    out = _np_softplus(np.asarray(s_neg, dtype=float) - np.asarray(s_pos, dtype=float))
    return float(out) if out.ndim == 0 else out


def mle_loss(s, y):
    """Binary cross-entropy of ``C = 1 - sigmoid(s)`` against label ``y`` (1 = hallucination)."""
    _finite(s)
    if isinstance(s, Tensor):
        y = np.asarray(y, dtype=s.data.dtype)
        return nx.softplus(s) * y + nx.softplus(-s) * (1.0 - y)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    out = y * _np_softplus(s) + (1 - y) * _np_softplus(-s)
    return float(out) if out.ndim == 0 else out


# -- shared machinery ----------------------------------------------------------------

@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_step: Optional[int] = None
    best_f1: float = -1.0
    best_threshold: Optional[float] = None


def _adam(store: nx.ParamStore, cfg: TrainConfig):
    nx.adamw_step(store, store.grads(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.weight_decay)


def _log(stream: Optional[TextIO], rec: dict):
    if stream is not None:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")


def _epoch_batches(n: int, batch: int, seed: int, tag: str):
    """Endless batches of indices; a fresh seeded permutation each epoch."""
    epoch = 0
    while True:
        order = as_rng(mix(seed, tag, epoch)).permutation(n)
        for s in range(0, n, batch):
            part = order[s:s + batch]
            if len(part) < batch and n >= batch:
                part = np.concatenate([part, order[: batch - len(part)]])
            yield [int(k) for k in part]
        epoch += 1


# -- pre-training ------------------------------------------------------------------

@dataclass
class PretrainItem:
    traj_id: str
    tokens: list[str]


def _mask_tokens(ids: list[int], rng: np.random.Generator, prob: float) -> tuple[list[int], list[int]]:
    """Replace ``prob`` of the body tokens (at least one) with [MASK]; returns (inputs, targets)."""
    body = list(range(1, len(ids) - 1))
    n = max(1, int(round(prob * len(body))))
    chosen = set(int(k) for k in rng.choice(body, size=min(n, len(body)), replace=False))
    inputs = [md.MASK if k in chosen else t for k, t in enumerate(ids)]
    targets = [t if k in chosen else md.PAD for k, t in enumerate(ids)]
    return inputs, targets


def _dropout(model, seed: int, phase: str, step: int):
    """Training-time dropout with a mask stream keyed by phase and step."""
    return md.dropout(model.cfg.dropout, as_rng(mix(seed, "dropout", phase, step)))


def mlm_loss(model: md.TwoTowerModel, P, items: Sequence[PretrainItem], bank, rng, mask_prob: float) -> Tensor:
    seqs, tgts = [], []
    for it in items:
        ids = md.encode_instruction_input(it.tokens, None, model.vocab, model.cfg.max_len)
        x, y = _mask_tokens(ids, rng, mask_prob)
        seqs.append(x)
        tgts.append(y)
    lang = model.lang_batch(seqs)
    targets = np.full(lang.ids.shape, md.PAD, dtype=np.int64)
    for b, y in enumerate(tgts):
        targets[b, :len(y)] = y
    weights = (targets != md.PAD).astype(np.float64)
    vis = model.vision_batch([bank[it.traj_id] for it in items])
    states, _ = model.encode(P, lang, vis)
    return nx.cross_entropy(model.mlm_logits(P, states), targets, weights)


def pair_prediction_scores(model: md.TwoTowerModel, P, items: Sequence[PretrainItem], bank,
                           shuffled: Sequence[str]) -> tuple[Tensor, Tensor]:
    """Whole-instruction scores with the matched and with a shuffled trajectory."""
    seqs = [md.encode_instruction_input(it.tokens, None, model.vocab, model.cfg.max_len) for it in items]
    lang = model.lang_batch(seqs + seqs)
    vis = model.vision_batch([bank[it.traj_id] for it in items] + [bank[t] for t in shuffled])
    s = model.score_tensor(P, lang, vis)
    n = len(items)
    return s[:n], s[n:]


def shuffled_partners(items: Sequence[PretrainItem]) -> list[str]:
    """Each item's trajectory is replaced by the next item's (a cyclic shift)."""
    ids = [it.traj_id for it in items]
    return ids[1:] + ids[:1]


def pretrain(model: md.TwoTowerModel, corpus: Sequence[PretrainItem], bank: Mapping[str, md.VisionInput],
             cfg: TrainConfig, log: Optional[TextIO] = None) -> History:
    """Alternate masked-token prediction and pair prediction on positives."""
    cfg.validate()
    if not corpus:
        raise ConfigError("pre-training corpus is empty")
    if len(corpus) < 2:
        raise ConfigError("pair prediction needs at least two instructions")
    hist = History()
    batches = _epoch_batches(len(corpus), cfg.batch_size, cfg.seed, "pretrain-epoch")
    for step in range(cfg.pretrain_steps):
        items = [corpus[k] for k in next(batches)]
        if len(items) < 2:
            items = [corpus[0], corpus[1]]
        rng = as_rng(mix(cfg.seed, "pretrain-step", step))
        P = model.store.leaves()
        with _dropout(model, cfg.seed, "pretrain", step):
            if step % 2 == 0:
                loss = mlm_loss(model, P, items, bank, rng, cfg.mask_prob)
                task = "mlm"
            else:
                s_pos, s_neg = pair_prediction_scores(model, P, items, bank, shuffled_partners(items))
                loss = contrastive_loss(s_pos, s_neg).mean()
                task = "pair"
        loss.backward()
        _adam(model.store, cfg)
        hist.losses.append(loss.item())
        _log(log, {"step": step + 1, "task": task, "loss": round(loss.item(), 6)})
    return hist


def pair_accuracy(model: md.TwoTowerModel, corpus: Sequence[PretrainItem], bank, batch_size: int = 64) -> float:
    """Fraction of instructions scoring higher with their own trajectory than a shuffled one."""
    if len(corpus) < 2:
        raise ConfigError("pair accuracy needs at least two instructions")
    partners = shuffled_partners(corpus)
    hits = 0
    for s in range(0, len(corpus), batch_size):
        with nx.no_grad():
            a, b = pair_prediction_scores(model, model.params(), corpus[s:s + batch_size], bank,
                                          partners[s:s + batch_size])
        hits += int(np.sum(a.data > b.data))
    return hits / len(corpus)


# -- fine-tuning -------------------------------------------------------------------

def pair_loss(scorer, P, pairs: Sequence[ContrastivePair], bank, objective: str) -> Tensor:
    max_len = scorer.cfg.max_len
    pos = [md.encode_instruction_input(p.pos_tokens, p.pos_i, scorer.vocab, max_len) for p in pairs]
    neg = [md.encode_instruction_input(p.neg_tokens, p.i, scorer.vocab, max_len) for p in pairs]
    vis = [bank[p.traj_id] for p in pairs]
    s = scorer.score_tensor(P, scorer.lang_batch(pos + neg), scorer.vision_batch(vis + vis))
    n = len(pairs)
    if objective == "contrastive":
        return contrastive_loss(s[:n], s[n:]).mean()
    y = np.concatenate([np.zeros(n), np.ones(n)])
    return mle_loss(s, y).mean()


def dev_scores(scorer, dev: Sequence[LabeledExample], bank) -> list[ev.ScoredExample]:
    return ev.model_baseline(scorer, dev, bank)


def finetune(scorer, pairs: Sequence[ContrastivePair], dev: Sequence[LabeledExample],
             bank: Mapping[str, md.VisionInput], cfg: TrainConfig, objective: Optional[str] = None,
             log: Optional[TextIO] = None,
             on_best: Optional[Callable[[nx.ParamStore], None]] = None) -> tuple[object, History]:
    """AdamW on the chosen objective with dev-F-1 early stopping; the best-dev parameters are restored."""
    cfg.validate()
    objective = objective or cfg.objective
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES} (got {objective!r})")
    if not pairs:
        raise ConfigError("fine-tuning data is empty")
    if not dev:
        raise ConfigError("development set is empty")
    hist = History()
    best_params = {k: v.copy() for k, v in scorer.store.params.items()}
    batches = _epoch_batches(len(pairs), cfg.batch_size, cfg.seed, "finetune-epoch")
    since_eval: list[float] = []
    stale = 0
    for step in range(1, cfg.max_steps + 1):
        batch = [pairs[k] for k in next(batches)]
        P = scorer.store.leaves()
        with _dropout(scorer, cfg.seed, "finetune", step):
            loss = pair_loss(scorer, P, batch, bank, objective)
        loss.backward()
        _adam(scorer.store, cfg)
        hist.losses.append(loss.item())
        since_eval.append(loss.item())
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            t, f1 = ev.sweep_threshold(dev_scores(scorer, dev, bank))
            rec = {"step": step, "loss": round(float(np.mean(since_eval)), 6),
                   "dev_f1": round(100 * f1, 4), "dev_threshold": t}
            hist.records.append(rec)
            _log(log, rec)
            since_eval = []
            if f1 > hist.best_f1:
                hist.best_f1, hist.best_step, hist.best_threshold = f1, step, t
                best_params = {k: v.copy() for k, v in scorer.store.params.items()}
                stale = 0
                if on_best is not None:
                    on_best(scorer.store)
            else:
                stale += 1
            if stale >= cfg.patience:
                break
    scorer.store.load_values(best_params)
    return scorer, hist


# -- speaker ------------------------------------------------------------------------

def speaker_loss(speaker: md.SpeakerModel, P, items: Sequence[PretrainItem], bank) -> Tensor:
    lang, targets, weights = speaker.teacher_batch([it.tokens for it in items])
    vis = speaker.vision_batch([bank[it.traj_id] for it in items])
    return nx.cross_entropy(speaker.logits(P, lang, vis), targets, weights)


def train_speaker(speaker: md.SpeakerModel, corpus: Sequence[PretrainItem], bank: Mapping[str, md.VisionInput],
                  cfg: TrainConfig, log: Optional[TextIO] = None) -> History:
    """Teacher-forced maximum likelihood on positive instructions."""
    cfg.validate()
    if not corpus:
        raise ConfigError("speaker corpus is empty")
    hist = History()
    batches = _epoch_batches(len(corpus), cfg.batch_size, cfg.seed, "speaker-epoch")
    for step in range(cfg.speaker_steps):
        items = [corpus[k] for k in next(batches)]
        P = speaker.store.leaves()
        with _dropout(speaker, cfg.seed, "speaker", step):
            loss = speaker_loss(speaker, P, items, bank)
        loss.backward()
        _adam(speaker.store, cfg)
        hist.losses.append(loss.item())
        _log(log, {"step": step + 1, "loss": round(loss.item(), 6)})
    return hist
