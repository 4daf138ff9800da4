"""Baselines, threshold selection, precision/recall/F-1 and the comparison report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import model as md
from .errors import InputError, UndefinedMetricError
from .perturb import LabeledExample
from .seeding import SeedLike, as_rng

WORD_TYPES = ("direction", "room", "object")


@dataclass(frozen=True)
class ScoredExample:
    id: str
    prob: float
    label: int
    word_type: str

    def __post_init__(self):
        if not (np.isfinite(self.prob) and 0.0 <= self.prob <= 1.0):
            raise InputError(f"{self.id}: probability {self.prob} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"id": self.id, "prob": self.prob, "label": self.label, "word_type": self.word_type}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredExample":
        return cls(d["id"], float(d["prob"]), int(d["label"]), d["word_type"])


def _wrap(examples: Sequence[LabeledExample], probs) -> list[ScoredExample]:
    return [ScoredExample(e.id, float(p), int(e.label), e.word_type) for e, p in zip(examples, probs)]


# -- baselines and model scoring ----------------------------------------------------

def random_baseline(examples: Sequence[LabeledExample], p: float = 0.5, seed: SeedLike = 0) -> list[ScoredExample]:
    """Each example gets probability 1 with chance ``p``, else 0."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"p must lie in [0, 1] (got {p})")
    draws = as_rng(seed).random(len(examples)) < p
    return _wrap(examples, draws.astype(float))


def _vision(bank: Mapping[str, md.VisionInput], e: LabeledExample) -> md.VisionInput:
    try:
        return bank[e.traj_id]
    except KeyError:
        raise InputError(f"{e.id}: unknown trajectory {e.traj_id!r}") from None


def score_examples(scorer, examples: Sequence[LabeledExample], bank: Mapping[str, md.VisionInput],
                   batch_size: int = 128) -> np.ndarray:
    """Raw scores ``s(x)`` of a two-tower model or sequence scorer."""
    out = np.zeros(len(examples))
    max_len = scorer.cfg.max_len
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        lang = scorer.lang_batch([md.encode_instruction_input(e.tokens, e.i, scorer.vocab, max_len) for e in chunk])
        vis = scorer.vision_batch([_vision(bank, e) for e in chunk])
        out[start:start + len(chunk)] = scorer.score_batch(lang, vis)
    return out


def model_baseline(scorer, examples: Sequence[LabeledExample], bank: Mapping[str, md.VisionInput],
                   batch_size: int = 128) -> list[ScoredExample]:
    """Hallucination probability ``1 - sigmoid(s)`` for a trained scorer."""
    s = score_examples(scorer, examples, bank, batch_size)
    return _wrap(examples, md.classify_score(s))


def speaker_prob_baseline(speaker: md.SpeakerModel, examples: Sequence[LabeledExample],
                          bank: Mapping[str, md.VisionInput], batch_size: int = 64) -> list[ScoredExample]:
    """``1 - S(u_i | r, u_<i)`` under teacher forcing."""
    items = [(_vision(bank, e), e.tokens, e.i) for e in examples]
    lp = speaker.token_logprobs(items, batch_size)
    return _wrap(examples, np.clip(1.0 - np.exp(lp), 0.0, 1.0))


# -- metrics -------------------------------------------------------------------

def prf(preds: Sequence[int], labels: Sequence[int]) -> tuple[float, float, float]:
    """Precision, recall and F-1 of the positive class."""
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if preds.shape != labels.shape:
        raise InputError(f"{preds.size} predictions but {labels.size} labels")
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def threshold_candidates(scores: Sequence[float]) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def sweep_threshold(dev: Sequence[ScoredExample]) -> tuple[float, float]:
    """Threshold maximizing positive-class F-1 (predict positive when prob >= t); ties to the smallest."""
    if not dev:
        raise UndefinedMetricError("threshold sweep needs a nonempty development set")
    scores = np.array([e.prob for e in dev])
    labels = np.array([e.label for e in dev], dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F-1 is undefined: the development set has no positive labels")
    cands = threshold_candidates(scores)
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    pos_sorted = labels[order].astype(np.int64)
    # Counts of examples with score >= t, via the first sorted index not below t.
    suffix_pos = np.concatenate([np.cumsum(pos_sorted[::-1])[::-1], [0]])
    first = np.searchsorted(s_sorted, cands, side="left")
    tp = suffix_pos[first]
    pred = len(scores) - first
    fp = pred - tp
    fn = n_pos - tp
    f1 = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    best = int(np.argmax(f1))
    return float(cands[best]), float(f1[best])


def metrics_at(scored: Sequence[ScoredExample], threshold: float) -> dict:
    preds = [e.prob >= threshold for e in scored]
    labels = [e.label for e in scored]
    p, r, f = prf(preds, labels)
    return {"precision": 100 * p, "recall": 100 * r, "f1": 100 * f,
            "support": len(scored), "positives": int(sum(labels))}


def word_type_breakdown(scored: Sequence[ScoredExample], threshold: float) -> dict:
    out = {}
    for wt in WORD_TYPES:
        part = [e for e in scored if e.word_type == wt]
        out[wt] = metrics_at(part, threshold)
    return out


# -- report -----------------------------------------------------------------------

@dataclass
class SystemResult:
    name: str
    threshold: float
    dev: dict
    test: dict
    by_type: dict


@dataclass
class EvalReport:
    systems: dict[str, SystemResult]
    ablation: dict[str, float] = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "systems": {k: {"threshold": v.threshold, "dev": v.dev, "test": v.test, "by_word_type": v.by_type}
                        for k, v in self.systems.items()},
            "ablation": self.ablation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        name_w = max([len("system")] + [len(k) for k in self.systems])
        lines = []
        if self.header:
            lines.append("# " + json.dumps(self.header, sort_keys=True))
        lines.append("Test set, hallucination class (threshold chosen on dev)")
        lines.append(f"{'system':<{name_w}}  {'F-1':>6}  {'Prec':>6}  {'Rec':>6}  {'thresh':>7}")
        for k, v in self.systems.items():
            t = v.test
            lines.append(f"{k:<{name_w}}  {t['f1']:6.1f}  {t['precision']:6.1f}  {t['recall']:6.1f}  {v.threshold:7.4f}")
        lines.append("")
        lines.append("By word type (test F-1 / Prec / Rec, support)")
        lines.append(f"{'system':<{name_w}}  " + "  ".join(f"{wt:>22}" for wt in WORD_TYPES))
        for k, v in self.systems.items():
            cells = []
            for wt in WORD_TYPES:
                m = v.by_type[wt]
                cells.append(f"{m['f1']:5.1f}/{m['precision']:5.1f}/{m['recall']:5.1f} {m['support']:4d}")
            lines.append(f"{k:<{name_w}}  " + "  ".join(f"{c:>22}" for c in cells))
        if self.ablation:
            lines.append("")
            lines.append("Ablation grid (test F-1)")
            lines.append(f"{'pretrain':<10}{'contrastive':>12}{'mle':>8}")
            for pre in ("on", "off"):
                c = self.ablation.get(f"pretrain={pre},objective=contrastive")
                m = self.ablation.get(f"pretrain={pre},objective=mle")
                fmt = lambda x: "-" if x is None else f"{x:.1f}"
                lines.append(f"{pre:<10}{fmt(c):>12}{fmt(m):>8}")
        return "\n".join(lines) + "\n"

    def to_svg(self) -> str:
        items = list(self.ablation.items()) or [(k, v.test["f1"]) for k, v in self.systems.items()]
        bar_w, gap, height, top, left = 60, 30, 220, 30, 40
        width = left + len(items) * (bar_w + gap) + gap
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 90}" '
               f'font-family="sans-serif" font-size="10">']
        if self.header:
            out.append("<!-- " + json.dumps(self.header, sort_keys=True) + " -->")
        out.append(f'<text x="{left}" y="16" font-size="12">Test F-1</text>')
        out.append(f'<line x1="{left}" y1="{top + height}" x2="{width}" y2="{top + height}" stroke="black"/>')
        for k, (name, val) in enumerate(items):
            x = left + gap + k * (bar_w + gap)
            h = height * val / 100.0
            y = top + height - h
            out.append(f'<rect x="{x}" y="{y:.2f}" width="{bar_w}" height="{h:.2f}" fill="#4a7ab5"/>')
            out.append(f'<text x="{x + bar_w / 2}" y="{y - 4:.2f}" text-anchor="middle">{val:.1f}</text>')
            for j, part in enumerate(name.split(",")):
                out.append(f'<text x="{x + bar_w / 2}" y="{top + height + 14 + 12 * j}" '
                           f'text-anchor="middle">{part}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def evaluate_system(name: str, dev: Sequence[ScoredExample], test: Sequence[ScoredExample]) -> SystemResult:
    """Threshold from dev only, then applied to test."""
    t, _ = sweep_threshold(dev)
    return SystemResult(name, t, metrics_at(dev, t), metrics_at(test, t), word_type_breakdown(test, t))


def report(systems: Mapping[str, tuple[Sequence[ScoredExample], Sequence[ScoredExample]]],
           ablation: Optional[Mapping[str, str]] = None, header: Optional[dict] = None) -> EvalReport:
    """``systems`` maps a name to its (dev, test) scored examples.

    ``ablation`` maps grid cells like ``"pretrain=on,objective=mle"`` to system names.
    """
    results = {name: evaluate_system(name, dev, test) for name, (dev, test) in systems.items()}
    grid = {}
    for cell, name in (ablation or {}).items():
        if name in results:
            grid[cell] = results[name].test["f1"]
    return EvalReport(results, grid, dict(header or {}))
