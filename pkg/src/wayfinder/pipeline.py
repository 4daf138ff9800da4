"""Pipeline configuration and the stages behind the command-line tool.

Stages read and write fixed paths under one output directory::

    out/world/houses.jsonl
    out/corpus/{train,dev,test}.jsonl, out/corpus/vocab.txt
    out/pairs/{pairs,dev,test}.jsonl
    out/ckpt/<model>.json, <model>.config.json, <model>.log.jsonl
    out/reports/scores-<system>.jsonl, report.{json,txt,svg}

Every file starts with a header record carrying the tool version, the
config digest and the master seed.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from . import evaluation as ev
from . import lexicon as lx
from . import model as md
from . import perturb as pt
from . import train as tr
from . import worldgen as wg
from .errors import ConfigError, InputError, SamplingError, StageOrderError
from .seeding import as_rng, mix

CONFIG_VERSION = 1

RANDOM = "random"
SPEAKER = "speaker"
SEQSCORER = "seqscorer"
PRETRAINED = "pretrained"


def twotower_name(pretrain: bool, objective: str) -> str:
    return f"twotower-{'pre' if pretrain else 'nopre'}-{objective}"


GRID = [(True, "contrastive"), (False, "contrastive"), (True, "mle"), (False, "mle")]


@dataclass(frozen=True)
class CorpusConfig:
    n_houses: int = 2000
    train_per_house: int = 1
    min_length: int = 2
    max_length: int = 3
    dev_trajectories: int = 25
    test_trajectories: int = 75
    disjoint_eval_houses: bool = False
    train_pairs: int = 5000
    dev_examples: int = 209
    test_examples: int = 632
    speaker_positives: int = 0
    random_p: float = 0.5

    def problems(self, world: wg.WorldConfig) -> list[str]:
        out = []
        for name in ("n_houses", "train_per_house", "dev_trajectories", "test_trajectories",
                     "train_pairs", "dev_examples", "test_examples"):
            if getattr(self, name) < 1:
                out.append(f"corpus.{name} must be positive")
        if self.speaker_positives < 0:
            out.append("corpus.speaker_positives must be >= 0")
        if not 1 <= self.min_length <= self.max_length:
            out.append("corpus: need 1 <= min_length <= max_length")
        if self.max_length > min(world.max_length, world.n_rooms - 1):
            out.append(f"corpus.max_length must be <= world.max_length ({world.max_length}) "
                       f"and <= n_rooms - 1 ({world.n_rooms - 1})")
        if not 0.0 <= self.random_p <= 1.0:
            out.append("corpus.random_p must lie in [0, 1]")
        return out


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    world: wg.WorldConfig = field(default_factory=wg.WorldConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    synth: pt.SynthConfig = field(default_factory=pt.SynthConfig)
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    version: int = CONFIG_VERSION

    def problems(self) -> list[str]:
        out = []
        if self.version != CONFIG_VERSION:
            out.append(f"unsupported config version {self.version!r} (expected {CONFIG_VERSION})")
        if self.seed < 0:
            out.append("seed must be >= 0")
        out += [f"world: {p}" for p in self.world.problems()]
        out += self.corpus.problems(self.world)
        out += [f"synth: {p}" for p in self.synth.problems()]
        out += [f"model: {p}" for p in self.model.problems()]
        out += [f"train: {p}" for p in self.train.problems()]
        if self.model.regions != self.world.regions:
            out.append("model.regions must equal world.regions")
        if self.model.feature_dim != self.world.feature_dim:
            out.append("model.feature_dim must equal world.feature_dim")
        if self.model.max_steps < self.corpus.max_length:
            out.append("model.max_steps must be >= corpus.max_length")
        return out

    def validate(self) -> "PipelineConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict:
        return {"version": self.version, "seed": self.seed, "world": asdict(self.world),
                "corpus": asdict(self.corpus), "synth": asdict(self.synth),
                "model": asdict(self.model), "train": asdict(self.train)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def header(self) -> dict:
        return {"tool_version": __version__, "config_digest": self.digest(), "seed": self.seed}


_SECTIONS = {"world": wg.WorldConfig, "corpus": CorpusConfig, "synth": pt.SynthConfig,
             "model": md.ModelConfig, "train": tr.TrainConfig}


def _coerce(cls, data: Any, section: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{section} must be an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in known:
            problems.append(f"{section}: unknown field {k!r}")
            continue
        default = getattr(cls(), k)
        if isinstance(default, bool):
            if not isinstance(v, bool):
                problems.append(f"{section}.{k} must be a boolean")
                continue
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                problems.append(f"{section}.{k} must be an integer")
                continue
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                problems.append(f"{section}.{k} must be a number")
                continue
            v = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            problems.append(f"{section}.{k} must be a string")
            continue
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    """Build and validate a config; every violation is reported at once."""
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for k in data:
        if k not in ("version", "$schema", "seed", "comment", *_SECTIONS):
            problems.append(f"unknown top-level field {k!r}")
    sections = {name: _coerce(cls, data.get(name, {}), name, problems) for name, cls in _SECTIONS.items()}
    seed = data.get("seed", 7)
    if isinstance(seed, bool) or not isinstance(seed, int):
        problems.append("seed must be an integer")
        seed = 7
    version = data.get("version", CONFIG_VERSION)
    cfg = PipelineConfig(seed=seed, version=version, **sections)
    problems += cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: Optional[str | Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    return config_from_dict(data)


def shipped_config_path(name: str = "desk") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.json"


def with_overrides(cfg: PipelineConfig, seed: Optional[int] = None, **train_kw) -> PipelineConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    kw = {k: v for k, v in train_kw.items() if v is not None}
    if kw:
        cfg = replace(cfg, train=replace(cfg.train, **kw))
    return cfg.validate()


# -- file helpers ------------------------------------------------------------------

class Layout:
    def __init__(self, out: str | Path):
        self.root = Path(out)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    houses = property(lambda self: self.path("world", "houses.jsonl"))
    vocab = property(lambda self: self.path("corpus", "vocab.txt"))
    pairs = property(lambda self: self.path("pairs", "pairs.jsonl"))

    def corpus(self, split: str) -> Path:
        return self.path("corpus", f"{split}.jsonl")

    def labeled(self, split: str) -> Path:
        return self.path("pairs", f"{split}.jsonl")

    def ckpt(self, name: str) -> Path:
        return self.path("ckpt", f"{name}.json")

    def scores(self, system: str) -> Path:
        return self.path("reports", f"scores-{system}.jsonl")

    def report(self, ext: str) -> Path:
        return self.path("reports", f"report.{ext}")


def write_jsonl(path: Path, header: dict, records: Iterable[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(json.dumps({"header": header}, sort_keys=True) + "\n")
    for r in records:
        buf.write(json.dumps(r, sort_keys=True) + "\n")
    path.write_text(buf.getvalue())


def read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    lines = path.read_text().splitlines()
    if not lines:
        raise InputError(f"{path} is empty")
    head = json.loads(lines[0])
    if "header" not in head:
        raise InputError(f"{path} lacks a header record")
    return head["header"], [json.loads(l) for l in lines[1:] if l]


def _require(path: Path, stage: str, what: Optional[str] = None):
    if not path.exists():
        raise StageOrderError(stage, what or str(path))


def write_vocab(path: Path, vocab: md.Vocab, header: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# " + json.dumps(header, sort_keys=True) + "\n" + "\n".join(vocab.tokens) + "\n")


def read_vocab(path: Path) -> md.Vocab:
    return md.Vocab.load(path)


# -- data model helpers ---------------------------------------------------------------

def corpus_record(item: pt.CorpusItem) -> dict:
    ins = item.instruction
    rec = {"id": item.id, "house_id": item.house_id, "path": list(item.trajectory.path),
           "trajectory": item.trajectory.to_dict(), "tokens": ins.tokens, "tags": ins.tags,
           "sentence_spans": [list(s) for s in ins.sentence_spans],
           "alignment": [list(a) if a is not None else None for a in ins.alignment],
           "source": item.source}
    if item.success_rate is not None:
        rec["success_rate"] = item.success_rate
    return rec


def item_from_record(rec: dict, houses: dict[str, wg.ToyHouse]) -> pt.CorpusItem:
    house = houses[rec["house_id"]]
    traj = wg.make_trajectory(house, rec["path"], rec["house_id"])
    ins = wg.GroundTruthInstruction(list(rec["tokens"]), list(rec["tags"]),
                                    [tuple(s) for s in rec["sentence_spans"]],
                                    [tuple(a) if a is not None else None for a in rec["alignment"]])
    return pt.CorpusItem(rec["id"], rec["house_id"], house, traj, ins, rec.get("source", "template"),
                         rec.get("success_rate"))


@dataclass
class World:
    houses: dict[str, wg.ToyHouse]


@dataclass
class Corpus:
    train: list[pt.CorpusItem]
    dev: list[pt.CorpusItem]
    test: list[pt.CorpusItem]
    vocab: md.Vocab

    extra: list[pt.CorpusItem] = field(default_factory=list)

    def bank(self) -> dict[str, md.VisionInput]:
        items = self.train + self.dev + self.test + self.extra
        return {it.id: md.encode_trajectory_input(it.trajectory) for it in items}


def _dtype(cfg: PipelineConfig):
    return np.float32 if cfg.train.dtype == "float32" else np.float64


# -- stages -------------------------------------------------------------------------

def gen_world(cfg: PipelineConfig, out: str | Path, lex: Optional[lx.Lexicon] = None) -> World:
    lay = Layout(out)
    n = cfg.corpus.n_houses + (cfg.corpus.dev_trajectories + cfg.corpus.test_trajectories
                               if cfg.corpus.disjoint_eval_houses else 0)
    houses = {}
    for k in range(n):
        hid = f"house-{k:05d}"
        houses[hid] = wg.generate_house(mix(cfg.seed, "house", k), cfg.world, lex)
    write_jsonl(lay.houses, cfg.header(), ({"id": hid, **h.to_dict()} for hid, h in houses.items()))
    return World(houses)


def load_world(out: str | Path) -> World:
    lay = Layout(out)
    _require(lay.houses, "gen-world", "world file")
    _, recs = read_jsonl(lay.houses)
    return World({r["id"]: wg.ToyHouse.from_dict(r) for r in recs})


def _lengths(cfg: PipelineConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.corpus.min_length, cfg.corpus.max_length + 1))


def _sample_item(cfg, house, hid, item_id, seed, lex, avoid=frozenset()) -> pt.CorpusItem:
    rng = as_rng(seed)
    for _ in range(32):
        traj = wg.sample_trajectory(house, rng, _lengths(cfg, rng), hid)
        if (hid, traj.path) not in avoid:
            break
    else:
        raise SamplingError(f"could not sample a held-out trajectory in {hid}")
    ins = wg.verbalize(traj, house, rng, lex)
    return pt.CorpusItem(item_id, hid, house, traj, ins)


def gen_corpus(cfg: PipelineConfig, out: str | Path, lex: Optional[lx.Lexicon] = None) -> Corpus:
    """Template-verbalized training trajectories and held-out dev/test trajectories."""
    lex = lex or lx.load_default_lexicon()
    lay = Layout(out)
    world = load_world(out)
    ids = sorted(world.houses)
    train_ids = ids[:cfg.corpus.n_houses]
    train = []
    for k, hid in enumerate(train_ids):
        for j in range(cfg.corpus.train_per_house):
            train.append(_sample_item(cfg, world.houses[hid], hid, f"train-{k:05d}-{j}",
                                      mix(cfg.seed, "train-traj", k, j), lex))
    seen = frozenset((it.house_id, it.trajectory.path) for it in train)
    splits = {}
    offset = cfg.corpus.n_houses
    for split, count in (("dev", cfg.corpus.dev_trajectories), ("test", cfg.corpus.test_trajectories)):
        items = []
        for j in range(count):
            if cfg.corpus.disjoint_eval_houses:
                hid = ids[offset]
                offset += 1
            else:
                hid = train_ids[int(as_rng(mix(cfg.seed, split, "house", j)).integers(len(train_ids)))]
            items.append(_sample_item(cfg, world.houses[hid], hid, f"{split}-{j:04d}",
                                      mix(cfg.seed, split, "traj", j), lex, seen))
        seen = seen | {(it.house_id, it.trajectory.path) for it in items}
        splits[split] = items
    vocab = md.Vocab.build([it.instruction.tokens for it in train], lex)
    head = cfg.header()
    for split, items in (("train", train), ("dev", splits["dev"]), ("test", splits["test"])):
        write_jsonl(lay.corpus(split), head, (corpus_record(it) for it in items))
    write_vocab(lay.vocab, vocab, head)
    return Corpus(train, splits["dev"], splits["test"], vocab)


def load_corpus(out: str | Path, world: Optional[World] = None) -> Corpus:
    lay = Layout(out)
    for split in ("train", "dev", "test"):
        _require(lay.corpus(split), "gen-corpus", f"{split} corpus")
    _require(lay.vocab, "gen-corpus", "vocabulary")
    world = world or load_world(out)
    parts = {s: [item_from_record(r, world.houses) for r in read_jsonl(lay.corpus(s))[1]]
             for s in ("train", "dev", "test")}
    spk = lay.path("pairs", "speaker_positives.jsonl")
    extra = [item_from_record(r, world.houses) for r in read_jsonl(spk)[1]] if spk.exists() else []
    return Corpus(parts["train"], parts["dev"], parts["test"], read_vocab(lay.vocab), extra)


def _pretrain_items(items: Sequence[pt.CorpusItem]) -> list[tr.PretrainItem]:
    return [tr.PretrainItem(it.id, list(it.instruction.tokens)) for it in items]


def _save(model, lay: Layout, name: str, cfg: PipelineConfig, meta: Optional[dict] = None):
    lay.path("ckpt").mkdir(parents=True, exist_ok=True)
    md.save_model(model, lay.ckpt(name), cfg.header(), meta)
    md.write_model_config(lay.path("ckpt", f"{name}.config.json"), model)
    blob = json.loads(lay.path("ckpt", f"{name}.config.json").read_text())
    blob["header"] = cfg.header()
    lay.path("ckpt", f"{name}.config.json").write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")


def _load(lay: Layout, name: str, vocab: md.Vocab, cfg: PipelineConfig, stage: str):
    _require(lay.ckpt(name), stage, f"checkpoint {name}")
    return md.load_model(lay.ckpt(name), vocab, _dtype(cfg))


def _log_file(lay: Layout, name: str, cfg: PipelineConfig):
    lay.path("ckpt").mkdir(parents=True, exist_ok=True)
    f = lay.path("ckpt", f"{name}.log.jsonl").open("w")
    f.write(json.dumps({"header": cfg.header()}, sort_keys=True) + "\n")
    return f


def train_speaker_stage(cfg: PipelineConfig, out: str | Path) -> md.SpeakerModel:
    lay = Layout(out)
    corpus = load_corpus(out)
    speaker = md.SpeakerModel(cfg.model, corpus.vocab, mix(cfg.seed, "init", SPEAKER), _dtype(cfg))
    tcfg = replace(cfg.train, seed=mix(cfg.seed, "train", SPEAKER))
    with _log_file(lay, SPEAKER, cfg) as log:
        tr.train_speaker(speaker, _pretrain_items(corpus.train), corpus.bank(), tcfg, log)
    _save(speaker, lay, SPEAKER, cfg)
    return speaker


def speaker_positives(cfg: PipelineConfig, corpus: Corpus, speaker: md.SpeakerModel,
                      lex: lx.Lexicon) -> list[pt.CorpusItem]:
    """Speaker instructions for training trajectories, kept when the follower ensemble succeeds."""
    n = min(cfg.corpus.speaker_positives, len(corpus.train))
    if n == 0:
        return []
    order = as_rng(mix(cfg.seed, "speaker-positives")).permutation(len(corpus.train))[:n]
    chosen = [corpus.train[int(k)] for k in sorted(order)]
    out = []
    for start in range(0, len(chosen), 64):
        block = chosen[start:start + 64]
        samples = speaker.sample([it.trajectory for it in block], mix(cfg.seed, "speaker-sample", start))
        for it, toks in zip(block, samples):
            if not toks or not lx.select_candidates(toks, lx.tag_tokens(toks, lex), lex):
                continue
            spans = wg.split_sentences(toks)
            T = len(it.trajectory)
            align = [(t, t + 1) if t < T else None for t in range(len(spans))]
            ins = wg.GroundTruthInstruction(list(toks), lx.tag_tokens(toks, lex), spans, align)
            cand = pt.CorpusItem(f"{it.id}-spk", it.house_id, it.house, it.trajectory, ins, SPEAKER)
            if pt.admissible(cand, cfg.synth, mix(cfg.seed, "follower", cand.id)):
                out.append(cand)
    return out


def synth_pairs(cfg: PipelineConfig, out: str | Path, count: Optional[int] = None,
                lex: Optional[lx.Lexicon] = None) -> tuple[list[pt.ContrastivePair], list, list]:
    lex = lex or lx.load_default_lexicon()
    lay = Layout(out)
    corpus = load_corpus(out)
    pool = list(corpus.train)
    extra: list[pt.CorpusItem] = []
    if cfg.corpus.speaker_positives > 0:
        speaker = _load(lay, SPEAKER, corpus.vocab, cfg, "train --baseline speaker")
        extra = speaker_positives(cfg, corpus, speaker, lex)
        pool += extra
    n = cfg.corpus.train_pairs if count is None else count
    if n < 0:
        raise ConfigError("--count must be >= 0")
    pairs = list(pt.build_training_set(pool, lex, cfg.synth, mix(cfg.seed, "pairs"), n))
    dev = pt.build_eval_set(corpus.dev, lex, cfg.synth, mix(cfg.seed, "dev-set"), cfg.corpus.dev_examples, "dev")
    test = pt.build_eval_set(corpus.test, lex, cfg.synth, mix(cfg.seed, "test-set"), cfg.corpus.test_examples, "test")
    head = cfg.header()
    write_jsonl(lay.pairs, head, (p.to_dict() for p in pairs))
    write_jsonl(lay.labeled("dev"), head, (e.to_dict() for e in dev))
    write_jsonl(lay.labeled("test"), head, (e.to_dict() for e in test))
    write_jsonl(lay.path("pairs", "speaker_positives.jsonl"), head, (corpus_record(it) for it in extra))
    return pairs, dev, test


def load_pairs(out: str | Path):
    lay = Layout(out)
    for p, what in ((lay.pairs, "training pairs"), (lay.labeled("dev"), "dev set"), (lay.labeled("test"), "test set")):
        _require(p, "synth-pairs", what)
    pairs = [pt.ContrastivePair.from_dict(r) for r in read_jsonl(lay.pairs)[1]]
    dev = [pt.LabeledExample.from_dict(r) for r in read_jsonl(lay.labeled("dev"))[1]]
    test = [pt.LabeledExample.from_dict(r) for r in read_jsonl(lay.labeled("test"))[1]]
    return pairs, dev, test


def pretrain_stage(cfg: PipelineConfig, out: str | Path) -> md.TwoTowerModel:
    lay = Layout(out)
    corpus = load_corpus(out)
    model = md.TwoTowerModel(cfg.model, corpus.vocab, mix(cfg.seed, "init", "twotower"), _dtype(cfg))
    tcfg = replace(cfg.train, seed=mix(cfg.seed, "train", PRETRAINED))
    items = _pretrain_items(corpus.train)
    with _log_file(lay, PRETRAINED, cfg) as log:
        tr.pretrain(model, items, corpus.bank(), tcfg, log)
    _save(model, lay, PRETRAINED, cfg)
    return model


def train_twotower(cfg: PipelineConfig, out: str | Path, pretrain: bool, objective: str) -> tr.History:
    lay = Layout(out)
    corpus = load_corpus(out)
    pairs, dev, _ = load_pairs(out)
    if pretrain:
        model = _load(lay, PRETRAINED, corpus.vocab, cfg, "pretrain")
    else:
        model = md.TwoTowerModel(cfg.model, corpus.vocab, mix(cfg.seed, "init", "twotower"), _dtype(cfg))
    name = twotower_name(pretrain, objective)
    tcfg = replace(cfg.train, seed=mix(cfg.seed, "train", name))
    with _log_file(lay, name, cfg) as log:
        model, hist = tr.finetune(model, pairs, dev, corpus.bank(), tcfg, objective, log)
    _save(model, lay, name, cfg, {"best_step": hist.best_step, "best_dev_f1": hist.best_f1})
    return hist


def train_seqscorer(cfg: PipelineConfig, out: str | Path) -> tr.History:
    """The encoder-decoder baseline, randomly initialized and trained with the MLE objective."""
    lay = Layout(out)
    corpus = load_corpus(out)
    pairs, dev, _ = load_pairs(out)
    model = md.BaselineSeqScorer(cfg.model, corpus.vocab, mix(cfg.seed, "init", SEQSCORER), _dtype(cfg))
    tcfg = replace(cfg.train, seed=mix(cfg.seed, "train", SEQSCORER))
    with _log_file(lay, SEQSCORER, cfg) as log:
        model, hist = tr.finetune(model, pairs, dev, corpus.bank(), tcfg, "mle", log)
    _save(model, lay, SEQSCORER, cfg, {"best_step": hist.best_step, "best_dev_f1": hist.best_f1})
    return hist


def all_systems() -> list[str]:
    return [RANDOM, SPEAKER, SEQSCORER] + [twotower_name(p, o) for p, o in GRID]


def evaluate_system(cfg: PipelineConfig, out: str | Path, system: str) -> dict[str, list[ev.ScoredExample]]:
    """Score dev and test for one system and write its scores file."""
    lay = Layout(out)
    corpus = load_corpus(out)
    _, dev, test = load_pairs(out)
    bank = corpus.bank()
    if system == RANDOM:
        scored = {"dev": ev.random_baseline(dev, cfg.corpus.random_p, mix(cfg.seed, RANDOM, "dev")),
                  "test": ev.random_baseline(test, cfg.corpus.random_p, mix(cfg.seed, RANDOM, "test"))}
    elif system == SPEAKER:
        sp = _load(lay, SPEAKER, corpus.vocab, cfg, "train --baseline speaker")
        scored = {s: ev.speaker_prob_baseline(sp, d, bank) for s, d in (("dev", dev), ("test", test))}
    elif system == SEQSCORER or system.startswith("twotower-"):
        if system == SEQSCORER:
            stage = "train --baseline seqscorer"
        else:
            _, pre, obj = system.split("-")
            stage = f"train --objective {obj} --pretrain {'on' if pre == 'pre' else 'off'}"
        m = _load(lay, system, corpus.vocab, cfg, stage)
        scored = {s: ev.model_baseline(m, d, bank) for s, d in (("dev", dev), ("test", test))}
    else:
        raise InputError(f"unknown system {system!r}")
    write_jsonl(lay.scores(system), cfg.header(),
                ({"split": s, **e.to_dict()} for s in ("dev", "test") for e in scored[s]))
    return scored


def load_scores(out: str | Path, system: str) -> dict[str, list[ev.ScoredExample]]:
    _, recs = read_jsonl(Layout(out).scores(system))
    res: dict[str, list[ev.ScoredExample]] = {"dev": [], "test": []}
    for r in recs:
        res[r["split"]].append(ev.ScoredExample.from_dict(r))
    return res


def report_stage(cfg: PipelineConfig, out: str | Path) -> ev.EvalReport:
    lay = Layout(out)
    present = [s for s in all_systems() if lay.scores(s).exists()]
    if not present:
        raise StageOrderError("evaluate", "scored systems")
    systems = {}
    for s in present:
        sc = load_scores(out, s)
        systems[s] = (sc["dev"], sc["test"])
    grid = {f"pretrain={'on' if p else 'off'},objective={o}": twotower_name(p, o) for p, o in GRID}
    rep = ev.report(systems, grid, cfg.header())
    lay.path("reports").mkdir(parents=True, exist_ok=True)
    lay.report("json").write_text(rep.to_json())
    lay.report("txt").write_text(rep.to_text())
    lay.report("svg").write_text(rep.to_svg())
    return rep


def run_all(cfg: PipelineConfig, out: str | Path, progress=None) -> ev.EvalReport:
    say = progress or (lambda msg: None)
    say("gen-world")
    gen_world(cfg, out)
    say("gen-corpus")
    gen_corpus(cfg, out)
    say("train --baseline speaker")
    train_speaker_stage(cfg, out)
    say("synth-pairs")
    synth_pairs(cfg, out)
    say("pretrain")
    pretrain_stage(cfg, out)
    for pre, obj in GRID:
        say(f"train --objective {obj} --pretrain {'on' if pre else 'off'}")
        train_twotower(cfg, out, pre, obj)
    say("train --baseline seqscorer")
    train_seqscorer(cfg, out)
    for s in all_systems():
        say(f"evaluate {s}")
        evaluate_system(cfg, out, s)
    say("report")
    return report_stage(cfg, out)
