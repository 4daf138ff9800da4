"""Two-tower hallucination scorer, baseline sequence scorer and speaker model."""

from __future__ import annotations

import contextlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import lexicon as lx
from . import numerics as nx
from .errors import ConfigError, InputError
from .numerics import Tensor
from .worldgen import Trajectory

SPECIALS = ("[CLS]", "[SEP]", "[BH]", "[EH]", "[IMG]", "[MASK]", "[PAD]")
CLS, SEP, BH, EH, IMG, MASK, PAD = range(7)
NEG_INF = -1e9


class Vocab:
    """Token to id bijection; specials occupy ids 0-6."""

    def __init__(self, tokens: Iterable[str]):
        extra = sorted({t for t in tokens if t not in SPECIALS})
        self.tokens: list[str] = list(SPECIALS) + extra
        self.index = {t: k for k, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, MASK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, MASK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[k] for k in ids]

    @classmethod
    def build(cls, corpora: Iterable[Sequence[str]], lex: lx.Lexicon | None = None) -> "Vocab":
        lex = lex or lx.load_default_lexicon()
        toks: set[str] = set()
        for c in corpora:
            toks.update(c)
        for w in lex.directions:
            toks.update(w.split())
        toks.update(lex.rooms)
        toks.update(lex.objects)
        return cls(toks)

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text().split("\n")
        if lines and lines[0].startswith("# "):
            lines = lines[1:]  # header record
        if lines and lines[-1] == "":
            lines = lines[:-1]
        if tuple(lines[:7]) != SPECIALS:
            raise InputError(f"{path}: vocabulary must start with the special tokens {SPECIALS}")
        return cls(lines[7:])


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    heads: int = 4
    lang_layers: int = 2
    vis_layers: int = 2
    co_layers: int = 1
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 2
    max_len: int = 60
    speaker_max_len: int = 80
    regions: int = 8
    feature_dim: int = 32
    max_steps: int = 8
    dropout: float = 0.1

    def problems(self) -> list[str]:
        out = []
        if self.hidden % self.heads:
            out.append(f"hidden {self.hidden} not divisible by heads {self.heads}")
        for f in fields(self):
            if getattr(self, f.name) < 0:
                out.append(f"{f.name} must be non-negative")
        if self.max_len < 5:
            out.append("max_len must be >= 5")
        if not self.dropout < 1:
            out.append("dropout must be < 1")
        return out

    def validate(self) -> "ModelConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# -- input encoding -------------------------------------------------------------

def encode_instruction_input(tokens: Sequence[str], i: Optional[int], vocab: Vocab,
                             max_len: int = 60) -> list[int]:
    """``[CLS] u_1 .. [BH] u_i [EH] .. u_n [SEP]``, windowed around ``i`` when too long.

    ``i=None`` omits the markers and encodes the whole instruction.
    """
    ids = vocab.encode(tokens)
    n = len(ids)
    if i is None:
        body = ids[: max_len - 2]
        return [CLS] + body + [SEP]
    if not 0 <= i < n:
        raise InputError(f"index {i} outside instruction of length {n}")
    width = max_len - 4
    if n > width:
        start = min(max(i - width // 2, 0), n - width)
        ids, i = ids[start:start + width], i - start
    return [CLS] + ids[:i] + [BH, ids[i], EH] + ids[i + 1:] + [SEP]


@dataclass
class VisionInput:
    feats: np.ndarray      # (N, D) region or target-view features
    dirs: np.ndarray       # (N, 4) directional features of the step's action
    kind: np.ndarray       # (N,) 0 = [IMG], 1 = region, 2 = padding region
    region: np.ndarray     # (N,) 0 for [IMG], 1..K for regions
    step: np.ndarray       # (N,)
    mask: np.ndarray       # (N,)


def encode_trajectory_input(traj: Trajectory) -> VisionInput:
    """Per step: one ``[IMG]`` token (carrying the action's target view) then K region tokens."""
    T = len(traj.steps)
    K, D = traj.steps[0][0].regions.shape
    N = T * (1 + K)
    feats = np.zeros((N, D))
    dirs = np.zeros((N, 4))
    kind = np.zeros(N, dtype=np.int64)
    region = np.zeros(N, dtype=np.int64)
    step = np.zeros(N, dtype=np.int64)
    mask = np.ones(N)
    for t, (obs, act) in enumerate(traj.steps):
        base = t * (1 + K)
        feats[base] = act.target_view
        dirs[base:base + 1 + K] = act.features
        step[base:base + 1 + K] = t
        for j in range(K):
            r = obs.regions[j]
            pos = base + 1 + j
            region[pos] = j + 1
            if not r.any():
                kind[pos] = 2
                mask[pos] = 0.0
            else:
                kind[pos] = 1
                feats[pos] = r
    return VisionInput(feats, dirs, kind, region, step, mask)


@dataclass
class VisionBatch:
    feats: np.ndarray
    dirs: np.ndarray
    kind: np.ndarray
    region: np.ndarray
    step: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.feats.shape[0]


def collate_vision(items: Sequence[VisionInput], dtype=np.float64) -> VisionBatch:
    B = len(items)
    N = max(v.feats.shape[0] for v in items)
    D = items[0].feats.shape[1]
    feats = np.zeros((B, N, D), dtype=dtype)
    dirs = np.zeros((B, N, 4), dtype=dtype)
    kind = np.full((B, N), 2, dtype=np.int64)
    region = np.zeros((B, N), dtype=np.int64)
    step = np.zeros((B, N), dtype=np.int64)
    mask = np.zeros((B, N), dtype=dtype)
    for b, v in enumerate(items):
        n = v.feats.shape[0]
        feats[b, :n] = v.feats
        dirs[b, :n] = v.dirs
        kind[b, :n] = v.kind
        region[b, :n] = v.region
        step[b, :n] = v.step
        mask[b, :n] = v.mask
    return VisionBatch(feats, dirs, kind, region, step, mask)


@dataclass
class LangBatch:
    ids: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate_lang(seqs: Sequence[Sequence[int]], dtype=np.float64) -> LangBatch:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=dtype)
    for b, s in enumerate(seqs):
        ids[b, :len(s)] = s
        mask[b, :len(s)] = 1.0
    return LangBatch(ids, mask)


def _key_bias(mask: np.ndarray) -> np.ndarray:
    """(B, L) 0/1 mask -> (B, 1, 1, L) additive attention bias."""
    return ((1.0 - mask) * NEG_INF)[:, None, None, :].astype(mask.dtype)


def _causal_bias(L: int, dtype) -> np.ndarray:
    return (np.triu(np.ones((L, L)), k=1) * NEG_INF).astype(dtype)[None, None]


# -- building blocks -------------------------------------------------------------

class _Builder:
    def __init__(self, store: nx.ParamStore, seed: int):
        self.store = store
        self.seed = seed

    def linear(self, name: str, n_in: int, n_out: int, bias: bool = True):
        self.store.add(f"{name}.w", (n_in, n_out), "normal", self.seed)
        if bias:
            self.store.add(f"{name}.b", (n_out,), "zeros", self.seed)

    def ln(self, name: str, n: int):
        self.store.add(f"{name}.g", (n,), "ones", self.seed)
        self.store.add(f"{name}.b", (n,), "zeros", self.seed)

    def attn(self, name: str, H: int):
        for p in ("q", "k", "v", "o"):
            self.linear(f"{name}.{p}", H, H)

    def ffn(self, name: str, H: int, mult: int):
        self.linear(f"{name}.fc1", H, H * mult)
        self.linear(f"{name}.fc2", H * mult, H)

    def encoder_layer(self, name: str, H: int, mult: int):
        self.ln(f"{name}.ln1", H)
        self.attn(f"{name}.attn", H)
        self.ln(f"{name}.ln2", H)
        self.ffn(f"{name}.ffn", H, mult)

    def cross_layer(self, name: str, H: int, mult: int):
        self.ln(f"{name}.lnq", H)
        self.ln(f"{name}.lnk", H)
        self.attn(f"{name}.cross", H)
        self.ln(f"{name}.ln2", H)
        self.ffn(f"{name}.ffn", H, mult)

    def decoder_layer(self, name: str, H: int, mult: int):
        self.ln(f"{name}.ln1", H)
        self.attn(f"{name}.self", H)
        self.ln(f"{name}.ln2", H)
        self.attn(f"{name}.cross", H)
        self.ln(f"{name}.ln3", H)
        self.ffn(f"{name}.ffn", H, mult)


_DROPOUT: Optional[tuple[float, np.random.Generator]] = None


@contextlib.contextmanager
def dropout(rate: float, rng: np.random.Generator):
    """Enable dropout inside the block (training only); inference runs without it."""
    global _DROPOUT
    prev = _DROPOUT
    _DROPOUT = (rate, rng) if rate > 0 else None
    try:
        yield
    finally:
        _DROPOUT = prev


def _drop(x: Tensor) -> Tensor:
    if _DROPOUT is None:
        return x
    return nx.dropout(x, *_DROPOUT)


def _lin(P, name, x):
    return nx.linear(x, P[f"{name}.w"], P.get(f"{name}.b"))


def _ln(P, name, x):
    return nx.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def attention(P, name: str, xq: Tensor, xkv: Tensor, bias: Optional[np.ndarray], heads: int) -> Tensor:
    B, Lq, H = xq.shape
    Lk = xkv.shape[1]
    dh = H // heads
    q = _lin(P, f"{name}.q", xq).reshape(B, Lq, heads, dh).transpose(0, 2, 1, 3)
    k = _lin(P, f"{name}.k", xkv).reshape(B, Lk, heads, dh).transpose(0, 2, 3, 1)
    v = _lin(P, f"{name}.v", xkv).reshape(B, Lk, heads, dh).transpose(0, 2, 1, 3)
    scores = nx.scale(q @ k, 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    o = nx.softmax(scores) @ v
    return _drop(_lin(P, f"{name}.o", o.transpose(0, 2, 1, 3).reshape(B, Lq, H)))


def _ffn(P, name, x):
    return _drop(_lin(P, f"{name}.fc2", nx.gelu(_lin(P, f"{name}.fc1", x))))


def encoder_layer(P, name: str, x: Tensor, bias, heads: int) -> Tensor:
    h = _ln(P, f"{name}.ln1", x)
    x = x + attention(P, f"{name}.attn", h, h, bias, heads)
    return x + _ffn(P, f"{name}.ffn", _ln(P, f"{name}.ln2", x))


def cross_layer(P, name: str, x: Tensor, other: Tensor, other_bias, heads: int) -> Tensor:
    x = x + attention(P, f"{name}.cross", _ln(P, f"{name}.lnq", x), _ln(P, f"{name}.lnk", other),
                      other_bias, heads)
    return x + _ffn(P, f"{name}.ffn", _ln(P, f"{name}.ln2", x))


def decoder_layer(P, name: str, x: Tensor, self_bias, memory: Tensor, mem_bias, heads: int) -> Tensor:
    h = _ln(P, f"{name}.ln1", x)
    x = x + attention(P, f"{name}.self", h, h, self_bias, heads)
    x = x + attention(P, f"{name}.cross", _ln(P, f"{name}.ln2", x), memory, mem_bias, heads)
    return x + _ffn(P, f"{name}.ffn", _ln(P, f"{name}.ln3", x))


def _build_vision_embed(b: _Builder, pre: str, cfg: ModelConfig):
    H = cfg.hidden
    b.store.add(f"{pre}.type", (3, H), "normal", b.seed)
    b.linear(f"{pre}.feat", cfg.feature_dim, H)
    b.ln(f"{pre}.featln", H)
    b.linear(f"{pre}.dir", 4, H, bias=False)
    b.store.add(f"{pre}.region", (cfg.regions + 1, H), "normal", b.seed)
    b.store.add(f"{pre}.step", (cfg.max_steps, H), "normal", b.seed)


def _vision_embed(P, pre: str, v: VisionBatch, region_index: bool = True) -> Tensor:
    # Projected features are layer-normalized so they are not drowned out by
    # the direction and index embeddings; padding regions contribute none.
    feat = _ln(P, f"{pre}.featln", _lin(P, f"{pre}.feat", Tensor(v.feats)))
    feat = feat * Tensor((v.kind != 2)[..., None].astype(v.feats.dtype))
    x = nx.embedding(P[f"{pre}.type"], v.kind) + feat + _lin(P, f"{pre}.dir", Tensor(v.dirs))
    if region_index:
        x = x + nx.embedding(P[f"{pre}.region"], v.region)
    return _drop(x + nx.embedding(P[f"{pre}.step"], v.step))


class _Module:
    kind = "module"

    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int = 0, dtype=np.float64):
        self.cfg = cfg.validate()
        self.vocab = vocab
        self.seed = seed
        self.store = nx.ParamStore(dtype)
        self._build(_Builder(self.store, seed))

    def _build(self, b: _Builder):
        raise NotImplementedError

    @property
    def dtype(self):
        return self.store.dtype

    def params(self, track: bool = False) -> dict[str, Tensor]:
        if track:
            return self.store.leaves()
        return {k: Tensor(v) for k, v in self.store.params.items()}

    def config_dict(self) -> dict:
        return {"kind": self.kind, "model": self.cfg.to_dict(), "vocab_size": len(self.vocab),
                "seed": self.seed}

    def lang_batch(self, seqs: Sequence[Sequence[int]]) -> LangBatch:
        return collate_lang(seqs, self.dtype)

    def vision_batch(self, items: Sequence[VisionInput]) -> VisionBatch:
        return collate_vision(items, self.dtype)


class TwoTowerModel(_Module):
    """Language and vision transformers joined by ``s = w . (h_lang * h_vision)``.

    ``co_layers`` > 0 appends co-attention blocks: each stream attends to the
    other, then to itself. With ``co_layers=0`` the towers interact only in
    the score.
    """
    kind = "two_tower"

    def _build(self, b: _Builder):
        cfg = self.cfg
        H = cfg.hidden
        V = len(self.vocab)
        self.store.add("lang.tok", (V, H), "normal", b.seed)
        self.store.add("lang.pos", (cfg.max_len, H), "normal", b.seed)
        for l in range(cfg.lang_layers):
            b.encoder_layer(f"lang.layer{l}", H, cfg.ffn_mult)
        _build_vision_embed(b, "vis", cfg)
        for l in range(cfg.vis_layers):
            b.encoder_layer(f"vis.layer{l}", H, cfg.ffn_mult)
        for l in range(cfg.co_layers):
            for side in ("lang", "vis"):
                b.cross_layer(f"co{l}.{side}", H, cfg.ffn_mult)
                b.encoder_layer(f"co{l}.{side}_self", H, cfg.ffn_mult)
        b.ln("lang.final", H)
        b.ln("vis.final", H)
        self.store.add("score.w", (H,), "normal", b.seed, decay=False)
        b.linear("mlm.out", H, V)

    def encode(self, P, lang: LangBatch, vis: VisionBatch, region_index: bool = True):
        cfg = self.cfg
        L = lang.ids.shape[1]
        if L > cfg.max_len:
            raise InputError(f"instruction input of length {L} exceeds max_len {cfg.max_len}")
        x = _drop(nx.embedding(P["lang.tok"], lang.ids) + P["lang.pos"][:L])
        lbias = _key_bias(lang.mask)
        for l in range(cfg.lang_layers):
            x = encoder_layer(P, f"lang.layer{l}", x, lbias, cfg.heads)
        y = _vision_embed(P, "vis", vis, region_index)
        vbias = _key_bias(vis.mask)
        for l in range(cfg.vis_layers):
            y = encoder_layer(P, f"vis.layer{l}", y, vbias, cfg.heads)
        for l in range(cfg.co_layers):
            x, y = (cross_layer(P, f"co{l}.lang", x, y, vbias, cfg.heads),
                    cross_layer(P, f"co{l}.vis", y, x, lbias, cfg.heads))
            x = encoder_layer(P, f"co{l}.lang_self", x, lbias, cfg.heads)
            y = encoder_layer(P, f"co{l}.vis_self", y, vbias, cfg.heads)
        return _ln(P, "lang.final", x), _ln(P, "vis.final", y)

    def score_tensor(self, P, lang: LangBatch, vis: VisionBatch, region_index: bool = True) -> Tensor:
        xs, ys = self.encode(P, lang, vis, region_index)
        h_lang = xs[:, 0, :]
        h_vis = ys[:, 0, :]  # first [IMG] token
        return (h_lang * h_vis * P["score.w"]).sum(axis=-1)

    def mlm_logits(self, P, lang_states: Tensor) -> Tensor:
        return _lin(P, "mlm.out", lang_states)

    def score_batch(self, lang: LangBatch, vis: VisionBatch) -> np.ndarray:
        with nx.no_grad():
            return self.score_tensor(self.params(), lang, vis).data.astype(np.float64)

    def score(self, traj: Trajectory, tokens: Sequence[str], i: Optional[int]) -> float:
        lang = self.lang_batch([encode_instruction_input(tokens, i, self.vocab, self.cfg.max_len)])
        return float(self.score_batch(lang, self.vision_batch([encode_trajectory_input(traj)]))[0])

    def classify(self, traj: Trajectory, tokens: Sequence[str], i: int) -> float:
        return classify_score(self.score(traj, tokens, i))


def classify_score(s) -> np.ndarray | float:
    """Hallucination probability ``1 - sigmoid(s)``."""
    out = nx._sigmoid(-np.asarray(s, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


class _EncoderDecoder(_Module):
    def _build_encdec(self, b: _Builder, max_len: int):
        cfg = self.cfg
        H = cfg.hidden
        V = len(self.vocab)
        _build_vision_embed(b, "enc", cfg)
        for l in range(cfg.enc_layers):
            b.encoder_layer(f"enc.layer{l}", H, cfg.ffn_mult)
        b.ln("enc.final", H)
        self.store.add("dec.tok", (V, H), "normal", b.seed)
        self.store.add("dec.pos", (max_len, H), "normal", b.seed)
        for l in range(cfg.dec_layers):
            b.decoder_layer(f"dec.layer{l}", H, cfg.ffn_mult)
        b.ln("dec.final", H)

    def memory(self, P, vis: VisionBatch) -> tuple[Tensor, np.ndarray]:
        y = _vision_embed(P, "enc", vis)
        vbias = _key_bias(vis.mask)
        for l in range(self.cfg.enc_layers):
            y = encoder_layer(P, f"enc.layer{l}", y, vbias, self.cfg.heads)
        return _ln(P, "enc.final", y), vbias

    def decode(self, P, lang: LangBatch, memory: Tensor, mem_bias) -> Tensor:
        L = lang.ids.shape[1]
        if L > P["dec.pos"].shape[0]:
            raise InputError(f"decoder input of length {L} exceeds {P['dec.pos'].shape[0]}")
        x = nx.embedding(P["dec.tok"], lang.ids) + P["dec.pos"][:L]
        bias = _causal_bias(L, self.dtype) + _key_bias(lang.mask)
        for l in range(self.cfg.dec_layers):
            x = decoder_layer(P, f"dec.layer{l}", x, bias, memory, mem_bias, self.cfg.heads)
        return _ln(P, "dec.final", x)


class BaselineSeqScorer(_EncoderDecoder):
    """Encoder-decoder scorer: ``s = w' . mean_j(decoder state j)`` over the marked instruction."""
    kind = "seq_scorer"

    def _build(self, b: _Builder):
        self._build_encdec(b, self.cfg.max_len)
        self.store.add("score.w", (self.cfg.hidden,), "normal", b.seed, decay=False)

    def score_tensor(self, P, lang: LangBatch, vis: VisionBatch) -> Tensor:
        mem, mbias = self.memory(P, vis)
        states = self.decode(P, lang, mem, mbias)
        return (nx.masked_mean(states, lang.mask) * P["score.w"]).sum(axis=-1)

    def score_batch(self, lang: LangBatch, vis: VisionBatch) -> np.ndarray:
        with nx.no_grad():
            return self.score_tensor(self.params(), lang, vis).data.astype(np.float64)

    def score(self, traj: Trajectory, tokens: Sequence[str], i: int) -> float:
        lang = self.lang_batch([encode_instruction_input(tokens, i, self.vocab, self.cfg.max_len)])
        return float(self.score_batch(lang, self.vision_batch([encode_trajectory_input(traj)]))[0])


class SpeakerModel(_EncoderDecoder):
    """Autoregressive instruction generator ``S(u_i | r, u_<i)``."""
    kind = "speaker"

    def _build(self, b: _Builder):
        self._build_encdec(b, self.cfg.speaker_max_len + 1)
        b.linear("out", self.cfg.hidden, len(self.vocab))
        bias = np.zeros(len(self.vocab))
        # Only words, [SEP] and the unknown class are predictable.
        bias[[CLS, BH, EH, IMG, PAD]] = NEG_INF
        self._out_bias = bias.astype(self.dtype)

    def logits(self, P, lang: LangBatch, vis: VisionBatch) -> Tensor:
        mem, mbias = self.memory(P, vis)
        return _lin(P, "out", self.decode(P, lang, mem, mbias)) + self._out_bias

    def teacher_batch(self, token_lists: Sequence[Sequence[str]]):
        """Decoder inputs ``[CLS] u`` and targets ``u [SEP]`` with padding weights."""
        cap = self.cfg.speaker_max_len
        ins, tgts = [], []
        for toks in token_lists:
            ids = self.vocab.encode(toks)[:cap]
            ins.append([CLS] + ids)
            tgts.append(ids + [SEP])
        lang = self.lang_batch(ins)
        targets = np.full(lang.ids.shape, PAD, dtype=np.int64)
        for b, t in enumerate(tgts):
            targets[b, :len(t)] = t
        return lang, targets, lang.mask.copy()

    def log_probs(self, traj: Trajectory, tokens: Sequence[str]) -> np.ndarray:
        """(n+1, V) next-token log distributions under teacher forcing."""
        lang, _, _ = self.teacher_batch([tokens])
        vis = self.vision_batch([encode_trajectory_input(traj)])
        with nx.no_grad():
            lp = nx.log_softmax(self.logits(self.params(), lang, vis)).data[0]
        return lp.astype(np.float64)

    def token_logprobs(self, items: Sequence[tuple[VisionInput, Sequence[str], int]],
                       batch_size: int = 64) -> np.ndarray:
        """``log S(u_i | r, u_<i)`` for each (vision, tokens, i) triple."""
        out = np.zeros(len(items))
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            lang, targets, _ = self.teacher_batch([t for _, t, _ in chunk])
            vis = self.vision_batch([v for v, _, _ in chunk])
            with nx.no_grad():
                lp = nx.log_softmax(self.logits(self.params(), lang, vis)).data
            for b, (_, toks, i) in enumerate(chunk):
                if not 0 <= i < len(toks):
                    raise InputError(f"index {i} outside instruction of length {len(toks)}")
                out[start + b] = lp[b, i, targets[b, i]]
        return out

    def sample(self, trajs: Sequence[Trajectory], seed: int, max_len: Optional[int] = None,
               greedy: bool = False) -> list[list[str]]:
        """Ancestral (temperature 1) sampling until ``[SEP]`` or ``max_len`` tokens."""
        max_len = self.cfg.speaker_max_len if max_len is None else min(max_len, self.cfg.speaker_max_len)
        rng = np.random.default_rng(seed)
        vis = self.vision_batch([encode_trajectory_input(t) for t in trajs])
        P = self.params()
        with nx.no_grad():
            mem, mbias = self.memory(P, vis)
        B = len(trajs)
        seqs = [[CLS] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            lang = self.lang_batch(seqs)
            with nx.no_grad():
                x = self.decode(P, lang, mem, mbias)
                logits = _lin(P, "out", x).data[:, -1, :] + self._out_bias
            logits = logits.astype(np.float64)
            logits[:, MASK] = NEG_INF
            for b in range(B):
                if done[b]:
                    seqs[b].append(PAD)
                    continue
                z = logits[b] - logits[b].max()
                p = np.exp(z) / np.exp(z).sum()
                nxt = int(p.argmax()) if greedy else int(rng.choice(len(p), p=p))
                seqs[b].append(nxt)
                done[b] = nxt == SEP
            if done.all():
                break
        out = []
        for s in seqs:
            body = []
            for k in s[1:]:
                if k in (SEP, PAD):
                    break
                body.append(self.vocab.tokens[k])
            out.append(body)
        return out


def speaker_logprob(speaker: SpeakerModel, traj: Trajectory, tokens: Sequence[str], i: int) -> float:
    if not 0 <= i < len(tokens):
        raise InputError(f"index {i} outside instruction of length {len(tokens)}")
    if tokens[i] not in speaker.vocab:
        warnings.warn(f"token {tokens[i]!r} is not in the speaker vocabulary; scored as [MASK]",
                      stacklevel=2)
    return float(speaker.token_logprobs([(encode_trajectory_input(traj), tokens, i)])[0])


def speaker_sample(speaker: SpeakerModel, traj: Trajectory, seed: int, max_len: int = 80) -> list[str]:
    return speaker.sample([traj], seed, max_len)[0]


MODEL_KINDS = {cls.kind: cls for cls in (TwoTowerModel, BaselineSeqScorer, SpeakerModel)}


def save_model(model: _Module, path: str | Path, header: Optional[dict] = None, meta: Optional[dict] = None):
    info = dict(meta or {})
    info["config"] = model.config_dict()
    nx.save_checkpoint(path, model.store, header, info)


def load_model(path: str | Path, vocab: Vocab, dtype=np.float64) -> _Module:
    values, info = nx.read_checkpoint(path)
    conf = info["meta"]["config"]
    cls = MODEL_KINDS[conf["kind"]]
    if conf["vocab_size"] != len(vocab):
        raise InputError(f"checkpoint expects a vocabulary of {conf['vocab_size']}, got {len(vocab)}")
    model = cls(ModelConfig(**conf["model"]), vocab, conf["seed"], dtype)
    model.store.load_values(values)
    return model


def write_model_config(path: str | Path, model: _Module):
    cfg = model.cfg
    Path(path).write_text(json.dumps({
        "kind": model.kind,
        "towers": {"lang_layers": cfg.lang_layers, "vis_layers": cfg.vis_layers, "co_layers": cfg.co_layers},
        "H": cfg.hidden, "L": cfg.lang_layers, "heads": cfg.heads, "vocab": len(model.vocab),
        "model": cfg.to_dict(),
    }, indent=2, sort_keys=True) + "\n")
