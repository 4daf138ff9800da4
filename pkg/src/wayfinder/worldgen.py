"""Procedural toy houses, trajectories, template verbalization and a rule-based follower."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import lexicon as lx
from .errors import ConfigError, InputError, SamplingError
from .seeding import SeedLike, as_rng, derive_rng, mix

HEADINGS = ("forward", "left", "back", "right")  # sector i is centred on i * pi/2
PITCH_ANGLE = math.pi / 6

# Follower reading of heading words, including the group alternatives that
# never occur in faithful output.
_HEADING_WORDS = {"forward": 0, "front": 0, "left": 1, "back": 2, "backward": 2, "right": 3}
# Location / motion words whose meaning is fixed in the toy world: every room
# mention is the destination, every object is passed on the way.
_GROUNDED_MOTION = {"enter": True, "exit": False, "past": True, "through": False,
                    "into": True, "out of": False, "towards": True, "away from": False,
                    "inside": True, "outside": False}


@dataclass(frozen=True)
class WorldConfig:
    n_rooms: int = 6
    min_objects: int = 1
    max_objects: int = 3
    regions: int = 8
    feature_dim: int = 32
    extra_edge_prob: float = 0.6
    stairs_prob: float = 0.2
    max_length: int = 3
    feature_noise: float = 0.25

    def problems(self) -> list[str]:
        out = []
        if self.n_rooms < 2:
            out.append(f"n_rooms must be >= 2 (got {self.n_rooms})")
        if self.regions < 2:
            out.append(f"regions K must be >= 2 (got {self.regions})")
        if self.feature_dim < 1:
            out.append(f"feature_dim D must be >= 1 (got {self.feature_dim})")
        if not 1 <= self.min_objects <= self.max_objects:
            out.append("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.regions - 1:
            out.append(f"max_objects must be <= K-1 = {self.regions - 1}")
        if self.max_length < 1:
            out.append("max_length must be >= 1")
        return out

    def validate(self) -> "WorldConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self


@dataclass(frozen=True)
class Room:
    id: int
    name: str


@dataclass(frozen=True)
class Portal:
    """Directed view of an undirected doorway: heading/pitch as seen leaving ``a``."""
    a: int
    b: int
    heading: float
    pitch: float

    @property
    def label(self) -> str:
        return heading_label(self.heading)

    def reversed(self) -> "Portal":
        return Portal(self.b, self.a, _wrap(self.heading + math.pi), -self.pitch)


@dataclass(frozen=True)
class ToyHouse:
    seed: int
    rooms: tuple[Room, ...]
    portals: tuple[Portal, ...]
    objects: tuple[tuple[str, int, int], ...]  # (name, room id, region slot)
    regions: int = 8
    feature_dim: int = 32
    feature_noise: float = 0.25
    _out: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        out: dict[int, list[Portal]] = {r.id: [] for r in self.rooms}
        for p in self.portals:
            out[p.a].append(p)
            out[p.b].append(p.reversed())
        object.__setattr__(self, "_out", {k: tuple(v) for k, v in out.items()})

    def exits(self, room: int) -> tuple[Portal, ...]:
        return self._out[room]

    def room_name(self, room: int) -> str:
        return self.rooms[room].name

    def objects_in(self, room: int) -> list[str]:
        return [name for name, rid, _ in sorted(self.objects, key=lambda o: o[2]) if rid == room]

    def portal(self, a: int, b: int) -> Portal:
        for p in self._out[a]:
            if p.b == b:
                return p
        raise InputError(f"no portal from room {a} to room {b}")

    def observe(self, room: int) -> "Observation":
        return render_observation(self, room)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "regions": self.regions,
            "feature_dim": self.feature_dim,
            "feature_noise": self.feature_noise,
            "rooms": [{"id": r.id, "name": r.name} for r in self.rooms],
            "portals": [{"a": p.a, "b": p.b, "heading": p.heading, "pitch": p.pitch,
                         "label": p.label} for p in self.portals],
            "objects": [{"name": n, "room": r, "slot": s} for n, r, s in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyHouse":
        return cls(
            seed=int(d["seed"]),
            rooms=tuple(Room(int(r["id"]), r["name"]) for r in d["rooms"]),
            portals=tuple(Portal(int(p["a"]), int(p["b"]), float(p["heading"]), float(p["pitch"]))
                          for p in d["portals"]),
            objects=tuple((o["name"], int(o["room"]), int(o["slot"])) for o in d["objects"]),
            regions=int(d.get("regions", 8)),
            feature_dim=int(d.get("feature_dim", 32)),
            feature_noise=float(d.get("feature_noise", 0.25)),
        )


@dataclass(frozen=True, eq=False)
class Observation:
    room_id: int
    regions: np.ndarray  # (K, D); row 0 is the room, then objects, then zero padding

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.regions, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Action:
    heading: float
    pitch: float
    target_view: np.ndarray
    direction_label: str
    pitch_label: Optional[str] = None

    @property
    def features(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading),
                         math.cos(self.pitch), math.sin(self.pitch)])


@dataclass(frozen=True, eq=False)
class Trajectory:
    house_id: str
    path: tuple[int, ...]  # visited rooms, len = steps + 1
    steps: tuple[tuple[Observation, Action], ...]
    final_observation: Observation

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def start(self) -> int:
        return self.path[0]

    @property
    def goal(self) -> int:
        return self.path[-1]

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "steps": [{"room": o.room_id, "regions_digest": o.digest,
                       "action": {"cos_h": float(a.features[0]), "sin_h": float(a.features[1]),
                                  "cos_v": float(a.features[2]), "sin_v": float(a.features[3]),
                                  "label": a.direction_label, "pitch_label": a.pitch_label}}
                      for o, a in self.steps],
            "final_room": self.goal,
        }


@dataclass
class GroundTruthInstruction:
    tokens: list[str]
    tags: list[str]
    sentence_spans: list[tuple[int, int]]
    alignment: list[Optional[tuple[int, int]]]  # sentence -> step range [start, end)

    def sentence_of(self, index: int) -> int:
        for s, (a, b) in enumerate(self.sentence_spans):
            if a <= index < b:
                return s
        raise IndexError(index)


# -- geometry ------------------------------------------------------------------

def _wrap(angle: float) -> float:
    a = math.fmod(angle + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi  # (-pi, pi]


def heading_label(heading: float) -> str:
    h = _wrap(heading)
    q = math.pi / 4
    if -q < h <= q:
        return "forward"
    if q < h <= 3 * q:
        return "left"
    if -3 * q < h <= -q:
        return "right"
    return "back"


def pitch_label(pitch: float) -> Optional[str]:
    if pitch > math.pi / 8:
        return "up"
    if pitch < -math.pi / 8:
        return "down"
    return None


# -- features --------------------------------------------------------------

@lru_cache(maxsize=4096)
def _base_feature(name: str, dim: int) -> np.ndarray:
    v = derive_rng(0x5EED, "feature", name).normal(size=dim)
    return v / np.linalg.norm(v)


def region_feature(name: str, house_seed: int, dim: int = 32, noise: float = 0.25) -> np.ndarray:
    """Unit vector for ``name`` in a given house: shared direction plus house-specific jitter."""
    jitter = derive_rng(house_seed, "jitter", name).normal(size=dim) / math.sqrt(dim)
    v = _base_feature(name, dim) + noise * jitter
    return v / np.linalg.norm(v)


def render_observation(house: ToyHouse, room: int) -> Observation:
    regions = np.zeros((house.regions, house.feature_dim))
    regions[0] = region_feature(house.room_name(room), house.seed, house.feature_dim, house.feature_noise)
    for name, rid, slot in house.objects:
        if rid == room:
            regions[slot] = region_feature(name, house.seed, house.feature_dim, house.feature_noise)
    return Observation(room, regions)


# -- houses ------------------------------------------------------------------

def generate_house(seed: int, cfg: WorldConfig | None = None,
                   lex: lx.Lexicon | None = None) -> ToyHouse:
    cfg = (cfg or WorldConfig()).validate()
    lex = lex or lx.load_default_lexicon()
    rooms_pool = sorted(lex.rooms)
    objects_pool = sorted(lex.objects)
    if cfg.n_rooms > len(rooms_pool):
        raise ConfigError(f"n_rooms={cfg.n_rooms} exceeds the {len(rooms_pool)} known rooms")
    if cfg.n_rooms * cfg.max_objects > len(objects_pool):
        raise ConfigError("object vocabulary too small for n_rooms * max_objects unique objects")
    rng = as_rng(mix(seed, "house"))
    names = [rooms_pool[i] for i in rng.choice(len(rooms_pool), cfg.n_rooms, replace=False)]
    rooms = tuple(Room(i, n) for i, n in enumerate(names))

    used: list[set[int]] = [set() for _ in rooms]
    pitched: list[tuple[int, int, int, float]] = []  # (a, b, sector at a, pitch)

    def connect(a: int, b: int, sector: int):
        used[a].add(sector)
        used[b].add((sector + 2) % 4)
        pitch = PITCH_ANGLE if rng.random() < cfg.stairs_prob else 0.0
        if pitch and rng.random() < 0.5:
            pitch = -pitch
        pitched.append((a, b, sector, pitch))

    for child in range(1, cfg.n_rooms):
        parents = [p for p in range(child) if len(used[p]) < 4]
        parent = parents[int(rng.integers(len(parents)))]
        free = sorted(set(range(4)) - used[parent])
        connect(parent, child, free[int(rng.integers(len(free)))])
    linked = {(a, b) for a, b, _, _ in pitched} | {(b, a) for a, b, _, _ in pitched}
    pairs = [(a, b) for a in range(cfg.n_rooms) for b in range(a + 1, cfg.n_rooms) if (a, b) not in linked]
    for k in rng.permutation(len(pairs)):
        a, b = pairs[k]
        if rng.random() >= cfg.extra_edge_prob:
            continue
        free = sorted(s for s in set(range(4)) - used[a] if (s + 2) % 4 not in used[b])
        if free:
            connect(a, b, free[int(rng.integers(len(free)))])

    portals = []
    for a, b, sector, pitch in pitched:
        jitter = rng.uniform(-math.pi / 8, math.pi / 8)
        portals.append(Portal(a, b, _wrap(sector * math.pi / 2 + jitter), pitch))

    counts = rng.integers(cfg.min_objects, cfg.max_objects + 1, size=cfg.n_rooms)
    picked = rng.choice(len(objects_pool), int(counts.sum()), replace=False)
    objects = []
    k = 0
    for rid, c in enumerate(counts):
        for slot in range(1, int(c) + 1):
            objects.append((objects_pool[picked[k]], rid, slot))
            k += 1
    return ToyHouse(seed=seed, rooms=rooms, portals=tuple(portals), objects=tuple(objects),
                    regions=cfg.regions, feature_dim=cfg.feature_dim, feature_noise=cfg.feature_noise)


def house_is_connected(house: ToyHouse) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        r = stack.pop()
        for p in house.exits(r):
            if p.b not in seen:
                seen.add(p.b)
                stack.append(p.b)
    return len(seen) == len(house.rooms)


# -- trajectories --------------------------------------------------------------

def make_trajectory(house: ToyHouse, path: Sequence[int], house_id: str = "") -> Trajectory:
    steps = []
    for a, b in zip(path[:-1], path[1:]):
        p = house.portal(a, b)
        target = region_feature(house.room_name(b), house.seed, house.feature_dim, house.feature_noise)
        act = Action(p.heading, p.pitch, target, p.label, pitch_label(p.pitch))
        steps.append((house.observe(a), act))
    return Trajectory(house_id or f"house-{house.seed}", tuple(path), tuple(steps), house.observe(path[-1]))


def sample_trajectory(house: ToyHouse, seed: SeedLike, length: int, house_id: str = "",
                      max_attempts: int = 64, start: Optional[int] = None) -> Trajectory:
    """Random walk over unvisited rooms, restarting until a path of ``length`` moves is found.

    The start room is uniform unless given; each move is uniform over the
    portals leading to rooms not yet visited.
    """
    n = len(house.rooms)
    if length < 1 or length > n - 1:
        raise SamplingError(f"length {length} unreachable in house {house_id or house.seed} "
                            f"with {n} rooms")
    if start is not None and not 0 <= start < n:
        raise InputError(f"start room {start} not in house {house_id or house.seed}")
    rng = as_rng(seed)
    for _ in range(max_attempts):
        path = [int(rng.integers(n)) if start is None else start]
        while len(path) <= length:
            options = [p.b for p in house.exits(path[-1]) if p.b not in path]
            if not options:
                break
            path.append(options[int(rng.integers(len(options)))])
        if len(path) == length + 1:
            return make_trajectory(house, path, house_id)
    raise SamplingError(f"length {length} unreachable in house {house_id or house.seed}")


# -- verbalization --------------------------------------------------------------

FLAT_TEMPLATES = (
    "turn {dir} and enter the {room} .",
    "go {dir} to the {room} .",
    "walk past the {obj} and go {dir} to the {room} .",
    "head {dir} and stop in the {room} .",
    "walk {dir} past the {obj} and enter the {room} .",
    "move {dir} and wait in the {room} .",
    "leaving the {obj} , go {dir} to the {room} .",
    "with the {obj} nearby , walk {dir} and enter the {room} .",
    "continue {dir} until you reach the {room} .",
    "pass the {obj} , then head {dir} to the {room} .",
)
VERTICAL_TEMPLATES = (
    "turn {dir} and go {pitch} to the {room} .",
    "walk {pitch} the steps on the {dir} and enter the {room} .",
    "walk past the {obj} , go {dir} and climb {pitch} to the {room} .",
    "head {pitch} on the {dir} to the {room} .",
    "go {dir} , then {pitch} the steps to the {room} .",
    "from the {obj} , go {dir} and take the steps {pitch} to the {room} .",
    "move {dir} and head {pitch} to the {room} .",
    "climb {pitch} on the {dir} past the {obj} and stop in the {room} .",
    "go {pitch} the steps to your {dir} and wait in the {room} .",
)


def verbalize(traj: Trajectory, house: ToyHouse, seed: SeedLike,
              lex: lx.Lexicon | None = None) -> GroundTruthInstruction:
    lex = lex or lx.load_default_lexicon()
    rng = as_rng(seed)
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    alignment: list[Optional[tuple[int, int]]] = []
    for t, (obs, act) in enumerate(traj.steps):
        family = VERTICAL_TEMPLATES if act.pitch_label else FLAT_TEMPLATES
        template = family[int(rng.integers(len(family)))]
        objs = house.objects_in(obs.room_id)
        slots = {"dir": act.direction_label, "pitch": act.pitch_label or "",
                 "room": house.room_name(traj.path[t + 1]),
                 "obj": objs[int(rng.integers(len(objs)))] if objs else ""}
        start = len(tokens)
        for word in template.split():
            if word.startswith("{"):
                tokens.append(slots[word[1:-1]])
            else:
                tokens.append(word)
        spans.append((start, len(tokens)))
        alignment.append((t, t + 1))
    return GroundTruthInstruction(tokens, lx.tag_tokens(tokens, lex), spans, alignment)


def split_sentences(tokens: Sequence[str]) -> list[tuple[int, int]]:
    spans = []
    start = 0
    for k, tok in enumerate(tokens):
        if tok == ".":
            spans.append((start, k + 1))
            start = k + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def faithfulness(tokens: Sequence[str], alignment: Sequence[Optional[tuple[int, int]]],
                 sentence_spans: Sequence[tuple[int, int]], traj: Trajectory, house: ToyHouse,
                 lex: lx.Lexicon | None = None) -> dict[int, bool]:
    """Map each candidate index to whether its word agrees with the trajectory.

    A sentence aligned to step ``t`` must name the heading and pitch of action
    ``t``, the destination room ``path[t+1]`` and objects of the current room.
    Candidates in unaligned sentences have no grounding and are unfaithful.
    """
    lex = lex or lx.load_default_lexicon()
    out: dict[int, bool] = {}
    spans = lx.tag_spans(tokens, lex)
    for s, e, tag in spans:
        if tag == lx.OTHER:
            continue
        word = " ".join(tokens[s:e]).lower()
        sent = next((k for k, (a, b) in enumerate(sentence_spans) if a <= s < b), None)
        rng_ = alignment[sent] if sent is not None and sent < len(alignment) else None
        if rng_ is None or rng_[0] >= len(traj.steps):
            out[s] = False
            continue
        t = rng_[0]
        obs, act = traj.steps[t]
        if tag == lx.ROOM:
            ok = word == house.room_name(traj.path[t + 1])
        elif tag == lx.OBJECT:
            ok = word in house.objects_in(obs.room_id)
        elif word in _HEADING_WORDS:
            ok = word == act.direction_label
        elif word in ("up", "down"):
            ok = word == act.pitch_label
        else:
            ok = _GROUNDED_MOTION.get(word, False)
        out[s] = ok
    return out


def instruction_faithful(instr: GroundTruthInstruction, traj: Trajectory, house: ToyHouse,
                         lex: lx.Lexicon | None = None) -> bool:
    return all(faithfulness(instr.tokens, instr.alignment, instr.sentence_spans, traj, house, lex).values())


# -- follower --------------------------------------------------------------

@dataclass(frozen=True)
class FollowResult:
    path: tuple[int, ...]
    success: Optional[bool]


def follow(house: ToyHouse, tokens: Sequence[str], start: int, seed: SeedLike,
           goal: Optional[int] = None, lex: lx.Lexicon | None = None) -> FollowResult:
    """Greedy sentence-by-sentence parse: one portal crossing per sentence.

    Each exit scores 3 for a matching heading word, 2 when its destination
    room is named and 1 for a matching up/down word; the best exit is taken
    and ties are broken uniformly under ``seed``.
    """
    if not 0 <= start < len(house.rooms):
        raise InputError(f"start room {start} not in house {house.seed}")
    lex = lex or lx.load_default_lexicon()
    rng = as_rng(seed)
    path = [start]
    spans = lx.tag_spans(tokens, lex)
    for a, b in split_sentences(tokens):
        headings, pitches, rooms = set(), set(), set()
        for s, e, tag in spans:
            if not a <= s < b:
                continue
            word = " ".join(tokens[s:e]).lower()
            if tag == lx.ROOM:
                rooms.add(word)
            elif word in _HEADING_WORDS:
                headings.add(_HEADING_WORDS[word])
            elif word in ("up", "down"):
                pitches.add(word)
        exits = house.exits(path[-1])
        if not exits:
            break
        scores = []
        for p in exits:
            sector = HEADINGS.index(p.label)
            scores.append(3 * (sector in headings) + 2 * (house.room_name(p.b) in rooms)
                          + (pitch_label(p.pitch) in pitches))
        best = max(scores)
        ties = [p for p, sc in zip(exits, scores) if sc == best]
        path.append(ties[int(rng.integers(len(ties)))].b)
    success = None if goal is None else path[-1] == goal
    return FollowResult(tuple(path), success)


def ensemble_success_rate(house: ToyHouse, tokens: Sequence[str], start: int, goal: int,
                          k: int = 5, seed: int = 0, lex: lx.Lexicon | None = None) -> float:
    if k < 1:
        raise InputError(f"ensemble size must be >= 1 (got {k})")
    hits = sum(bool(follow(house, tokens, start, mix(seed, "follower", j), goal, lex).success)
               for j in range(k))
    return hits / k
