"""Closed-vocabulary lexicon: direction word groups, room names and object nouns.

Candidate words for hallucination classification are direction words and
nouns. In the toy world the vocabulary is closed, so nouns are found by lexicon
lookup rather than by a part-of-speech tagger. ``Tagger`` is the hook for
plugging an external tagger in for open-vocabulary text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import ConfigError, DomainError
from .seeding import SeedLike, as_rng

DIRECTION = "direction"
ROOM = "room"
OBJECT = "object"
OTHER = "other"
TAGS = (DIRECTION, ROOM, OBJECT, OTHER)
CANDIDATE_TAGS = frozenset({DIRECTION, ROOM, OBJECT})

# (category, group) rows of the directional word table.
DIRECTION_TABLE: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("horizontal", ("left", "right")),
    ("horizontal", ("front", "back")),
    ("horizontal", ("forward", "backward")),
    ("horizontal", ("towards", "away from")),
    ("horizontal", ("through", "past")),
    ("horizontal", ("leftmost", "rightmost")),
    ("vertical", ("bottom", "middle", "top")),
    ("vertical", ("up", "down")),
    ("vertical", ("above", "under")),
    ("location", ("enter", "exit")),
    ("location", ("into", "out of")),
    ("location", ("inside", "outside")),
    ("location", ("first", "second", "third")),
)

# As printed, including the duplicated "staircase" and the trailing blank in
# "recreation room "; normalised into a set on load.
ROOM_LIST_AS_PRINTED: tuple[str, ...] = (
    "laundry room", "mudroom", "family room", "balcony", "utility room", "tool room",
    "entryway", "foyer", "lobby", "library", "bathroom", "bar", "spa", "sauna",
    "living room", "other room", "staircase", "garage", "hallway", "office",
    "classroom", "outdoor areas", "meeting room", "conference room", "dining room",
    "lounge", "bedroom", "porch", "terrace", "deck", "driveway", "kitchen", "toilet",
    "workout room", "exercise room", "gym", "tv room", "recreation room ", "game room",
    "closet", "junk", "study", "guest room", "music room", "home theater", "sunroom",
    "conservatory", "playroom", "pantry", "storage room", "attic", "basement",
    "gallery", "greenhouse", "yoga studio", "meditation room", "stairs", "staircase",
    "floor",
)

DEFAULT_OBJECTS: tuple[str, ...] = (
    "armchair", "bathtub", "bed", "bench", "bookshelf", "cabinet", "chair",
    "chandelier", "clock", "column", "computer", "couch", "counter", "curtain",
    "desk", "door", "dresser", "dryer", "fireplace", "fountain", "fridge", "lamp",
    "mirror", "ottoman", "oven", "painting", "piano", "plant", "printer", "railing",
    "rug", "sculpture", "shelf", "shower", "sink", "sofa", "statue", "step", "stool",
    "table", "television", "towel", "treadmill", "trophy", "vase", "wardrobe",
    "washer", "window",
)


def _norm(phrase: str) -> str:
    return " ".join(phrase.lower().split())


@dataclass(frozen=True)
class Lexicon:
    direction_groups: tuple[tuple[str, ...], ...]
    rooms: frozenset[str]
    objects: frozenset[str]
    _group_of: dict[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _phrases: dict[str, dict[tuple[str, ...], str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        problems = _validate(self.direction_groups, self.rooms, self.objects)
        if problems:
            raise ConfigError(problems)
        group_of = {w: g for g in self.direction_groups for w in g}
        phrases: dict[str, dict[tuple[str, ...], str]] = {DIRECTION: {}, ROOM: {}, OBJECT: {}}
        for w in group_of:
            phrases[DIRECTION][tuple(w.split())] = w
        for r in self.rooms:
            phrases[ROOM][tuple(r.split())] = r
        for o in self.objects:
            phrases[OBJECT][tuple(o.split())] = o
        object.__setattr__(self, "_group_of", group_of)
        object.__setattr__(self, "_phrases", phrases)

    @property
    def directions(self) -> frozenset[str]:
        return frozenset(self._group_of)

    def group(self, word: str) -> tuple[str, ...]:
        try:
            return self._group_of[_norm(word)]
        except KeyError:
            raise DomainError(f"{word!r} is not a direction word") from None

    def is_direction(self, word: str) -> bool:
        return _norm(word) in self._group_of

    def is_room(self, word: str) -> bool:
        return _norm(word) in self.rooms

    def is_object(self, word: str) -> bool:
        return _norm(word) in self.objects

    def category(self, word: str) -> str:
        """Tag of a single (possibly multiword) lexicon entry, by precedence."""
        w = _norm(word)
        if w in self._group_of:
            return DIRECTION
        if w in self.rooms:
            return ROOM
        if w in self.objects:
            return OBJECT
        return OTHER

    def to_dict(self) -> dict:
        return {
            "direction_groups": [list(g) for g in self.direction_groups],
            "rooms": sorted(self.rooms),
            "objects": sorted(self.objects),
        }


def _validate(groups, rooms, objects) -> list[str]:
    problems = []
    seen: set[str] = set()
    for g in groups:
        if len(g) < 2:
            problems.append(f"direction group {list(g)} has fewer than 2 words")
        if len(set(g)) != len(g):
            problems.append(f"direction group {list(g)} repeats a word")
        overlap = seen.intersection(g)
        if overlap:
            problems.append(f"direction groups overlap on {sorted(overlap)}")
        seen.update(g)
    if not rooms:
        problems.append("room list is empty")
    if not objects:
        problems.append("object vocabulary is empty")
    if set(objects) & set(rooms):
        problems.append(f"objects overlap rooms: {sorted(set(objects) & set(rooms))}")
    if set(objects) & seen:
        problems.append(f"objects overlap directions: {sorted(set(objects) & seen)}")
    return problems


def make_lexicon(direction_groups: Iterable[Iterable[str]], rooms: Iterable[str],
                 objects: Iterable[str]) -> Lexicon:
    return Lexicon(
        direction_groups=tuple(tuple(_norm(w) for w in g) for g in direction_groups),
        rooms=frozenset(_norm(r) for r in rooms),
        objects=frozenset(_norm(o) for o in objects),
    )


@lru_cache(maxsize=1)
def load_default_lexicon() -> Lexicon:
    return make_lexicon((g for _, g in DIRECTION_TABLE), ROOM_LIST_AS_PRINTED, DEFAULT_OBJECTS)


def load_lexicon(path: str | Path) -> Lexicon:
    """Load a lexicon override from JSON ``{direction_groups, rooms, objects}``."""
    data = json.loads(Path(path).read_text())
    missing = [k for k in ("direction_groups", "rooms", "objects") if k not in data]
    if missing:
        raise ConfigError([f"lexicon file lacks field '{k}'" for k in missing])
    return make_lexicon(data["direction_groups"], data["rooms"], data["objects"])


def direction_category(word: str) -> str:
    w = _norm(word)
    for cat, g in DIRECTION_TABLE:
        if w in g:
            return cat
    raise DomainError(f"{word!r} is not a direction word")


# -- tagging -----------------------------------------------------------------

Span = tuple[int, int, str]


def tag_spans(tokens: Sequence[str], lex: Lexicon | None = None) -> list[Span]:
    """Greedy left-to-right phrase matching; returns ``(start, end, tag)`` spans.

    A token may itself hold several words (e.g. ``"living room"``). At each
    position the longest direction phrase wins, then the longest room, then
    the longest object.
    """
    lex = lex or load_default_lexicon()
    words = [tuple(t.lower().split()) for t in tokens]
    spans: list[Span] = []
    p = 0
    n = len(tokens)
    while p < n:
        matched = None
        for tag in (DIRECTION, ROOM, OBJECT):
            table = lex._phrases[tag]
            acc: tuple[str, ...] = ()
            best = None
            for q in range(p, min(n, p + 4)):
                acc = acc + words[q]
                if acc in table:
                    best = q + 1
            if best is not None:
                matched = (p, best, tag)
                break
        if matched is None:
            spans.append((p, p + 1, OTHER))
            p += 1
        else:
            spans.append(matched)
            p = matched[1]
    return spans


def tag_tokens(tokens: Sequence[str], lex: Lexicon | None = None) -> list[str]:
    tags: list[str] = []
    for start, end, tag in tag_spans(tokens, lex):
        tags.extend([tag] * (end - start))
    return tags


def select_candidates(tokens: Sequence[str], tags: Sequence[str],
                      lex: Lexicon | None = None) -> list[int]:
    """Indices of candidate words; a multiword phrase is represented by its first token."""
    if len(tokens) != len(tags):
        raise ValueError(f"{len(tokens)} tokens but {len(tags)} tags")
    return [s for s, _, _ in tag_spans(tokens, lex) if tags[s] in CANDIDATE_TAGS]


def phrase_at(tokens: Sequence[str], index: int, lex: Lexicon | None = None) -> tuple[int, int]:
    """Token range of the lexicon phrase starting at ``index``."""
    for s, e, _ in tag_spans(tokens, lex):
        if s == index:
            return s, e
        if s > index:
            break
    return index, index + 1


Tagger = Callable[[Sequence[str]], list[str]]


# -- alternatives --------------------------------------------------------------

def alternative_direction(word: str, lex: Lexicon, seed: SeedLike) -> str:
    group = lex.group(word)
    w = _norm(word)
    choices = [g for g in group if g != w]
    return choices[int(as_rng(seed).integers(len(choices)))]


def alternative_room(word: str, lex: Lexicon, seed: SeedLike) -> str:
    w = _norm(word)
    if w not in lex.rooms:
        raise DomainError(f"{word!r} is not a room")
    choices = sorted(lex.rooms - {w})
    return choices[int(as_rng(seed).integers(len(choices)))]
