"""Category tables with stuff/things/freespace partitions for the two
dataset profiles (synthetic indoor renders, real RGB-D scans)."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidArgumentError

THING = "thing"
STUFF = "stuff"
FREESPACE = "freespace"


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in (THING, STUFF, FREESPACE):
            raise InvalidArgumentError(f"unknown category kind {self.kind!r}")


@dataclass(frozen=True)
class CategoryTable:
    """Immutable category set; exactly one freespace category, every other
    category flagged as exactly one of stuff or things."""

    categories: tuple[Category, ...]

    def __post_init__(self):
        ids = [c.id for c in self.categories]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("duplicate category ids")
        n_free = sum(1 for c in self.categories if c.kind == FREESPACE)
        if n_free != 1:
            raise InvalidArgumentError(f"need exactly one freespace category, got {n_free}")

    def __len__(self) -> int:
        return len(self.categories)

    def __contains__(self, cat_id: int) -> bool:
        return any(c.id == cat_id for c in self.categories)

    @property
    def freespace_id(self) -> int:
        return next(c.id for c in self.categories if c.kind == FREESPACE)

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.categories if c.kind == THING)

    @property
    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.categories if c.kind == STUFF)

    def kind_of(self, cat_id: int) -> str:
        for c in self.categories:
            if c.id == cat_id:
                return c.kind
        raise InvalidArgumentError(f"unknown category id {cat_id}")

    def name_of(self, cat_id: int) -> str:
        for c in self.categories:
            if c.id == cat_id:
                return c.name
        raise InvalidArgumentError(f"unknown category id {cat_id}")

    def is_thing(self, cat_id: int) -> bool:
        return self.kind_of(cat_id) == THING

    def is_stuff(self, cat_id: int) -> bool:
        return self.kind_of(cat_id) == STUFF

    @property
    def num_semantic_channels(self) -> int:
        """Logit width for semantic heads: one channel per category id in
        0..max_id (ids are required to be dense for prediction volumes)."""
        return max(c.id for c in self.categories) + 1


_THINGS = (
    (1, "cabinet"),
    (2, "bed"),
    (3, "chair"),
    (4, "sofa"),
    (5, "table"),
    (6, "desk"),
    (7, "dresser"),
    (8, "lamp"),
    (9, "other"),
)

# 11 categories: 9 instance-level things plus wall/floor stuff; freespace is
# the non-surface label used by supervision volumes and the semantic head.
SYNTHETIC_CATEGORIES = CategoryTable(
    categories=(Category(0, "freespace", FREESPACE),)
    + tuple(Category(i, n, THING) for i, n in _THINGS)
    + (Category(10, "wall", STUFF), Category(11, "floor", STUFF)),
)

# 12 categories: same 9 things, plus ceiling as additional stuff.
REAL_CATEGORIES = CategoryTable(
    categories=SYNTHETIC_CATEGORIES.categories + (Category(12, "ceiling", STUFF),),
)

PROFILES = {
    "synthetic": SYNTHETIC_CATEGORIES,
    "real": REAL_CATEGORIES,
}


def profile_categories(profile: str) -> CategoryTable:
    try:
        return PROFILES[profile]
    except KeyError as exc:
        raise InvalidArgumentError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from exc
