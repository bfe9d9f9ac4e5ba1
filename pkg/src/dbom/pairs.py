"""Trigger-object pairing space and its seen/unseen/test partitions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_MAX_SPLIT_TRIES = 1000


@dataclass(frozen=True)
class PairSpace:
    """The Cartesian product of trigger and object name lists.

    pairs holds (trigger_index, object_index) tuples in trigger-major
    order, so pair k is (k // n_objects, k % n_objects).
    """

    triggers: tuple[str, ...]
    objects: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def pair_index(self, trigger_idx: int, object_idx: int) -> int:
        return trigger_idx * len(self.objects) + object_idx

    def pair_names(self, pair_idx: int) -> tuple[str, str]:
        t, o = self.pairs[pair_idx]
        return self.triggers[t], self.objects[o]


def build_pair_space(triggers: Sequence[str], objects: Sequence[str]) -> PairSpace:
    """Build P = T x O in trigger-major order; names must be unique."""
    if not triggers or not objects:
        raise ValueError("both trigger and object name lists must be non-empty")
    if len(set(triggers)) != len(triggers):
        raise ValueError("duplicate trigger names")
    if len(set(objects)) != len(objects):
        raise ValueError("duplicate object names")
    pairs = tuple((t, o) for t in range(len(triggers)) for o in range(len(objects)))
    return PairSpace(tuple(triggers), tuple(objects), pairs)


@dataclass
class PairSplit:
    """Disjoint, exhaustive seen/unseen partition plus the test pairs."""

    seen: list[int] = field(default_factory=list)
    unseen: list[int] = field(default_factory=list)
    test_pairs: list[int] = field(default_factory=list)

    @property
    def seen_set(self) -> frozenset[int]:
        return frozenset(self.seen)

    @property
    def unseen_set(self) -> frozenset[int]:
        return frozenset(self.unseen)


def validate_split(space: PairSpace, split: PairSplit) -> None:
    """Enforce the partition laws: disjoint, exhaustive, covering."""
    seen, unseen = split.seen_set, split.unseen_set
    if seen & unseen:
        raise ValueError("seen and unseen pair sets overlap")
    if seen | unseen != set(range(space.n_pairs)):
        raise ValueError("seen and unseen do not partition the pair space")
    if not set(split.test_pairs) <= set(range(space.n_pairs)):
        raise ValueError("test_pairs outside the pair space")
    seen_t = {space.pairs[k][0] for k in seen}
    seen_o = {space.pairs[k][1] for k in seen}
    if seen_t != set(range(len(space.triggers))):
        missing = sorted(set(range(len(space.triggers))) - seen_t)
        raise ValueError(f"triggers {missing} appear in no seen pair; their embeddings would be untrainable")
    if seen_o != set(range(len(space.objects))):
        missing = sorted(set(range(len(space.objects))) - seen_o)
        raise ValueError(f"objects {missing} appear in no seen pair; their embeddings would be untrainable")


def split_pairs(space: PairSpace, seen_fraction: float, seed: int) -> PairSplit:
    """Seeded random partition with round(fraction * |P|) seen pairs.

    Redraws until every trigger and every object occurs in at least
    one seen pair; raises when the requested fraction cannot cover
    all primitives. test_pairs defaults to the whole space.
    """
    if not 0.0 < seen_fraction <= 1.0:
        raise ValueError(f"seen_fraction must lie in (0, 1], got {seen_fraction}")
    n = space.n_pairs
    n_seen = int(round(seen_fraction * n))
    minimum = max(len(space.triggers), len(space.objects))
    if n_seen < minimum:
        raise ValueError(
            f"seen_fraction {seen_fraction} gives {n_seen} seen pairs but primitive "
            f"coverage needs at least {minimum} (fraction >= {minimum / n:.4f})"
        )
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_SPLIT_TRIES):
        seen = sorted(int(k) for k in rng.choice(n, size=n_seen, replace=False))
        split = PairSplit(
            seen=seen,
            unseen=[k for k in range(n) if k not in set(seen)],
            test_pairs=list(range(n)),
        )
        try:
            validate_split(space, split)
        except ValueError:
            continue
        return split
    raise ValueError(
        f"no covering split found in {_MAX_SPLIT_TRIES} draws at seen_fraction {seen_fraction}"
    )


def save_split(split: PairSplit, space: PairSpace, path: str | Path) -> None:
    """Write a split as JSON name-pair arrays under keys seen/unseen/test."""
    def rows(indices: Sequence[int]) -> list[list[str]]:
        return [list(space.pair_names(k)) for k in indices]

    payload = {"seen": rows(split.seen), "unseen": rows(split.unseen),
               "test": rows(split.test_pairs)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(space: PairSpace, path: str | Path) -> PairSplit:
    """Read a JSON split file back to pair indices, validating names."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    t_index = {name: i for i, name in enumerate(space.triggers)}
    o_index = {name: i for i, name in enumerate(space.objects)}

    def indices(rows: Sequence[Sequence[str]], label: str) -> list[int]:
        out = []
        for t_name, o_name in rows:
            if t_name not in t_index or o_name not in o_index:
                raise ValueError(f"{label} pair ({t_name}, {o_name}) not in the pair space")
            out.append(space.pair_index(t_index[t_name], o_index[o_name]))
        return out

    split = PairSplit(
        seen=indices(payload["seen"], "seen"),
        unseen=indices(payload["unseen"], "unseen"),
        test_pairs=indices(payload.get("test", []), "test"),
    )
    validate_split(space, split)
    return split
