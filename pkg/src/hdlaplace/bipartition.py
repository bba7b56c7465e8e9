"""Enumeration and classification of connected M-bipartitions.

An M-bipartition of ``{0, ..., 2m-1}`` is a pair ``(P, Q)`` where ``P`` splits
the elements into ``v`` blocks of size at least three and ``Q`` is a perfect
matching.  Its level is ``m - v``.  Two bipartitions are equivalent when one
is a relabeling of the other; every member of a class gives the same index
sum, so the series terms only need one representative per class together
with the class size.

Elements are 0-based here.  :meth:`Bipartition.parse` and the CSV catalog use
the 1-based labels that are conventional in print.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

__all__ = [
    "Bipartition",
    "BipartitionClass",
    "set_partitions",
    "perfect_matchings",
    "is_connected",
    "canonical_signature",
    "level_shapes",
    "enumerate_connected",
    "enumerate_connected_level",
    "iter_connected",
    "brute_force_classes",
    "relabeling_orbits",
    "catalog_rows",
    "write_catalog_csv",
]


@dataclass(frozen=True)
class Bipartition:
    p_blocks: tuple[tuple[int, ...], ...]
    q_blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        n = 2 * len(self.q_blocks)
        universe = set(range(n))
        p_elems = [a for p in self.p_blocks for a in p]
        q_elems = [a for q in self.q_blocks for a in q]
        if n == 0 or sorted(p_elems) != sorted(universe) or sorted(q_elems) != sorted(universe):
            raise ValueError("P and Q must both partition {0, ..., 2m-1}")
        if any(len(p) < 3 for p in self.p_blocks):
            raise ValueError("every P-block needs at least three elements")
        if any(len(q) != 2 for q in self.q_blocks):
            raise ValueError("every Q-block must be a pair")

    @property
    def m(self) -> int:
        return len(self.q_blocks)

    @property
    def v(self) -> int:
        return len(self.p_blocks)

    @property
    def level(self) -> int:
        return self.m - self.v

    @classmethod
    def parse(cls, p: str, q: str) -> "Bipartition":
        """Build from 1-based strings such as ``parse("123|456", "14|25|36")``.

        Blocks are separated by ``|``; within a block, labels are single
        digits unless separated by spaces.
        """

        def blocks(text):
            out = []
            for chunk in text.strip("() ").split("|"):
                chunk = chunk.strip()
                labels = chunk.split() if " " in chunk else list(chunk)
                out.append(tuple(int(x) - 1 for x in labels))
            return tuple(out)

        return cls(blocks(p), blocks(q))

    def relabel(self, perm) -> "Bipartition":
        """Apply ``a -> perm[a]`` to every element."""
        return Bipartition(
            tuple(tuple(perm[a] for a in p) for p in self.p_blocks),
            tuple(tuple(perm[a] for a in q) for q in self.q_blocks),
        )

    def __str__(self):
        def fmt(blocks):
            sep = " " if 2 * self.m > 9 else ""
            return "|".join(sep.join(str(a + 1) for a in b) for b in blocks)

        return f"P=({fmt(self.p_blocks)}) Q=({fmt(self.q_blocks)})"


@dataclass(frozen=True)
class BipartitionClass:
    representative: Bipartition
    multiplicity: int
    signature: tuple

    @property
    def v(self) -> int:
        return self.representative.v

    @property
    def m(self) -> int:
        return self.representative.m

    @property
    def level(self) -> int:
        return self.representative.level


def set_partitions(n: int, min_block: int = 1) -> Iterator[tuple[tuple[int, ...], ...]]:
    """Set partitions of ``range(n)`` via restricted-growth strings.

    Partitions with a block smaller than ``min_block`` are skipped.
    """
    if n == 0:
        return
    labels = [0] * n

    def rec(i, nblocks):
        if i == n:
            blocks = [[] for _ in range(nblocks)]
            for a, b in enumerate(labels):
                blocks[b].append(a)
            if all(len(b) >= min_block for b in blocks):
                yield tuple(tuple(b) for b in blocks)
            return
        for b in range(nblocks + 1):
            labels[i] = b
            yield from rec(i + 1, max(nblocks, b + 1))

    yield from rec(1, 1)


def perfect_matchings(elements) -> Iterator[tuple[tuple[int, int], ...]]:
    """Perfect matchings, always pairing the smallest free element first."""
    elements = tuple(elements)
    if not elements:
        yield ()
        return
    first = elements[0]
    for i in range(1, len(elements)):
        rest = elements[1:i] + elements[i + 1 :]
        for tail in perfect_matchings(rest):
            yield ((first, elements[i]),) + tail


def is_connected(b: Bipartition) -> bool:
    """Whether the graph joining elements sharing a P- or Q-block is connected."""
    parent = list(range(2 * b.m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for block in itertools.chain(b.p_blocks, b.q_blocks):
        root = find(block[0])
        for a in block[1:]:
            parent[find(a)] = root
    return len({find(a) for a in range(2 * b.m)}) == 1


def _quotient(b: Bipartition):
    block_of = {a: i for i, p in enumerate(b.p_blocks) for a in p}
    v = b.v
    edges = [[0] * v for _ in range(v)]
    for x, y in b.q_blocks:
        i, j = block_of[x], block_of[y]
        edges[i][j] += 1
        if i != j:
            edges[j][i] += 1
    return [len(p) for p in b.p_blocks], edges


def canonical_signature(b: Bipartition) -> tuple:
    """Relabeling-invariant key of a bipartition.

    The key is the lexicographically smallest encoding, over orderings of the
    P-blocks, of the multigraph whose vertices are P-blocks (labelled by
    size) and whose edges are the Q-pairs.  A block's degree equals its size,
    so this multigraph determines the bipartition up to relabeling.
    """
    sizes, edges = _quotient(b)
    v = len(sizes)
    best = None
    for order in itertools.permutations(range(v)):
        key = (
            tuple(sizes[i] for i in order),
            tuple(edges[order[i]][order[j]] for i in range(v) for j in range(i, v)),
        )
        if best is None or key < best:
            best = key
    return best


def level_shapes(level: int) -> list[tuple[int, int]]:
    """All ``(v, m)`` with ``m - v = level`` and ``3v <= 2m``."""
    if level < 1:
        raise ValueError("level must be at least 1")
    return [(v, v + level) for v in range(1, 2 * level + 1)]


def _block_size_profiles(total: int, parts: int, smallest: int = 3):
    """Non-decreasing tuples of ``parts`` integers >= ``smallest`` summing to ``total``."""
    if parts == 1:
        if total >= smallest:
            yield (total,)
        return
    for first in range(smallest, total // parts + 1):
        for rest in _block_size_profiles(total - first, parts - 1, first):
            yield (first,) + rest


def _partitions_with_profile(sizes) -> int:
    count = math.factorial(sum(sizes))
    for s in sizes:
        count //= math.factorial(s)
    for mult in Counter(sizes).values():
        count //= math.factorial(mult)
    return count


@lru_cache(maxsize=None)
def enumerate_connected(v: int, m: int) -> tuple[BipartitionClass, ...]:
    """Classes of connected bipartitions with ``v`` P-blocks and ``m`` pairs.

    Relabelings act transitively on the P-partitions with a given multiset of
    block sizes, so it suffices to fix one such partition, classify all of
    its matchings, and scale each count by the number of partitions with
    that profile.
    """
    classes = []
    for sizes in _block_size_profiles(2 * m, v):
        bounds = list(itertools.accumulate(sizes, initial=0))
        p_blocks = tuple(tuple(range(bounds[i], bounds[i + 1])) for i in range(v))
        n_partitions = _partitions_with_profile(sizes)
        block_of = [i for i, s in enumerate(sizes) for _ in range(s)]
        # connectivity and signature depend only on the block multigraph,
        # so matchings are grouped by it and each group is classified once
        by_quotient: dict[tuple, list] = {}
        for q in perfect_matchings(range(2 * m)):
            key = tuple(sorted((block_of[x], block_of[y]) for x, y in q))
            entry = by_quotient.setdefault(key, [q, 0])
            entry[1] += 1
        counts: dict[tuple, int] = {}
        first: dict[tuple, Bipartition] = {}
        for q, count in by_quotient.values():
            b = Bipartition(p_blocks, q)
            if not is_connected(b):
                continue
            sig = canonical_signature(b)
            if sig not in counts:
                counts[sig] = 0
                first[sig] = b
            counts[sig] += count
        for sig, count in counts.items():
            classes.append(BipartitionClass(first[sig], count * n_partitions, sig))
    return tuple(classes)


def enumerate_connected_level(level: int, max_m: int | None = None) -> list[BipartitionClass]:
    """All classes of connected level-``level`` bipartitions.

    ``max_m`` is a guard on the work involved.  A level-``l`` catalog needs
    every ``m`` up to ``3l``; a smaller cap is an error rather than a
    truncation.
    """
    shapes = level_shapes(level)
    needed = max(m for _, m in shapes)
    if max_m is not None and max_m < needed:
        raise ValueError(f"level {level} needs m up to {needed}, but max_m={max_m}")
    out = []
    for v, m in shapes:
        out.extend(enumerate_connected(v, m))
    return out


def iter_connected(v: int, m: int) -> Iterator[Bipartition]:
    """Every connected bipartition with the given shape (exhaustive)."""
    for p_blocks in set_partitions(2 * m, min_block=3):
        if len(p_blocks) != v:
            continue
        for q in perfect_matchings(range(2 * m)):
            b = Bipartition(p_blocks, q)
            if is_connected(b):
                yield b


def brute_force_classes(v: int, m: int) -> dict[tuple, int]:
    """Signature counts over the full enumeration of ``(P, Q)`` pairs."""
    return dict(Counter(canonical_signature(b) for b in iter_connected(v, m)))


def relabeling_orbits(v: int, m: int) -> list[list[Bipartition]]:
    """Orbits of the connected bipartitions under relabeling.

    Computed by closing under adjacent transpositions, without reference to
    signatures; used to check that signatures separate exactly the orbits.
    """
    members = list(iter_connected(v, m))

    def key(b):
        return (
            tuple(sorted(tuple(sorted(p)) for p in b.p_blocks)),
            tuple(sorted(tuple(sorted(q)) for q in b.q_blocks)),
        )

    index = {key(b): i for i, b in enumerate(members)}
    parent = list(range(len(members)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    n = 2 * m
    swaps = []
    for i in range(n - 1):
        perm = list(range(n))
        perm[i], perm[i + 1] = perm[i + 1], perm[i]
        swaps.append(perm)
    for i, b in enumerate(members):
        for perm in swaps:
            j = index[key(b.relabel(perm))]
            parent[find(j)] = find(i)
    groups: dict[int, list[Bipartition]] = {}
    for i, b in enumerate(members):
        groups.setdefault(find(i), []).append(b)
    return list(groups.values())


def catalog_rows(levels) -> list[dict]:
    rows = []
    for level in levels:
        for cls in enumerate_connected_level(level):
            rep = cls.representative
            rows.append(
                {
                    "level": level,
                    "v": rep.v,
                    "m": rep.m,
                    "multiplicity": cls.multiplicity,
                    "representative_P": "|".join(" ".join(str(a + 1) for a in p) for p in rep.p_blocks),
                    "representative_Q": "|".join(" ".join(str(a + 1) for a in q) for q in rep.q_blocks),
                }
            )
    return rows


CATALOG_COLUMNS = ["level", "v", "m", "multiplicity", "representative_P", "representative_Q"]


def write_catalog_csv(path, levels) -> int:
    """Write the class catalog for ``levels`` to ``path``; returns the row count."""
    rows = catalog_rows(levels)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CATALOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)
