"""Set partitions of the site set and recombination-rate specifications.

A recombination event is driven by a partition of the sites: the affected
lineage fragments into one parental piece per block that meets its observed
sites.  A :class:`RecombinationSpec` is a weighted list of such partitions
together with the global strength ``rho``; the per-lineage rate of a
partition is ``rho * r``.

An event is *silent* for a lineage observed at ``D`` when the partition
restricted to ``D`` is trivial (some block contains all of ``D``): the
lineage is handed over whole.  Silent events are self-loops and are never
enumerated or simulated; this keeps simulation cost independent of ``rho``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations

from .types import MAX_SITES, SiteSet, byte_mask, sites

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition:
    """Partition of the full site set into disjoint nonempty blocks.

    Blocks are bitmasks, stored sorted by their minimum site, so equal
    partitions are representation-identical.
    """

    blocks: tuple[SiteSet, ...]

    def __init__(self, blocks):
        blocks = tuple(sorted((int(b) for b in blocks), key=lambda b: b & -b))
        object.__setattr__(self, "blocks", blocks)
        union = 0
        for b in blocks:
            if b == 0:
                raise ValueError("partition blocks must be nonempty")
            if union & b:
                raise ValueError("partition blocks must be disjoint")
            union |= b

    @property
    def ground_set(self) -> SiteSet:
        u = 0
        for b in self.blocks:
            u |= b
        return u

    @classmethod
    def from_lists(cls, blocks: list[list[int]]) -> "Partition":
        masks = []
        for block in blocks:
            m = 0
            for i in block:
                m |= 1 << i
            masks.append(m)
        return cls(masks)

    def induce(self, B: SiteSet) -> tuple[SiteSet, ...]:
        """Partition induced on nonempty ``B``: the nonempty intersections with ``B``."""
        if B == 0:
            raise ValueError("cannot induce a partition on the empty site set")
        return tuple(b & B for b in self.blocks if b & B)

    def splits(self, A: SiteSet) -> bool:
        """True iff the induced partition on ``A`` is nontrivial (no block contains ``A``)."""
        return not any(b & A == A for b in self.blocks)

    def __iter__(self):
        return iter(self.blocks)


def full_mask(n: int) -> SiteSet:
    return (1 << n) - 1


class InseparableSitesError(ValueError):
    """Some site pair cannot be split by any positive-rate partition."""

    def __init__(self, pairs: list[tuple[int, int]]):
        self.pairs = pairs
        detail = ", ".join(f"({i},{j})" for i, j in pairs)
        super().__init__(
            f"inseparable site pairs {detail}: no positive-rate partition splits them; "
            "lump such sites into one before building the model"
        )


@dataclass(frozen=True)
class RecombinationSpec:
    """Weighted partitions of the site set plus the global strength ``rho``.

    ``terms`` are ``(partition, base rate)`` pairs with nonnegative rates;
    the realised per-lineage rate of a partition is ``rho * r``.  Duplicate
    partitions are merged (rates added) with a warning.
    """

    n: int
    terms: tuple[tuple[Partition, float], ...]
    rho: float = 1.0
    # per-observation-set sampling tables, built lazily; not part of identity
    _split_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __init__(self, n: int, terms, rho: float = 1.0):
        if not 1 <= n <= MAX_SITES:
            raise ValueError(f"site count {n} outside supported range 1..{MAX_SITES}")
        if rho <= 0:
            raise ValueError(f"rho must be positive, got {rho}")
        merged: dict[Partition, float] = {}
        for part, r in terms:
            if r < 0:
                raise ValueError(f"negative recombination rate {r}")
            if not math.isfinite(r):
                raise ValueError(f"non-finite recombination rate {r}")
            if part.ground_set != full_mask(n):
                raise ValueError(f"partition {part} does not cover all {n} sites")
            if part in merged:
                log.warning("duplicate partition %s: merging rates", part)
                merged[part] += r
            else:
                merged[part] = r
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "terms", tuple(merged.items()))
        object.__setattr__(self, "rho", float(rho))
        object.__setattr__(self, "_split_cache", {})
        bad = self.inseparable_pairs()
        if bad:
            raise InseparableSitesError(bad)

    def inseparable_pairs(self) -> list[tuple[int, int]]:
        """Site pairs not split by any positive-rate partition (should be none)."""
        bad = []
        for i, j in combinations(range(self.n), 2):
            pair = (1 << i) | (1 << j)
            if not any(r > 0 and part.splits(pair) for part, r in self.terms):
                bad.append((i, j))
        return bad

    def with_rho(self, rho: float) -> "RecombinationSpec":
        return RecombinationSpec(self.n, self.terms, rho)

    def total_split_rate(self, A: SiteSet) -> float:
        """Total fragmentation rate of ``A`` per unit ``rho``: the summed base
        rates of all partitions whose restriction to ``A`` is nontrivial."""
        total = sum(r for part, r in self.terms if part.splits(A))
        if total == 0.0 and A.bit_count() >= 2:
            # impossible once the pair-separation check passed: any partition
            # splitting a pair inside A splits A
            raise InseparableSitesError([tuple(sites(A))[:2]])
        return total

    def split_table(self, D: SiteSet) -> tuple[float, list[float], list[tuple[int, ...]]]:
        """Sampling table for non-silent events on observation set ``D``.

        Returns ``(coeff, cumulative, fragment_byte_masks)`` where ``coeff``
        is the total base rate of non-silent partitions (so the realised
        event rate is ``rho * coeff``), ``cumulative`` the running rate sums
        for categorical sampling, and ``fragment_byte_masks[k]`` the byte
        masks of the ``k``-th partition's blocks meeting ``D``.
        """
        cached = self._split_cache.get(D)
        if cached is not None:
            return cached
        cum: list[float] = []
        frags: list[tuple[int, ...]] = []
        total = 0.0
        for part, r in self.terms:
            if r > 0 and part.splits(D):
                total += r
                cum.append(total)
                frags.append(tuple(byte_mask(b & D) for b in part.induce(D)))
        entry = (total, cum, frags)
        self._split_cache[D] = entry
        return entry

    def effective_split_rate(self, D: SiteSet) -> float:
        """Realised total rate ``rho * coeff`` of non-silent events on ``D``.

        Zero for singleton ``D`` and equal to ``rho`` times the total
        fragmentation rate for ``|D| >= 2``.
        """
        if D == 0:
            raise ValueError("observation set must be nonempty")
        return self.rho * self.split_table(D)[0]


def single_crossover(n: int, rates: list[float], rho: float = 1.0) -> RecombinationSpec:
    """Classical single-crossover spec: breakpoint ``k`` separates sites
    ``0..k`` from ``k+1..n-1`` at base rate ``rates[k]``.

    All ``n - 1`` rates must be positive for the pair-separation requirement
    to hold (adjacent sites are split only by their own breakpoint).
    """
    if n < 2:
        raise ValueError("single-crossover spec needs at least two sites")
    if len(rates) != n - 1:
        raise ValueError(f"expected {n - 1} crossover rates, got {len(rates)}")
    terms = []
    for k, r in enumerate(rates):
        left = (1 << (k + 1)) - 1
        right = full_mask(n) ^ left
        terms.append((Partition((left, right)), r))
    return RecombinationSpec(n, terms, rho)


def singletons_partition(n: int) -> Partition:
    """The all-singletons partition (splits every multi-site set)."""
    return Partition(tuple(1 << i for i in range(n)))


def all_partitions(n: int) -> list[Partition]:
    """Every partition of ``n`` sites (for tests and small exhaustive checks)."""
    out: list[list[int]] = [[]]
    for i in range(n):
        nxt = []
        for blocks in out:
            for k in range(len(blocks)):
                nxt.append(blocks[:k] + [blocks[k] | (1 << i)] + blocks[k + 1 :])
            nxt.append(blocks + [1 << i])
        out = nxt
    return [Partition(b) for b in out]
