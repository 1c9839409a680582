"""Core algebra of sites, fuzzy types and counting measures.

Everything downstream (chain dynamics, exact solves, asymptotics) is built
on three compact representations:

* A **site set** is an ``int`` bitmask over sites ``0 .. n-1`` (``n <= 16``).

* A **fuzzy type** (a partial genotype) is an ``int`` in which byte ``i``
  (bits ``8*i .. 8*i+7``) holds the bitmask of candidate alleles at site
  ``i``.  A zero byte means the site is unobserved; a nonzero byte is a
  nonempty subset of that site's alleles (``|X_i| <= 8``).  The empty type
  ``EMPTY == 0`` is the genotype observed nowhere.  An *exact* type is one
  whose observed bytes are all singletons.

* A :class:`CountingMeasure` is a finite multiset of fuzzy types, stored in
  canonical order so that equal multisets are representation-identical and
  hashable.

Packing types into single machine integers keeps every set operation
(marginalisation, compatibility, join, fragmentation) a handful of bitwise
instructions, which matters in the Monte Carlo hot loop.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Iterable, Iterator

MAX_SITES = 16
MAX_ALLELES = 8

#: the empty type (observed at no site)
EMPTY = 0

SiteSet = int
FuzzyType = int


class Cemetery:
    """Absorbing failure state of the ancestral chains (weight 0)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DELTA"

    def __reduce__(self):  # preserve singleton identity across pickling
        return (Cemetery, ())


DELTA = Cemetery()


def sites(mask: SiteSet) -> Iterator[int]:
    """Iterate the sites of a bitmask in ascending order."""
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


@lru_cache(maxsize=None)
def byte_mask(site_set: SiteSet) -> int:
    """All-ones byte mask (0xFF per site) covering the given site set."""
    bm = 0
    for i in sites(site_set):
        bm |= 0xFF << (8 * i)
    return bm


@lru_cache(maxsize=None)
def observed_sites(x: FuzzyType) -> SiteSet:
    """Site set at which the type is observed (nonzero bytes)."""
    mask = 0
    i = 0
    while x:
        if x & 0xFF:
            mask |= 1 << i
        x >>= 8
        i += 1
    return mask


def allele_set(x: FuzzyType, site: int) -> int:
    """Candidate-allele bitmask of ``x`` at ``site`` (0 if unobserved)."""
    return (x >> (8 * site)) & 0xFF


def make_type(entries: Iterable[tuple[int, int]] | dict[int, int]) -> FuzzyType:
    """Pack ``site -> allele bitmask`` entries into a fuzzy type.

    Raises ``ValueError`` on an empty allele set or out-of-range site.
    """
    if isinstance(entries, dict):
        entries = entries.items()
    x = 0
    for site, alleles in entries:
        if not 0 <= site < MAX_SITES:
            raise ValueError(f"site {site} outside supported range 0..{MAX_SITES - 1}")
        if not 0 < alleles <= 0xFF:
            raise ValueError(f"allele set {alleles:#x} at site {site} must be a nonempty byte")
        if allele_set(x, site):
            raise ValueError(f"duplicate entry for site {site}")
        x |= alleles << (8 * site)
    return x


def exact_type(assignment: Iterable[tuple[int, int]] | dict[int, int]) -> FuzzyType:
    """Pack ``site -> allele index`` into an exact (singleton-allele) type."""
    if isinstance(assignment, dict):
        assignment = assignment.items()
    return make_type((site, 1 << allele) for site, allele in assignment)


def type_entries(x: FuzzyType) -> list[tuple[int, int]]:
    """Unpack a type into ``(site, allele bitmask)`` pairs, ascending by site."""
    return [(i, allele_set(x, i)) for i in sites(observed_sites(x))]


def is_exact(x: FuzzyType) -> bool:
    """True iff every observed site carries exactly one candidate allele."""
    while x:
        b = x & 0xFF
        if b & (b - 1):
            return False
        x >>= 8
    return True


def marginal(x: FuzzyType, B: SiteSet) -> FuzzyType:
    """Restriction of ``x`` to the sites in ``B`` (entries unchanged)."""
    return x & byte_mask(B)


def compatible(x: FuzzyType, y: FuzzyType) -> bool:
    """True iff the candidate sets of ``x`` and ``y`` intersect at every shared site."""
    shared = observed_sites(x) & observed_sites(y)
    for i in sites(shared):
        if not (x >> (8 * i)) & (y >> (8 * i)) & 0xFF:
            return False
    return True


def join(x: FuzzyType, y: FuzzyType) -> FuzzyType:
    """Join of two compatible types.

    Takes ``x``'s entries on ``d(x) \\ d(y)``, ``y``'s on ``d(y) \\ d(x)``
    and the candidate-set intersection on shared sites.  Raises
    ``ValueError`` on incompatible inputs (empty intersection somewhere).
    """
    shared = observed_sites(x) & observed_sites(y)
    if not shared:
        return x | y
    sb = byte_mask(shared)
    joined = ((x | y) & ~sb) | (x & y & sb)
    if observed_sites(joined) != observed_sites(x) | observed_sites(y):
        raise ValueError("join of incompatible types")
    return joined


@lru_cache(maxsize=None)
def single_site_fragments(x: FuzzyType) -> tuple[FuzzyType, ...]:
    """Single-site fragments of ``x`` (the pieces of the fragmentation map)."""
    return tuple(x & (0xFF << (8 * i)) for i in sites(observed_sites(x)))


class CountingMeasure:
    """Finite multiset of fuzzy types, canonically ordered and immutable.

    The state of every ancestral process and every sample configuration.
    Two measures built from the same multiset in any insertion order
    compare (and hash) equal.
    """

    __slots__ = ("items", "_hash")

    def __init__(self, counts: dict[FuzzyType, int] | Iterable[tuple[FuzzyType, int]] = ()):
        if isinstance(counts, dict):
            pairs = counts.items()
        else:
            merged: dict[int, int] = {}
            for x, c in counts:
                merged[x] = merged.get(x, 0) + c
            pairs = merged.items()
        items = []
        for x, c in sorted(pairs):
            if c < 0:
                raise ValueError(f"negative count {c} for type {x:#x}")
            if c > 0:
                items.append((x, c))
        self.items: tuple[tuple[FuzzyType, int], ...] = tuple(items)
        self._hash = hash(self.items)

    @classmethod
    def from_particles(cls, particles: Iterable[FuzzyType]) -> "CountingMeasure":
        return cls((x, 1) for x in particles)

    def to_dict(self) -> dict[FuzzyType, int]:
        return dict(self.items)

    @property
    def mass(self) -> int:
        """Total mass (number of particles, with multiplicity)."""
        return sum(c for _, c in self.items)

    def count(self, x: FuzzyType) -> int:
        for y, c in self.items:
            if y == x:
                return c
        return 0

    @property
    def support(self) -> tuple[FuzzyType, ...]:
        return tuple(x for x, _ in self.items)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __bool__(self):
        return bool(self.items)

    def __eq__(self, other):
        return isinstance(other, CountingMeasure) and self.items == other.items

    def __hash__(self):
        return self._hash

    def __add__(self, other: "CountingMeasure") -> "CountingMeasure":
        d = dict(self.items)
        for x, c in other.items:
            d[x] = d.get(x, 0) + c
        return CountingMeasure(d)

    def add(self, x: FuzzyType, k: int = 1) -> "CountingMeasure":
        d = dict(self.items)
        d[x] = d.get(x, 0) + k
        return CountingMeasure(d)

    def remove(self, x: FuzzyType, k: int = 1) -> "CountingMeasure":
        d = dict(self.items)
        if d.get(x, 0) < k:
            raise ValueError(f"cannot remove {k} particles of type {x:#x}")
        d[x] -= k
        return CountingMeasure(d)

    def restrict_superset(self, A: SiteSet) -> "CountingMeasure":
        """Subsample of particles observed at a superset of ``A``."""
        return CountingMeasure(
            (x, c) for x, c in self.items if observed_sites(x) & A == A
        )

    def marginal_measure(self, B: SiteSet) -> "CountingMeasure":
        """Pushforward under ``x -> x|_B``; colliding images add.

        Marginalising to ``B = 0`` maps every particle to ``EMPTY``, so the
        result carries the total mass at the empty type.
        """
        d: dict[int, int] = {}
        for x, c in self.items:
            y = marginal(x, B)
            d[y] = d.get(y, 0) + c
        return CountingMeasure(d)

    def split_to_sites(self) -> "CountingMeasure":
        """Fragment every particle into its single-site pieces.

        The linear map bridging the finite-rate chain and its
        infinite-recombination limit; idempotent, drops ``EMPTY`` particles.
        """
        d: dict[int, int] = {}
        for x, c in self.items:
            for frag in single_site_fragments(x):
                d[frag] = d.get(frag, 0) + c
        return CountingMeasure(d)

    def is_simple(self) -> bool:
        """True iff observation sets are pairwise disjoint or equal, each of mass <= 1.

        Simple states are the most-recent-common-ancestor configurations at
        which the ancestral chains stop.
        """
        masks: dict[SiteSet, int] = {}
        for x, c in self.items:
            m = observed_sites(x)
            masks[m] = masks.get(m, 0) + c
        seen: list[SiteSet] = []
        for m, total in masks.items():
            if total > 1:
                return False
            for other in seen:
                if other != m and other & m:
                    return False
            seen.append(m)
        return True

    def __repr__(self):
        if not self.items:
            return "CountingMeasure()"
        parts = []
        for x, c in self.items:
            entry = ",".join(f"{i}:{a:#04x}" for i, a in type_entries(x)) or "eps"
            parts.append(f"{c}*[{entry}]")
        return "CountingMeasure(" + " + ".join(parts) + ")"


#: a process state is either a measure or the cemetery
ProcessState = CountingMeasure | Cemetery
