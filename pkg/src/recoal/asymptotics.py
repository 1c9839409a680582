"""Closed-form sampling-probability asymptotics in the strong-recombination
regime.

For a sample ``nu`` of exact types, the sampling probability expands as

    q(nu) = q_inf(nu) + q1(nu) / rho + O(rho^-2),

where ``q_inf`` is a product of single-site sampling probabilities of the
split sample (allele frequencies are all that survive infinite
recombination) and the first-order coefficient is

    q1(nu) = sum_x q_inf(split(nu) - split(x)) *
             sum_{A >= d(x), |A| >= 2} (-1)^{|A \\ d(x)|} / rbar(A) *
             C(count of particles >= A with marginal x on d(x), 2)

with ``rbar(A)`` the total fragmentation rate of ``A``.  The outer sum runs
over all partial genotypes including the empty one, but only marginals of
sampled types can make the binomial positive, so the evaluation is finite.

The same coefficient also arises from the coupling decomposition: the
leading probabilities of the first unmatched coalescence being of type 1
(with a given witness), of type 2 (at a given site and allele), and their
totals, are alternating superset sums over the subset lattice
(``prob_bad1_witness`` .. ``prob_bad2_total`` below).  Both routes agree
identically; the acceptance suite checks this.

All ``prob_*`` functions return the rho-free leading coefficient; the
event probability is the coefficient divided by ``rho``.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

from .exact import DEFAULT_STATE_CAP, build_state_graph, solve_q
from .partitions import RecombinationSpec
from .types import (
    Cemetery,
    CountingMeasure,
    EMPTY,
    FuzzyType,
    SiteSet,
    is_exact,
    marginal,
    observed_sites,
    single_site_fragments,
)

if TYPE_CHECKING:
    from .model import Model


def ascending_factorial(z: float, m: int) -> float:
    """Rising product ``z (z+1) ... (z+m-1)`` (empty product for ``m = 0``)."""
    out = 1.0
    for k in range(m):
        out *= z + k
    return out


def pim_single_site_q(measure: CountingMeasure, u: float, weights: Sequence[float]) -> float:
    """Closed-form single-site sampling probability under parent-independent
    mutation: a ratio of ascending factorials in the allele counts.

    Requires exact single-site types and ``u > 0``; callers with a general
    kernel must use the absorption solver instead.
    """
    if u <= 0:
        raise ValueError("parent-independent closed form needs a positive mutation rate")
    counts = [0] * len(weights)
    site = None
    for x, c in measure.items:
        d = observed_sites(x)
        if d.bit_count() != 1:
            raise ValueError("single-site measure required")
        if site is None:
            site = d
        elif d != site:
            raise ValueError("all particles must be observed at the same site")
        mask = x >> (8 * (d.bit_length() - 1))
        if mask & (mask - 1):
            raise ValueError("closed form requires exact (singleton) alleles")
        counts[mask.bit_length() - 1] += c
    num = 1.0
    for a, m in enumerate(counts):
        num *= ascending_factorial(float(u * weights[a]), m)
    return float(num / ascending_factorial(u, measure.mass))


# ---------------------------------------------------------------------------
# subset-lattice transforms
# ---------------------------------------------------------------------------


def superset_sum(g: Sequence[float]) -> list[float]:
    """``G(A) = sum over B >= A of g(B)`` on the subset lattice (length 2^n)."""
    G = list(g)
    n = (len(G) - 1).bit_length()
    if len(G) != 1 << n:
        raise ValueError("subset function length must be a power of two")
    for i in range(n):
        bit = 1 << i
        for A in range(len(G)):
            if not A & bit:
                G[A] += G[A | bit]
    return G


def moebius_invert(G: Sequence[float]) -> list[float]:
    """Inverse of :func:`superset_sum`:
    ``g(A) = sum over B >= A of (-1)^{|B \\ A|} G(B)``."""
    g = list(G)
    n = (len(g) - 1).bit_length()
    if len(g) != 1 << n:
        raise ValueError("subset function length must be a power of two")
    for i in range(n):
        bit = 1 << i
        for A in range(len(g)):
            if not A & bit:
                g[A] -= g[A | bit]
    return g


# ---------------------------------------------------------------------------
# single-site probabilities and the product limit
# ---------------------------------------------------------------------------


class SingleSiteQ:
    """Memoised map from single-site configurations to sampling probabilities.

    Parent-independent kernels use the ascending-factorial closed form on
    exact configurations; everything else falls back to the split-chain
    absorption solver, whose whole closure is harvested into the cache.
    """

    def __init__(self, model: "Model", state_cap: int = DEFAULT_STATE_CAP):
        self.model = model
        self.state_cap = state_cap
        self._pim = [k.pim_weights() for k in model.mutation.kernels]
        self._cache: dict[CountingMeasure, float] = {}

    def value(self, measure: CountingMeasure) -> float:
        if not measure:
            return 1.0
        cached = self._cache.get(measure)
        if cached is not None:
            return cached
        site = None
        exact = True
        for x, _ in measure.items:
            d = observed_sites(x)
            if d.bit_count() != 1:
                raise ValueError("single-site configurations only")
            if site is None:
                site = d.bit_length() - 1
            elif d.bit_length() - 1 != site:
                raise ValueError("all particles must share one site")
            exact = exact and is_exact(x)
        kernel = self.model.mutation.kernels[site]
        pim = self._pim[site]
        if exact and pim is not None and kernel.u > 0:
            v = pim_single_site_q(measure, kernel.u, pim)
        else:
            graph = build_state_graph(measure, self.model, "smarg", self.state_cap)
            sol = solve_q(graph, self.model)
            for s, val in zip(graph.states, sol.values):
                if not isinstance(s, Cemetery):
                    self._cache.setdefault(s, float(val))
            v = sol.value()
        self._cache[measure] = v
        return v


def _per_site_measures(split: CountingMeasure) -> dict[int, CountingMeasure]:
    buckets: dict[int, dict[int, int]] = {}
    for x, c in split.items:
        site = observed_sites(x).bit_length() - 1
        buckets.setdefault(site, {})[x] = c
    return {i: CountingMeasure(d) for i, d in buckets.items()}


def q_infty(nu: CountingMeasure | Cemetery, ssq: SingleSiteQ) -> float:
    """Infinite-recombination sampling probability: the product over sites of
    single-site probabilities of the split configuration.  Depends only on
    per-site allele frequencies."""
    if isinstance(nu, Cemetery):
        return 0.0
    out = 1.0
    for sub in _per_site_measures(nu.split_to_sites()).values():
        out *= ssq.value(sub)
    return out


# ---------------------------------------------------------------------------
# leading coefficients of the coupling-failure event probabilities
# ---------------------------------------------------------------------------


def _choose2(m: int) -> int:
    return m * (m - 1) // 2


def _superset_count_with_marginal(nu: CountingMeasure, A: SiteSet, B: SiteSet, x: FuzzyType) -> int:
    """Number of particles observed at a superset of ``A`` whose marginal on
    ``B`` equals ``x`` (with multiplicity)."""
    total = 0
    for y, c in nu.items:
        if observed_sites(y) & A == A and marginal(y, B) == x:
            total += c
    return total


def _submasks(rest: SiteSet):
    """All submasks of ``rest`` including 0, descending."""
    sub = rest
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & rest


def prob_bad1_witness(
    nu: CountingMeasure, x: FuzzyType, spec: RecombinationSpec
) -> float:
    """Leading ``1/rho`` coefficient of: the first unmatched coalescence is of
    type 1, between compatible particles whose shared observation set is
    ``d(x)`` with common marginal ``x`` (``|d(x)| >= 2``)."""
    d = observed_sites(x)
    if d.bit_count() < 2:
        raise ValueError("type-1 witnesses are observed at two or more sites")
    full = (1 << spec.n) - 1
    total = 0.0
    for sub in _submasks(full ^ d):
        A = d | sub
        pairs = _choose2(_superset_count_with_marginal(nu, A, d, x))
        if pairs:
            sign = -1.0 if sub.bit_count() & 1 else 1.0
            total += sign * pairs / spec.total_split_rate(A)
    return total


def prob_bad2_witness(
    nu: CountingMeasure, site: int, allele: int, spec: RecombinationSpec
) -> float:
    """Leading coefficient of: the first unmatched coalescence is of type 2 at
    ``site`` between two split particles carrying allele index ``allele``."""
    x_i = (1 << allele) << (8 * site)
    d = 1 << site
    full = (1 << spec.n) - 1
    total = 0.0
    for sub in _submasks(full ^ d):
        A = d | sub
        if A.bit_count() < 2:
            continue
        pairs = _choose2(_superset_count_with_marginal(nu, A, d, x_i))
        if pairs:
            sign = -1.0 if (A.bit_count() - 1) & 1 else 1.0
            total += sign * pairs / spec.total_split_rate(A)
    return -total


def _pair_lattice(nu: CountingMeasure, spec: RecombinationSpec) -> list[float]:
    """``H(B) = C(mass observed >= B, 2) / rbar(B)`` for ``|B| >= 2`` (else 0)."""
    full = (1 << spec.n) - 1
    H = [0.0] * (full + 1)
    for B in range(full + 1):
        if B.bit_count() < 2:
            continue
        mass = sum(c for y, c in nu.items if observed_sites(y) & B == B)
        pairs = _choose2(mass)
        if pairs:
            H[B] = pairs / spec.total_split_rate(B)
    return H


def prob_bad1_total(nu: CountingMeasure, spec: RecombinationSpec) -> float:
    """Leading coefficient of: the first unmatched coalescence is of type 1
    (any witness, compatible or not)."""
    g = moebius_invert(_pair_lattice(nu, spec))
    return sum(v for A, v in enumerate(g) if A.bit_count() >= 2)


def prob_bad2_total(nu: CountingMeasure, spec: RecombinationSpec) -> float:
    """Leading coefficient of: the first unmatched coalescence is of type 2;
    each pair sharing ``k`` sites contributes ``k`` distinct type-2 events."""
    g = moebius_invert(_pair_lattice(nu, spec))
    return sum(A.bit_count() * v for A, v in enumerate(g) if A.bit_count() >= 2)


# ---------------------------------------------------------------------------
# the first-order coefficient, both routes
# ---------------------------------------------------------------------------


def _require_exact(nu: CountingMeasure) -> None:
    for y, _ in nu.items:
        if not is_exact(y):
            raise ValueError("expansion coefficients are defined for exact-typed samples")


def _marginal_candidates(nu: CountingMeasure) -> set[FuzzyType]:
    """All marginals of sampled types (the empty type included): the only
    outer-sum terms whose pair counts can be positive."""
    out: set[FuzzyType] = set()
    for y, _ in nu.items:
        for sub in _submasks(observed_sites(y)):
            out.add(marginal(y, sub))
    out.add(EMPTY)
    return out


def _split_minus_fragments(split: CountingMeasure, x: FuzzyType) -> CountingMeasure:
    d = dict(split.items)
    for frag in single_site_fragments(x):
        d[frag] -= 1
    return CountingMeasure(d)


def q1(nu: CountingMeasure, model: "Model", ssq: SingleSiteQ | None = None) -> float:
    """First-order coefficient of the ``1/rho`` expansion of the sampling
    probability, evaluated directly from the alternating-sum formula."""
    _require_exact(nu)
    spec = model.recombination
    if ssq is None:
        ssq = SingleSiteQ(model)
    full = (1 << spec.n) - 1
    split = nu.split_to_sites()
    total = 0.0
    for x in _marginal_candidates(nu):
        d = observed_sites(x)
        inner = 0.0
        for sub in _submasks(full ^ d):
            A = d | sub
            if A.bit_count() < 2:
                continue
            pairs = _choose2(_superset_count_with_marginal(nu, A, d, x))
            if pairs:
                sign = -1.0 if sub.bit_count() & 1 else 1.0
                inner += sign * pairs / spec.total_split_rate(A)
        if inner:
            total += inner * q_infty(_split_minus_fragments(split, x), ssq)
    return total


def q1_via_decomposition(
    nu: CountingMeasure, model: "Model", ssq: SingleSiteQ | None = None
) -> float:
    """The same first-order coefficient assembled from the coupling-failure
    event probabilities; equal to :func:`q1` up to rounding (an identity)."""
    _require_exact(nu)
    spec = model.recombination
    if ssq is None:
        ssq = SingleSiteQ(model)
    split = nu.split_to_sites()
    total = 0.0
    for x in _marginal_candidates(nu):
        if observed_sites(x).bit_count() >= 2:
            coeff = prob_bad1_witness(nu, x, spec)
            if coeff:
                total += coeff * q_infty(_split_minus_fragments(split, x), ssq)
    for x_i, _ in split.items:
        site = observed_sites(x_i).bit_length() - 1
        allele = ((x_i >> (8 * site)) & 0xFF).bit_length() - 1
        coeff = prob_bad2_witness(nu, site, allele, spec)
        if coeff:
            total -= coeff * q_infty(split.remove(x_i), ssq)
    total += (prob_bad2_total(nu, spec) - prob_bad1_total(nu, spec)) * q_infty(split, ssq)
    return total
