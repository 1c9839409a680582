"""Ancestral chain dynamics: transition enumerators and the Gillespie simulator.

Three continuous-time Markov chains on counting measures share this module:

* the finite-rate chain (coalescence, fragmentation, backward mutation),
* its infinite-recombination limit on single-site particles (same-site
  coalescence and mutation only), and
* their coupling, which runs both jointly while the split of the left state
  equals the right state and lets them evolve as a product chain after the
  first unmatched ("bad") coalescence.

While coupled, an ordered pair of particles whose observation sets share at
most one site performs a *good* coalescence, mirrored on both sides.  A pair
sharing two or more sites performs, at the same pairwise rate, a *bad type-1*
coalescence (left side only; impossible on the right, which would need two
simultaneous merges) and, for each shared site, a *bad type-2* coalescence
(right side only; no matching transition on the left).  Either bad event
breaks the coupling.

Transition enumerators list distinct target states with summed rates.
Self-loop events (fragmentations whose induced partition is trivial on the
observed sites, and backward mutations that leave the candidate sets
unchanged) are omitted everywhere: they do not change the state, and at
large ``rho`` eliding silent fragmentation is what keeps the cost of a
simulated trajectory independent of ``rho``.

The simulator regenerates event rates from the current state at every step
(states are tiny) and draws all randomness from a caller-supplied numpy
``Generator``, so identical seeds reproduce identical event streams.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from math import log
from typing import TYPE_CHECKING

import numpy as np

from .types import (
    DELTA,
    Cemetery,
    CountingMeasure,
    FuzzyType,
    ProcessState,
    byte_mask,
    compatible,
    join,
    observed_sites,
    single_site_fragments,
)

if TYPE_CHECKING:
    from .model import Model


class SimulationCapError(RuntimeError):
    """A trajectory exceeded the step cap (termination is a.s.; treat as a bug)."""


class EventKind(Enum):
    COALESCENCE = "coalescence"  # plain merge in an uncoupled chain
    GOOD_COALESCENCE = "good_coalescence"
    BAD_COALESCENCE_1 = "bad_coalescence_1"
    BAD_COALESCENCE_2 = "bad_coalescence_2"
    RECOMBINATION = "recombination"
    MUTATION = "mutation"


@dataclass
class EventRecord:
    kind: EventKind
    time: float
    chain: str  # "marg", "smarg" or "pair"
    participants: tuple[FuzzyType, ...]
    site: int | None = None
    first_nonrecombination: bool = False


@dataclass(frozen=True)
class CoupledState:
    """Pair of process states; coupled while the right equals the split left."""

    left: ProcessState
    right: ProcessState

    @classmethod
    def start(cls, nu: CountingMeasure) -> "CoupledState":
        return cls(nu, nu.split_to_sites())

    @property
    def coupled(self) -> bool:
        return (
            not isinstance(self.left, Cemetery)
            and not isinstance(self.right, Cemetery)
            and self.left.split_to_sites() == self.right
        )


@dataclass
class RunOutcome:
    """Terminal data of one simulated trajectory (single chain or coupled pair)."""

    kind: str
    left_final: ProcessState | None = None
    right_final: ProcessState | None = None
    q_left: float | None = None
    q_right: float | None = None
    coupling_ok: bool = True  # no bad coalescence before both chains stopped
    bad_first: bool = False  # first non-fragmentation event was a bad coalescence
    bad1_first: bool = False
    bad2_first: bool = False
    bad1_witness: tuple[int, FuzzyType] | None = None  # (overlap set, common marginal)
    bad2_witness: tuple[int, int] | None = None  # (site, common allele set)
    steps: int = 0
    event_counts: dict[EventKind, int] = field(default_factory=dict)
    events: list[EventRecord] | None = None


def _stopped(state: ProcessState) -> bool:
    return isinstance(state, Cemetery) or state.is_simple()


# ---------------------------------------------------------------------------
# transition enumerators (exact solver and verification surface)
# ---------------------------------------------------------------------------


def _add_rate(targets: dict, key, rate: float) -> None:
    targets[key] = targets.get(key, 0.0) + rate


def _coalescence_weight(x, cx, y, cy) -> int:
    return cx * (cx - 1) if x == y else cx * cy


def _merge_measure(nu: CountingMeasure, x, y) -> CountingMeasure:
    d = dict(nu.items)
    d[x] -= 1
    d[y] = d.get(y, 0) - 1
    j = join(x, y)
    d[j] = d.get(j, 0) + 1
    return CountingMeasure(d)


def _mutation_targets(nu: CountingMeasure, x, model: "Model"):
    """Yield ``(target, rate-per-particle)`` for non-silent mutations of ``x``."""
    tables = model.mutation.event_table
    dx = observed_sites(x)
    base = dict(nu.items)
    base[x] -= 1
    i = 0
    m = dx
    while m:
        if m & 1:
            mask = (x >> (8 * i)) & 0xFF
            _, cum, masks = tables[i][mask]
            prev = 0.0
            for rate_cum, new_mask in zip(cum, masks):
                rate = rate_cum - prev
                prev = rate_cum
                if new_mask == 0:
                    yield DELTA, rate
                else:
                    m_type = x ^ ((mask ^ new_mask) << (8 * i))
                    d = dict(base)
                    d[m_type] = d.get(m_type, 0) + 1
                    yield CountingMeasure(d), rate
        m >>= 1
        i += 1


def marg_transitions(nu: CountingMeasure, model: "Model") -> list[tuple[ProcessState, float]]:
    """Distinct targets and summed rates of the finite-rate chain from ``nu``.

    Ordered pairs coalesce at rate ``nu(x) (nu - delta_x)(y)`` (to the
    cemetery when incompatible), every particle fragments under each
    non-silent partition at ``rho`` times its base rate, and every particle
    mutates backward per non-silent kernel event.
    """
    if isinstance(nu, Cemetery):
        raise ValueError("the cemetery has no outgoing transitions")
    targets: dict[ProcessState, float] = {}
    items = nu.items
    for x, cx in items:
        for y, cy in items:
            w = _coalescence_weight(x, cx, y, cy)
            if w == 0:
                continue
            if compatible(x, y):
                _add_rate(targets, _merge_measure(nu, x, y), float(w))
            else:
                _add_rate(targets, DELTA, float(w))
    rho = model.recombination.rho
    for x, cx in items:
        _, cum, frags = model.recombination.split_table(observed_sites(x))
        prev = 0.0
        for rate_cum, block_masks in zip(cum, frags):
            r = rate_cum - prev
            prev = rate_cum
            d = dict(nu.items)
            d[x] -= 1
            for bm in block_masks:
                frag = x & bm
                d[frag] = d.get(frag, 0) + 1
            _add_rate(targets, CountingMeasure(d), rho * r * cx)
        for target, rate in _mutation_targets(nu, x, model):
            _add_rate(targets, target, rate * cx)
    return list(targets.items())


def smarg_transitions(nu: CountingMeasure, model: "Model") -> list[tuple[ProcessState, float]]:
    """Distinct targets and summed rates of the split (single-site) chain.

    Only particles observed at the same site may coalesce; there is no
    fragmentation.  Raises on multi-site particles.
    """
    if isinstance(nu, Cemetery):
        raise ValueError("the cemetery has no outgoing transitions")
    for x, _ in nu.items:
        if observed_sites(x).bit_count() != 1:
            raise ValueError(f"split chain state must be single-site, got type {x:#x}")
    targets: dict[ProcessState, float] = {}
    items = nu.items
    for x, cx in items:
        dx = observed_sites(x)
        for y, cy in items:
            if observed_sites(y) != dx:
                continue
            w = _coalescence_weight(x, cx, y, cy)
            if w == 0:
                continue
            if x & y:
                _add_rate(targets, _merge_measure(nu, x, y), float(w))
            else:
                _add_rate(targets, DELTA, float(w))
        for target, rate in _mutation_targets(nu, x, model):
            _add_rate(targets, target, rate * cx)
    return list(targets.items())


def cmarg_transitions(state: CoupledState, model: "Model") -> list[tuple[CoupledState, float]]:
    """Distinct targets and summed rates of the coupled pair chain.

    While coupled, good coalescences update both components jointly, bad
    type-1 events update only the left, bad type-2 events (one per shared
    site) only the right, fragmentation only the left, and mutation both.
    Once decoupled, the pair evolves as the product of the two chains, each
    component until its own absorption.
    """
    left, right = state.left, state.right
    targets: dict[CoupledState, float] = {}
    if not state.coupled:
        if not _stopped(left):
            for t, r in marg_transitions(left, model):
                _add_rate(targets, CoupledState(t, right), r)
        if not _stopped(right):
            for t, r in smarg_transitions(right, model):
                _add_rate(targets, CoupledState(left, t), r)
        return list(targets.items())
    if _stopped(left):
        return []

    nu = left
    sigma = right
    items = nu.items
    for x, cx in items:
        dx = observed_sites(x)
        for y, cy in items:
            w = _coalescence_weight(x, cx, y, cy)
            if w == 0:
                continue
            ov = dx & observed_sites(y)
            if ov.bit_count() <= 1:
                if compatible(x, y):
                    new_right = sigma
                    if ov:
                        i = ov.bit_length() - 1
                        px = x & (0xFF << (8 * i))
                        py = y & (0xFF << (8 * i))
                        new_right = sigma.remove(px).remove(py).add(px & py)
                    _add_rate(targets, CoupledState(_merge_measure(nu, x, y), new_right), float(w))
                else:
                    _add_rate(targets, CoupledState(DELTA, DELTA), float(w))
            else:
                if compatible(x, y):
                    new_left = _merge_measure(nu, x, y)
                else:
                    new_left = DELTA
                _add_rate(targets, CoupledState(new_left, sigma), float(w))
                m = ov
                i = 0
                while m:
                    if m & 1:
                        px = x & (0xFF << (8 * i))
                        py = y & (0xFF << (8 * i))
                        if px & py:
                            new_right = sigma.remove(px).remove(py).add(px & py)
                        else:
                            new_right = DELTA
                        _add_rate(targets, CoupledState(nu, new_right), float(w))
                    m >>= 1
                    i += 1
    rho = model.recombination.rho
    for x, cx in items:
        _, cum, frags = model.recombination.split_table(observed_sites(x))
        prev = 0.0
        for rate_cum, block_masks in zip(cum, frags):
            r = rate_cum - prev
            prev = rate_cum
            d = dict(nu.items)
            d[x] -= 1
            for bm in block_masks:
                frag = x & bm
                d[frag] = d.get(frag, 0) + 1
            _add_rate(targets, CoupledState(CountingMeasure(d), sigma), rho * r * cx)
        # mutation changes the same site on both components
        dx = observed_sites(x)
        i = 0
        m = dx
        while m:
            if m & 1:
                mask = (x >> (8 * i)) & 0xFF
                _, cum_m, masks = model.mutation.event_table[i][mask]
                prev_m = 0.0
                for rate_cum, new_mask in zip(cum_m, masks):
                    rate = (rate_cum - prev_m) * cx
                    prev_m = rate_cum
                    if new_mask == 0:
                        _add_rate(targets, CoupledState(DELTA, DELTA), rate)
                    else:
                        m_type = x ^ ((mask ^ new_mask) << (8 * i))
                        new_left = nu.remove(x).add(m_type)
                        px = x & (0xFF << (8 * i))
                        new_right = sigma.remove(px).add(m_type & (0xFF << (8 * i)))
                        _add_rate(targets, CoupledState(new_left, new_right), rate)
            m >>= 1
            i += 1
    return list(targets.items())


# ---------------------------------------------------------------------------
# Gillespie simulation
# ---------------------------------------------------------------------------

DEFAULT_STEP_CAP = 10_000_000
_RNG_BLOCK = 256


class _Uniforms:
    """Cursor over blocks of uniforms from a numpy Generator (cheap scalar draws)."""

    __slots__ = ("rng", "buf", "pos")

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buf = rng.random(_RNG_BLOCK).tolist()
        self.pos = 0

    def next(self) -> float:
        pos = self.pos
        buf = self.buf
        if pos == len(buf):
            self.buf = buf = self.rng.random(_RNG_BLOCK).tolist()
            pos = 0
        self.pos = pos + 1
        return buf[pos]


def _inc(d: dict, k, v: int = 1) -> None:
    d[k] = d.get(k, 0) + v


def _dec(d: dict, k) -> None:
    c = d[k] - 1
    if c:
        d[k] = c
    else:
        del d[k]


def _is_simple_dict(d: dict) -> bool:
    masks: dict[int, int] = {}
    for x, c in d.items():
        m = observed_sites(x)
        masks[m] = masks.get(m, 0) + c
    seen: list[int] = []
    for m, total in masks.items():
        if total > 1:
            return False
        for other in seen:
            if other != m and other & m:
                return False
        seen.append(m)
    return True


def _split_dict(d: dict) -> dict:
    out: dict[int, int] = {}
    for x, c in d.items():
        for frag in single_site_fragments(x):
            out[frag] = out.get(frag, 0) + c
    return out


class Simulator:
    """Runs trajectories of the three chains for one model.

    Each call owns its state and consumes only the supplied generator, so
    runs are embarrassingly parallel and reproducible.  ``record_events``
    adds an :class:`EventRecord` per transition without extra randomness,
    so it never perturbs the trajectory.
    """

    def __init__(self, model: "Model", max_steps: int = DEFAULT_STEP_CAP):
        self.model = model
        self.max_steps = max_steps
        self._mut_rate_cache: dict[int, float] = {}

    def _mut_rate(self, x: FuzzyType) -> float:
        r = self._mut_rate_cache.get(x)
        if r is None:
            r = self.model.mutation.mutation_rate(x)
            self._mut_rate_cache[x] = r
        return r

    def _cap_error(self, kind: str) -> SimulationCapError:
        return SimulationCapError(
            f"{kind} trajectory exceeded {self.max_steps} steps; "
            "the chain terminates almost surely, so this points at a model or code defect"
        )

    # -- finite-rate chain -------------------------------------------------

    def run_marg(
        self, initial: ProcessState, rng: np.random.Generator, record_events: bool = False
    ) -> RunOutcome:
        out = RunOutcome(kind="marg", events=[] if record_events else None)
        if isinstance(initial, Cemetery):
            out.left_final, out.q_left = DELTA, 0.0
            return out
        state = dict(initial.items)
        uni = _Uniforms(rng)
        t = 0.0
        spec = self.model.recombination
        rho = spec.rho
        steps = 0
        seen_nonrec = False
        while not _is_simple_dict(state):
            if steps >= self.max_steps:
                raise self._cap_error("finite-rate")
            steps += 1
            items = list(state.items())
            mass = 0
            rec_total = 0.0
            mut_total = 0.0
            for x, c in items:
                mass += c
                rec_total += c * spec.split_table(observed_sites(x))[0]
                mut_total += c * self._mut_rate(x)
            rec_total *= rho
            coal_total = float(mass * (mass - 1))
            total = rec_total + coal_total + mut_total
            t += -log(1.0 - uni.next()) / total
            r = uni.next() * total
            nonrec_step = False
            if r < rec_total:
                state, ev = self._apply_recombination(state, items, r / rho, rho)
            else:
                r -= rec_total
                nonrec_step = not seen_nonrec
                seen_nonrec = True
                if r < coal_total:
                    state, ev = self._apply_plain_coalescence(state, items, r)
                else:
                    state, ev = self._apply_mutation(state, items, r - coal_total)
            if record_events:
                kind, parts, site = ev
                out.events.append(EventRecord(kind, t, "marg", parts, site, nonrec_step))
            _inc(out.event_counts, ev[0])
            if state is None:
                out.left_final, out.q_left, out.steps = DELTA, 0.0, steps
                return out
        out.left_final = CountingMeasure(state)
        out.q_left = self._terminal_weight(state)
        out.steps = steps
        return out

    # -- split chain ---------------------------------------------------------

    def run_smarg(
        self, initial: ProcessState, rng: np.random.Generator, record_events: bool = False
    ) -> RunOutcome:
        out = RunOutcome(kind="smarg", events=[] if record_events else None)
        if isinstance(initial, Cemetery):
            out.right_final, out.q_right = DELTA, 0.0
            return out
        for x, _ in initial.items:
            if observed_sites(x).bit_count() != 1:
                raise ValueError(f"split chain state must be single-site, got type {x:#x}")
        state = dict(initial.items)
        uni = _Uniforms(rng)
        t = 0.0
        steps = 0
        while not _is_simple_dict(state):
            if steps >= self.max_steps:
                raise self._cap_error("split")
            steps += 1
            items = list(state.items())
            coal_total, mut_total = self._smarg_totals(items)
            total = coal_total + mut_total
            t += -log(1.0 - uni.next()) / total
            r = uni.next() * total
            if r < coal_total:
                state, ev = self._apply_samesite_coalescence(state, items, r)
            else:
                state, ev = self._apply_mutation(state, items, r - coal_total)
            if record_events:
                kind, parts, site = ev
                out.events.append(EventRecord(kind, t, "smarg", parts, site, steps == 1))
            _inc(out.event_counts, ev[0])
            if state is None:
                out.right_final, out.q_right, out.steps = DELTA, 0.0, steps
                return out
        out.right_final = CountingMeasure(state)
        out.q_right = self._terminal_weight(state)
        out.steps = steps
        return out

    def _smarg_totals(self, items) -> tuple[float, float]:
        site_mass: dict[int, int] = {}
        mut_total = 0.0
        for x, c in items:
            m = observed_sites(x)
            site_mass[m] = site_mass.get(m, 0) + c
            mut_total += c * self._mut_rate(x)
        coal_total = float(sum(m * (m - 1) for m in site_mass.values()))
        return coal_total, mut_total

    # -- coupled pair --------------------------------------------------------

    def run_coupled(
        self,
        initial: CountingMeasure | CoupledState,
        rng: np.random.Generator,
        record_events: bool = False,
        check_coupling: bool = False,
    ) -> RunOutcome:
        """Run the coupled pair until both components are simple or dead.

        The pair performs joint transitions whenever the split of the left
        state equals the right state, and product-chain transitions
        otherwise; the first bad coalescence is classified and witnessed
        for the event tallies.
        """
        out = RunOutcome(kind="coupled", events=[] if record_events else None)
        if isinstance(initial, Cemetery):
            out.left_final = out.right_final = DELTA
            out.q_left = out.q_right = 0.0
            return out
        if isinstance(initial, CoupledState):
            left0, right0 = initial.left, initial.right
        else:
            left0, right0 = initial, initial.split_to_sites()
        left = None if isinstance(left0, Cemetery) else dict(left0.items)
        right = None if isinstance(right0, Cemetery) else dict(right0.items)
        coupled = (
            left is not None and right is not None and _split_dict(left) == right
        )
        uni = _Uniforms(rng)
        t = 0.0
        steps = 0
        spec = self.model.recombination
        rho = spec.rho
        seen_nonrec = False
        while True:
            left_live = left is not None and not _is_simple_dict(left)
            right_live = right is not None and not _is_simple_dict(right)
            if not left_live and not right_live:
                break
            if steps >= self.max_steps:
                raise self._cap_error("coupled")
            steps += 1
            nonrec_step = False
            if coupled and left_live:
                litems = list(left.items())
                mass = 0
                rec_total = 0.0
                mut_total = 0.0
                for x, c in litems:
                    mass += c
                    rec_total += c * spec.split_table(observed_sites(x))[0]
                    mut_total += c * self._mut_rate(x)
                rec_total *= rho
                pair_total = 0.0
                for x, cx in litems:
                    dx = observed_sites(x)
                    for y, cy in litems:
                        w = _coalescence_weight(x, cx, y, cy)
                        if w == 0:
                            continue
                        ov = (dx & observed_sites(y)).bit_count()
                        pair_total += w * (1 if ov <= 1 else 1 + ov)
                total = rec_total + pair_total + mut_total
                t += -log(1.0 - uni.next()) / total
                r = uni.next() * total
                chain = "pair"
                if r < rec_total:
                    left, ev = self._apply_recombination(left, litems, r / rho, rho)
                else:
                    r -= rec_total
                    nonrec_step = not seen_nonrec
                    seen_nonrec = True
                    if r < pair_total:
                        left, right, coupled, ev = self._apply_joint_pair(
                            left, right, litems, r, out, nonrec_step
                        )
                    else:
                        left, ev = self._apply_mutation(left, litems, r - pair_total)
                        if left is None:
                            right = None
                        else:
                            x, m_type = ev[1]
                            bm = 0xFF << (8 * ev[2])
                            _dec(right, x & bm)
                            _inc(right, m_type & bm)
                if check_coupling and coupled and left is not None:
                    assert _split_dict(left) == right, "coupling invariant broken"
            else:
                # product phase: each live component moves at its own rates
                l_rates = None
                l_total = 0.0
                if left_live:
                    litems = list(left.items())
                    mass = 0
                    rec_total = 0.0
                    mut_total = 0.0
                    for x, c in litems:
                        mass += c
                        rec_total += c * spec.split_table(observed_sites(x))[0]
                        mut_total += c * self._mut_rate(x)
                    rec_total *= rho
                    coal_total = float(mass * (mass - 1))
                    l_rates = (rec_total, coal_total, mut_total)
                    l_total = rec_total + coal_total + mut_total
                r_total = 0.0
                if right_live:
                    ritems = list(right.items())
                    r_coal, r_mut = self._smarg_totals(ritems)
                    r_total = r_coal + r_mut
                total = l_total + r_total
                t += -log(1.0 - uni.next()) / total
                r = uni.next() * total
                if r < l_total:
                    rec_total, coal_total, mut_total = l_rates
                    if r < rec_total:
                        left, ev = self._apply_recombination(left, litems, r / rho, rho)
                    else:
                        r -= rec_total
                        nonrec_step = not seen_nonrec
                        seen_nonrec = True
                        if r < coal_total:
                            left, ev = self._apply_plain_coalescence(left, litems, r)
                        else:
                            left, ev = self._apply_mutation(left, litems, r - coal_total)
                    chain = "marg"
                else:
                    r -= l_total
                    nonrec_step = not seen_nonrec
                    seen_nonrec = True
                    if r < r_coal:
                        right, ev = self._apply_samesite_coalescence(right, ritems, r)
                    else:
                        right, ev = self._apply_mutation(right, ritems, r - r_coal)
                    chain = "smarg"
                if (
                    not coupled
                    and left is not None
                    and right is not None
                    and _split_dict(left) == right
                ):
                    coupled = True
            if record_events:
                kind, parts, site = ev
                out.events.append(EventRecord(kind, t, chain, parts, site, nonrec_step))
            _inc(out.event_counts, ev[0])
        out.left_final = DELTA if left is None else CountingMeasure(left)
        out.right_final = DELTA if right is None else CountingMeasure(right)
        out.q_left = 0.0 if left is None else self._terminal_weight(left)
        out.q_right = 0.0 if right is None else self._terminal_weight(right)
        out.steps = steps
        return out

    # -- event application helpers -------------------------------------------

    def _terminal_weight(self, state: dict) -> float:
        pw = self.model.mutation.pi_weight
        w = 1.0
        for x, c in state.items():
            w *= pw(x) ** c
        return w

    def _apply_recombination(self, state, items, r, rho):
        spec = self.model.recombination
        for x, c in items:
            coeff = spec.split_table(observed_sites(x))[0]
            w = c * coeff
            if r < w:
                total, cum, frags = spec.split_table(observed_sites(x))
                target = (r / c) if c > 1 else r
                k = bisect_left(cum, target)
                if k >= len(cum):
                    k = len(cum) - 1
                _dec(state, x)
                for bm in frags[k]:
                    _inc(state, x & bm)
                return state, (EventKind.RECOMBINATION, (x,), None)
            r -= w
        # floating drift: take the last non-silent option
        for x, c in reversed(items):
            total, cum, frags = self.model.recombination.split_table(observed_sites(x))
            if cum:
                _dec(state, x)
                for bm in frags[-1]:
                    _inc(state, x & bm)
                return state, (EventKind.RECOMBINATION, (x,), None)
        raise AssertionError("recombination event selected with no splittable particle")

    def _apply_plain_coalescence(self, state, items, r):
        pair = self._select_pair(items, r)
        x, y = pair
        if compatible(x, y):
            _dec(state, x)
            _dec(state, y)
            _inc(state, join(x, y))
            return state, (EventKind.COALESCENCE, (x, y), None)
        return None, (EventKind.COALESCENCE, (x, y), None)

    def _select_pair(self, items, r):
        last = None
        for x, cx in items:
            for y, cy in items:
                w = _coalescence_weight(x, cx, y, cy)
                if w == 0:
                    continue
                if r < w:
                    return x, y
                r -= w
                last = (x, y)
        return last

    def _apply_samesite_coalescence(self, state, items, r):
        last = None
        for x, cx in items:
            dx = observed_sites(x)
            for y, cy in items:
                if observed_sites(y) != dx:
                    continue
                w = _coalescence_weight(x, cx, y, cy)
                if w == 0:
                    continue
                if r < w:
                    return self._merge_samesite(state, x, y)
                r -= w
                last = (x, y)
        return self._merge_samesite(state, *last)

    def _merge_samesite(self, state, x, y):
        inter = x & y
        if inter:
            _dec(state, x)
            _dec(state, y)
            _inc(state, inter)
            return state, (EventKind.COALESCENCE, (x, y), None)
        return None, (EventKind.COALESCENCE, (x, y), None)

    def _apply_mutation(self, state, items, r):
        tables = self.model.mutation.event_table
        for x, c in items:
            w = c * self._mut_rate(x)
            if r >= w:
                r -= w
                continue
            r = r / c if c > 1 else r
            dx = observed_sites(x)
            i = 0
            m = dx
            while m:
                if m & 1:
                    mask = (x >> (8 * i)) & 0xFF
                    total, cum, masks = tables[i][mask]
                    if r < total:
                        k = bisect_left(cum, r)
                        if k >= len(cum):
                            k = len(cum) - 1
                        new_mask = masks[k]
                        if new_mask == 0:
                            return None, (EventKind.MUTATION, (x, 0), i)
                        m_type = x ^ ((mask ^ new_mask) << (8 * i))
                        _dec(state, x)
                        _inc(state, m_type)
                        return state, (EventKind.MUTATION, (x, m_type), i)
                    r -= total
                m >>= 1
                i += 1
        # floating drift: retry on the last particle's last site
        x, c = items[-1]
        i = max(j for j in range(16) if observed_sites(x) >> j & 1)
        mask = (x >> (8 * i)) & 0xFF
        total, cum, masks = tables[i][mask]
        new_mask = masks[-1]
        if new_mask == 0:
            return None, (EventKind.MUTATION, (x, 0), i)
        m_type = x ^ ((mask ^ new_mask) << (8 * i))
        _dec(state, x)
        _inc(state, m_type)
        return state, (EventKind.MUTATION, (x, m_type), i)

    def _apply_joint_pair(self, left, right, items, r, out: RunOutcome, first: bool):
        """Select and apply one coupled pair event (good/bad coalescence)."""
        chosen = None
        for x, cx in items:
            dx = observed_sites(x)
            for y, cy in items:
                w = _coalescence_weight(x, cx, y, cy)
                if w == 0:
                    continue
                ov = dx & observed_sites(y)
                nov = ov.bit_count()
                if nov <= 1:
                    if r < w:
                        chosen = ("good", x, y, ov)
                        break
                    r -= w
                else:
                    if r < w:
                        chosen = ("bad1", x, y, ov)
                        break
                    r -= w
                    m = ov
                    i = 0
                    while m and chosen is None:
                        if m & 1:
                            if r < w:
                                chosen = ("bad2", x, y, i)
                                break
                            r -= w
                        m >>= 1
                        i += 1
                    if chosen:
                        break
            if chosen:
                break
        if chosen is None:
            # floating drift: fall back to the final ordered pair as a good/bad1 event
            for x, cx in reversed(items):
                for y, cy in reversed(items):
                    if _coalescence_weight(x, cx, y, cy):
                        ov = observed_sites(x) & observed_sites(y)
                        chosen = (("good" if ov.bit_count() <= 1 else "bad1"), x, y, ov)
                        break
                if chosen:
                    break
        case, x, y, payload = chosen
        if case == "good":
            ov = payload
            if compatible(x, y):
                _dec(left, x)
                _dec(left, y)
                _inc(left, join(x, y))
                if ov:
                    i = ov.bit_length() - 1
                    bm = 0xFF << (8 * i)
                    px, py = x & bm, y & bm
                    _dec(right, px)
                    _dec(right, py)
                    _inc(right, px & py)
                return left, right, True, (EventKind.GOOD_COALESCENCE, (x, y), None)
            return None, None, False, (EventKind.GOOD_COALESCENCE, (x, y), None)
        if case == "bad1":
            ov = payload
            if first:
                out.bad_first = True
                out.bad1_first = True
                mx = x & byte_mask(ov)
                my = y & byte_mask(ov)
                if mx == my:
                    out.bad1_witness = (ov, mx)
            if compatible(x, y):
                _dec(left, x)
                _dec(left, y)
                _inc(left, join(x, y))
            else:
                left = None
            out.coupling_ok = False
            return left, right, False, (EventKind.BAD_COALESCENCE_1, (x, y), None)
        i = payload
        bm = 0xFF << (8 * i)
        px, py = x & bm, y & bm
        if first:
            out.bad_first = True
            out.bad2_first = True
            if px == py:
                out.bad2_witness = (i, (px >> (8 * i)) & 0xFF)
        if px & py:
            _dec(right, px)
            _dec(right, py)
            _inc(right, px & py)
        else:
            right = None
        out.coupling_ok = False
        return left, right, False, (EventKind.BAD_COALESCENCE_2, (x, y), i)


def simulate(
    initial: ProcessState | CoupledState,
    model: "Model",
    seed: int,
    dynamics: str = "marg",
    record_events: bool = True,
    max_steps: int = DEFAULT_STEP_CAP,
) -> RunOutcome:
    """Run one trajectory from a seed; identical seeds give identical streams.

    ``dynamics`` selects the chain for plain states (``"marg"`` or
    ``"smarg"``); a :class:`CoupledState` always runs the coupled pair.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    sim = Simulator(model, max_steps=max_steps)
    if isinstance(initial, CoupledState):
        return sim.run_coupled(initial, rng, record_events=record_events)
    if dynamics == "marg":
        return sim.run_marg(initial, rng, record_events=record_events)
    if dynamics == "smarg":
        return sim.run_smarg(initial, rng, record_events=record_events)
    if dynamics == "coupled":
        return sim.run_coupled(initial, rng, record_events=record_events)
    raise ValueError(f"unknown dynamics {dynamics!r}")
