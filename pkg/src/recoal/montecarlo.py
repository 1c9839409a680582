"""Replicated Monte Carlo estimation with reproducible parallel streams.

Replicate ``k`` of a run with seed ``s`` always draws from the Philox
counter-based stream keyed by ``(s, k)``, so results are bit-identical
across reruns and independent of how replicates are distributed over
worker processes.  Per-replicate values are combined by compensated
summation inside fixed-size blocks and the block sums are folded in index
order, which makes the merged mean independent of the worker count as
well.

Conditional statistics observed fewer than ``MIN_EVENTS`` times are
reported as counts without a mean: a rare-event mean over a handful of
trajectories would be noise dressed up as a number.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from math import fsum, nan, sqrt
from multiprocessing import get_context

import numpy as np

from .dynamics import SimulationCapError, Simulator
from .types import CountingMeasure

BLOCK = 2048
MIN_EVENTS = 100
_MASK64 = (1 << 64) - 1


def replicate_generator(seed: int, k: int) -> np.random.Generator:
    """Counter-based stream for replicate ``k`` of seed ``seed``."""
    key = ((seed & _MASK64) << 64) | (k & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class Estimate:
    mean: float
    stderr: float
    reps: int
    seed: int
    wall_time: float


@dataclass
class EventStat:
    """Tally of one coupling event: frequency plus conditional terminal means."""

    count: int
    freq: float
    freq_stderr: float
    mean_q_left: float | None
    stderr_q_left: float | None
    mean_q_right: float | None
    stderr_q_right: float | None


@dataclass
class CouplingStats:
    reps: int
    seed: int
    rho: float
    wall_time: float
    events: dict[str, EventStat]
    bad1_witnesses: dict[tuple[int, int], EventStat]
    bad2_witnesses: dict[tuple[int, int], EventStat]
    q_left: Estimate
    q_right: Estimate
    #: rho * mean over all replicates of (q_left - q_right) restricted to runs
    #: whose first non-fragmentation event was a bad coalescence: the Monte
    #: Carlo route to the first-order expansion coefficient
    q1_hat: Estimate


# -- worker plumbing ---------------------------------------------------------

_CTX: dict = {}


def _init_worker(model, initial, mode, seed, max_steps):
    _CTX["sim"] = Simulator(model, max_steps=max_steps)
    _CTX["initial"] = initial
    _CTX["mode"] = mode
    _CTX["seed"] = seed


def _block_ranges(reps: int):
    return [(b, min(b + BLOCK, reps)) for b in range(0, reps, BLOCK)]


def _run_block_q(bounds: tuple[int, int]):
    sim: Simulator = _CTX["sim"]
    initial = _CTX["initial"]
    seed = _CTX["seed"]
    run = sim.run_marg if _CTX["mode"] == "marg" else sim.run_smarg
    vals = []
    for k in range(*bounds):
        try:
            out = run(initial, replicate_generator(seed, k))
        except SimulationCapError as exc:
            raise SimulationCapError(f"replicate {k}: {exc}") from exc
        vals.append(out.q_left if _CTX["mode"] == "marg" else out.q_right)
    return fsum(vals), fsum(v * v for v in vals), bounds[1] - bounds[0]


class _Acc:
    """Count + compensated sums of a value and its square (and a partner value)."""

    __slots__ = ("count", "s1", "s2", "r1", "r2")

    def __init__(self):
        self.count = 0
        self.s1 = []
        self.s2 = []
        self.r1 = []
        self.r2 = []

    def add_block(self, count, s1, s2, r1=0.0, r2=0.0):
        self.count += count
        self.s1.append(s1)
        self.s2.append(s2)
        self.r1.append(r1)
        self.r2.append(r2)

    def sums(self):
        return fsum(self.s1), fsum(self.s2), fsum(self.r1), fsum(self.r2)


def _mean_stderr(count: int, s1: float, s2: float) -> tuple[float, float]:
    if count == 0:
        return nan, nan
    mean = s1 / count
    if count < 2:
        return mean, 0.0
    var = max(s2 - count * mean * mean, 0.0) / (count - 1)
    return mean, sqrt(var / count)


def _cond_stat(reps: int, count: int, sums) -> EventStat:
    s1l, s2l, s1r, s2r = sums
    freq = count / reps
    freq_se = sqrt(freq * (1.0 - freq) / reps) if reps else nan
    if count >= MIN_EVENTS:
        ml, sel = _mean_stderr(count, s1l, s2l)
        mr, ser = _mean_stderr(count, s1r, s2r)
        return EventStat(count, freq, freq_se, ml, sel, mr, ser)
    return EventStat(count, freq, freq_se, None, None, None, None)


def _run_block_couple(bounds: tuple[int, int]):
    sim: Simulator = _CTX["sim"]
    initial = _CTX["initial"]
    seed = _CTX["seed"]
    n = 0
    ql, ql2, qr, qr2 = [], [], [], []
    tallies = {name: [0, [], [], [], []] for name in ("bad", "bad_first", "bad1_first", "bad2_first", "neither")}
    w1: dict = {}
    w2: dict = {}
    qdiff, qdiff2 = [], []
    for k in range(*bounds):
        try:
            out = sim.run_coupled(initial, replicate_generator(seed, k))
        except SimulationCapError as exc:
            raise SimulationCapError(f"replicate {k}: {exc}") from exc
        n += 1
        a, b = out.q_left, out.q_right
        ql.append(a)
        ql2.append(a * a)
        qr.append(b)
        qr2.append(b * b)
        hit = []
        if not out.coupling_ok:
            hit.append("bad")
            if out.bad_first:
                hit.append("bad_first")
                hit.append("bad1_first" if out.bad1_first else "bad2_first")
                d = a - b
                qdiff.append(d)
                qdiff2.append(d * d)
                if out.bad1_witness is not None:
                    rec = w1.setdefault(out.bad1_witness, [0, 0.0, 0.0, 0.0, 0.0])
                    rec[0] += 1
                    rec[1] += a
                    rec[2] += a * a
                    rec[3] += b
                    rec[4] += b * b
                if out.bad2_witness is not None:
                    rec = w2.setdefault(out.bad2_witness, [0, 0.0, 0.0, 0.0, 0.0])
                    rec[0] += 1
                    rec[1] += a
                    rec[2] += a * a
                    rec[3] += b
                    rec[4] += b * b
            else:
                hit.append("neither")
        for name in hit:
            t = tallies[name]
            t[0] += 1
            t[1].append(a)
            t[2].append(a * a)
            t[3].append(b)
            t[4].append(b * b)
    packed = {
        name: (t[0], fsum(t[1]), fsum(t[2]), fsum(t[3]), fsum(t[4]))
        for name, t in tallies.items()
    }
    return {
        "n": n,
        "q": (fsum(ql), fsum(ql2), fsum(qr), fsum(qr2)),
        "tallies": packed,
        "w1": w1,
        "w2": w2,
        "qdiff": (len(qdiff), fsum(qdiff), fsum(qdiff2)),
    }


def _map_blocks(fn, reps, workers, init_args):
    ranges = _block_ranges(reps)
    if workers <= 1:
        _init_worker(*init_args)
        return [fn(r) for r in ranges]
    ctx = get_context("fork")
    with ctx.Pool(workers, initializer=_init_worker, initargs=init_args) as pool:
        return pool.map(fn, ranges)


# -- public estimators ---------------------------------------------------------


def estimate_q(
    nu: CountingMeasure,
    model,
    reps: int,
    seed: int = 0,
    workers: int = 1,
    mode: str = "marg",
    max_steps: int | None = None,
) -> Estimate:
    """Sampling-probability estimate: mean terminal weight over independent
    trajectories of the finite-rate chain (or the split chain for
    ``mode="smarg"``)."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    from .dynamics import DEFAULT_STEP_CAP

    t0 = time.perf_counter()
    blocks = _map_blocks(
        _run_block_q,
        reps,
        workers,
        (model, nu, mode, seed, DEFAULT_STEP_CAP if max_steps is None else max_steps),
    )
    s1 = fsum(b[0] for b in blocks)
    s2 = fsum(b[1] for b in blocks)
    mean, stderr = _mean_stderr(reps, s1, s2)
    return Estimate(mean, stderr, reps, seed, time.perf_counter() - t0)


def estimate_coupling(
    nu: CountingMeasure,
    model,
    reps: int,
    seed: int = 0,
    workers: int = 1,
    max_steps: int | None = None,
) -> CouplingStats:
    """Coupled-pair tallies: coupling-failure frequencies, first-event
    classification with witnesses, and conditional terminal weights."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    from .dynamics import DEFAULT_STEP_CAP

    t0 = time.perf_counter()
    blocks = _map_blocks(
        _run_block_couple,
        reps,
        workers,
        (model, nu, "coupled", seed, DEFAULT_STEP_CAP if max_steps is None else max_steps),
    )
    qacc = _Acc()
    tallies = {n: _Acc() for n in ("bad", "bad_first", "bad1_first", "bad2_first", "neither")}
    w1: dict = {}
    w2: dict = {}
    dacc = _Acc()
    for blk in blocks:
        qacc.add_block(blk["n"], *blk["q"])
        for name, t in blk["tallies"].items():
            tallies[name].add_block(*t)
        for target, src in ((w1, blk["w1"]), (w2, blk["w2"])):
            for key, rec in src.items():
                agg = target.setdefault(key, [0, 0.0, 0.0, 0.0, 0.0])
                for j in range(5):
                    agg[j] += rec[j]
        dn, ds1, ds2 = blk["qdiff"]
        dacc.add_block(dn, ds1, ds2)
    s1l, s2l, s1r, s2r = qacc.sums()
    mean_l, se_l = _mean_stderr(reps, s1l, s2l)
    mean_r, se_r = _mean_stderr(reps, s1r, s2r)
    wall = time.perf_counter() - t0
    events = {
        name: _cond_stat(reps, acc.count, acc.sums()) for name, acc in tallies.items()
    }
    # the no-failure event is the complement of "bad"; its conditional sums
    # follow from the overall and bad-conditional tallies
    bad_sums = tallies["bad"].sums()
    ok_sums = tuple(t - b for t, b in zip((s1l, s2l, s1r, s2r), bad_sums))
    events["coupling_ok"] = _cond_stat(reps, reps - tallies["bad"].count, ok_sums)
    # scaled first-order estimate: the masked diff averaged over *all* reps
    ds1, ds2, _, _ = dacc.sums()
    rho = model.recombination.rho
    dmean = ds1 / reps
    dvar = max(ds2 - reps * dmean * dmean, 0.0) / (reps - 1) if reps > 1 else 0.0
    q1_hat = Estimate(rho * dmean, rho * sqrt(dvar / reps), reps, seed, wall)
    return CouplingStats(
        reps=reps,
        seed=seed,
        rho=rho,
        wall_time=wall,
        events=events,
        bad1_witnesses={k: _cond_stat(reps, v[0], tuple(v[1:])) for k, v in sorted(w1.items())},
        bad2_witnesses={k: _cond_stat(reps, v[0], tuple(v[1:])) for k, v in sorted(w2.items())},
        q_left=Estimate(mean_l, se_l, reps, seed, wall),
        q_right=Estimate(mean_r, se_r, reps, seed, wall),
        q1_hat=q1_hat,
    )


@dataclass
class SweepRow:
    rho: float
    q_mc: float
    q_mc_stderr: float
    q_exact: float | None
    q_infty: float
    q1: float
    scaled_residual_mc: float
    scaled_residual_exact: float | None

    def as_dict(self) -> dict:
        return {
            "rho": self.rho,
            "q_mc": self.q_mc,
            "q_mc_stderr": self.q_mc_stderr,
            "q_exact": self.q_exact,
            "q_infty": self.q_infty,
            "q1": self.q1,
            "scaled_residual_mc": self.scaled_residual_mc,
            "scaled_residual_exact": self.scaled_residual_exact,
        }


def rho_sweep(
    nu: CountingMeasure,
    model,
    rhos,
    reps: int,
    seed: int = 0,
    workers: int = 1,
    state_cap: int | None = None,
) -> list[SweepRow]:
    """Expansion-validation table: per ``rho``, the Monte Carlo estimate, the
    exact solve when the state space fits, the infinite-recombination limit,
    the first-order coefficient and the scaled residuals ``rho (q - q_inf)``."""
    from .asymptotics import SingleSiteQ, q1 as q1_coeff, q_infty
    from .exact import DEFAULT_STATE_CAP, StateCapError, absorption_value

    cap = state_cap or DEFAULT_STATE_CAP
    ssq = SingleSiteQ(model, state_cap=cap)
    qi = q_infty(nu, ssq)
    q1v = q1_coeff(nu, model, ssq)
    rows = []
    for rho in rhos:
        m = model.with_rho(float(rho))
        est = estimate_q(nu, m, reps, seed=seed, workers=workers)
        try:
            qe = absorption_value(nu, m, "marg", cap)
        except StateCapError:
            qe = None
        rows.append(
            SweepRow(
                rho=float(rho),
                q_mc=est.mean,
                q_mc_stderr=est.stderr,
                q_exact=qe,
                q_infty=qi,
                q1=q1v,
                scaled_residual_mc=float(rho) * (est.mean - qi),
                scaled_residual_exact=None if qe is None else float(rho) * (qe - qi),
            )
        )
    return rows
