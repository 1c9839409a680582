"""Exact sampling probabilities by first-step analysis.

The reachable state space of either chain from a finite start is finite:
the per-particle count of observed sites never increases and candidate
sets live on a finite lattice.  Enumerating it breadth-first and solving
the linear absorption system gives the expected terminal weight --
``f(s) = sum_t p(s -> t) f(t)`` with ``f = root weight`` on simple states
and ``f = 0`` at the cemetery -- to solver precision, independent of
``rho``-scale rate disparities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from .mutation import root_weight
from .types import Cemetery, CountingMeasure, ProcessState, observed_sites
from .dynamics import marg_transitions, smarg_transitions

if TYPE_CHECKING:
    from .model import Model

DEFAULT_STATE_CAP = 1_000_000
RESIDUAL_TOL = 1e-12


class StateCapError(RuntimeError):
    """Reachable state space exceeded the cap; instance too large for exact solve."""

    def __init__(self, cap: int):
        self.cap = cap
        super().__init__(f"instance too large for exact solve: more than {cap} reachable states")


@dataclass
class StateGraph:
    """Indexed reachable states with outgoing rates; absorbing = simple or cemetery."""

    states: list[ProcessState]
    index: dict[ProcessState, int]
    edges: list[list[tuple[int, float]] | None]
    absorbing: list[bool]
    initial: int = 0

    def __len__(self):
        return len(self.states)


@dataclass
class AbsorptionSolution:
    graph: StateGraph
    values: np.ndarray
    residual: float

    def value(self, state: ProcessState | None = None) -> float:
        idx = self.graph.initial if state is None else self.graph.index[state]
        return float(self.values[idx])


def build_state_graph(
    initial: ProcessState,
    model: "Model",
    dynamics: str = "marg",
    cap: int = DEFAULT_STATE_CAP,
) -> StateGraph:
    """Breadth-first closure of the chosen chain from ``initial``.

    ``dynamics`` is ``"marg"`` (finite-rate chain) or ``"smarg"`` (split
    chain).  Raises :class:`StateCapError` past ``cap`` states.
    """
    enumerate_transitions: Callable = {
        "marg": marg_transitions,
        "smarg": smarg_transitions,
    }[dynamics]

    def is_absorbing(s: ProcessState) -> bool:
        return isinstance(s, Cemetery) or s.is_simple()

    states: list[ProcessState] = [initial]
    index: dict[ProcessState, int] = {initial: 0}
    edges: list[list[tuple[int, float]] | None] = []
    absorbing: list[bool] = []
    head = 0
    while head < len(states):
        s = states[head]
        if is_absorbing(s):
            edges.append(None)
            absorbing.append(True)
            head += 1
            continue
        out = []
        for target, rate in enumerate_transitions(s, model):
            j = index.get(target)
            if j is None:
                j = len(states)
                if j >= cap:
                    raise StateCapError(cap)
                index[target] = j
                states.append(target)
            out.append((j, rate))
        if not out:
            raise AssertionError(f"non-absorbing state with no transitions: {s!r}")
        edges.append(out)
        absorbing.append(False)
        head += 1
    return StateGraph(states, index, edges, absorbing)


def solve_q(graph: StateGraph, model: "Model") -> AbsorptionSolution:
    """Solve the absorption system on a built graph by sparse LU.

    One step of iterative refinement keeps the residual at rounding level
    even when rates within a state differ by the full ``rho`` scale.
    """
    n = len(graph)
    values = np.zeros(n)
    transient = [i for i in range(n) if not graph.absorbing[i]]
    for i in range(n):
        if graph.absorbing[i]:
            s = graph.states[i]
            values[i] = 0.0 if isinstance(s, Cemetery) else root_weight(s, model.mutation)
    if not transient:
        return AbsorptionSolution(graph, values, 0.0)

    pos = {g: k for k, g in enumerate(transient)}
    m = len(transient)
    rows: list[int] = []
    cols: list[int] = []
    data: list[float] = []
    b = np.zeros(m)
    for g in transient:
        k = pos[g]
        out = graph.edges[g]
        total = sum(rate for _, rate in out)
        rows.append(k)
        cols.append(k)
        data.append(1.0)
        for j, rate in out:
            p = rate / total
            if graph.absorbing[j]:
                b[k] += p * values[j]
            else:
                rows.append(k)
                cols.append(pos[j])
                data.append(-p)
    A = csc_matrix((data, (rows, cols)), shape=(m, m))
    lu = splu(A)
    f = lu.solve(b)
    f += lu.solve(b - A @ f)
    residual = float(np.max(np.abs(A @ f - b)))
    if residual > RESIDUAL_TOL:
        raise RuntimeError(f"absorption solve residual {residual:.3e} exceeds {RESIDUAL_TOL}")
    lo, hi = float(f.min()), float(f.max())
    if lo < -1e-9 or hi > 1 + 1e-9:
        raise RuntimeError(f"absorption values escape [0,1]: min {lo}, max {hi}")
    for g in transient:
        values[g] = f[pos[g]]
    return AbsorptionSolution(graph, values, residual)


def absorption_value(
    initial: ProcessState,
    model: "Model",
    dynamics: str = "marg",
    cap: int = DEFAULT_STATE_CAP,
) -> float:
    """Exact expected terminal weight from ``initial`` under the chosen chain."""
    if isinstance(initial, Cemetery):
        return 0.0
    graph = build_state_graph(initial, model, dynamics, cap)
    return solve_q(graph, model).value()


def single_site_q(measure: CountingMeasure, model: "Model", cap: int = DEFAULT_STATE_CAP) -> float:
    """Exact sampling probability of a configuration of single-site particles
    under the split chain (the one-dimensional marginal building block)."""
    for x, _ in measure.items:
        if observed_sites(x).bit_count() != 1:
            raise ValueError(f"single-site measure required, got type {x:#x}")
    return absorption_value(measure, model, "smarg", cap)
