"""Per-site mutation kernels, stationary distributions and the backward
mutation step.

Tracing a desired observation backward through a mutation ``y -> z`` at
site ``i`` turns the candidate set at ``i`` into ``c | {y}`` when ``z`` is
acceptable and ``c \\ {y}`` when it is not; an empty result means the
observation is impossible and the chain is killed.

The module also owns the weight of a *simple* terminal state: the product
over surviving ancestors and observed sites of the stationary probability
of drawing an acceptable allele.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .types import (
    DELTA,
    Cemetery,
    CountingMeasure,
    FuzzyType,
    ProcessState,
    allele_set,
    observed_sites,
    sites,
)

ROW_SUM_TOL = 1e-9
STATIONARY_TOL = 1e-12


class ReducibleKernelError(ValueError):
    pass


def stationary_distribution(M: np.ndarray) -> np.ndarray:
    """Unique stationary distribution of an irreducible row-stochastic kernel.

    Solved directly as the left eigenvector for eigenvalue 1, i.e. the
    linear system ``(M^T - I) pi = 0`` with a normalisation row; exact at
    these sizes, no power iteration.
    """
    M = np.asarray(M, dtype=float)
    k = M.shape[0]
    if k == 1:
        return np.ones(1)
    graph = csr_matrix((M > 0).astype(np.int8))
    ncomp, _ = connected_components(graph, directed=True, connection="strong")
    if ncomp != 1:
        raise ReducibleKernelError(
            f"mutation kernel is reducible ({ncomp} strongly connected components)"
        )
    A = M.T - np.eye(k)
    A[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    residual = float(np.max(np.abs(pi @ M - pi)))
    if residual > STATIONARY_TOL:
        # one step of refinement through the full eigenproblem fallback
        w, v = np.linalg.eig(M.T)
        idx = int(np.argmin(np.abs(w - 1.0)))
        pi = np.real(v[:, idx])
        pi = pi / pi.sum()
        residual = float(np.max(np.abs(pi @ M - pi)))
        if residual > STATIONARY_TOL:
            raise ValueError(f"stationary solve residual {residual:.3e} exceeds tolerance")
    return pi


def mutation_preimage(x: FuzzyType, site: int, y: int, z: int) -> FuzzyType | None:
    """Type to observe just before a mutation ``y -> z`` at ``site`` so that
    ``x`` is observed just after; ``None`` when impossible.

    Only the candidate set at ``site`` changes: it gains ``y`` when ``z``
    is currently acceptable and loses ``y`` otherwise.
    """
    c = allele_set(x, site)
    if c == 0:
        raise ValueError(f"type {x:#x} is not observed at site {site}")
    if c & (1 << z):
        new = c | (1 << y)
    else:
        new = c & ~(1 << y)
        if new == 0:
            return None
    return x ^ ((c ^ new) << (8 * site))


@dataclass(frozen=True)
class MutationKernel:
    """One site's mutation rate and row-stochastic transition matrix."""

    u: float
    matrix: tuple[tuple[float, ...], ...]

    @classmethod
    def from_rows(cls, u: float, rows) -> "MutationKernel":
        M = np.asarray(rows, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("mutation matrix must be square")
        if np.any(M < 0):
            raise ValueError("mutation matrix entries must be nonnegative")
        sums = M.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
            raise ValueError(
                f"mutation matrix rows must sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3e})"
            )
        if u < 0:
            raise ValueError(f"mutation rate must be nonnegative, got {u}")
        M = M / sums[:, None]
        return cls(float(u), tuple(tuple(float(v) for v in row) for row in M))

    @property
    def n_alleles(self) -> int:
        return len(self.matrix)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float)

    def pim_weights(self) -> np.ndarray | None:
        """Common row if the kernel is parent independent, else ``None``."""
        M = self.as_array()
        if np.max(np.abs(M - M[0])) <= 1e-12:
            return M[0].copy()
        return None


class MutationModel:
    """Validated per-site kernels with the lookup tables the dynamics need.

    Precomputed per site and candidate mask:

    * ``pi_sum`` -- stationary probability of drawing an acceptable allele,
    * ``event_table`` -- the distinct non-silent backward mutation outcomes
      ``(total rate, cumulative rates, resulting masks)`` where a zero mask
      stands for the killed chain.

    Silent mutation events (preimage equal to the current type) are
    self-loops of the chain and are excluded throughout.
    """

    def __init__(self, kernels: list[MutationKernel]):
        if not kernels:
            raise ValueError("at least one site required")
        for i, k in enumerate(kernels):
            if not 1 <= k.n_alleles <= 8:
                raise ValueError(f"site {i}: allele count {k.n_alleles} outside 1..8")
            if k.u == 0 and k.n_alleles > 1:
                raise ReducibleKernelError(
                    f"site {i}: zero mutation rate with {k.n_alleles} alleles leaves "
                    "allele frequencies unstable; use a single-allele site instead"
                )
        self.kernels = list(kernels)
        self.n = len(kernels)
        self.pi = [
            stationary_distribution(k.as_array()) if k.n_alleles > 1 else np.ones(1)
            for k in kernels
        ]
        self.pi_sum: list[list[float]] = []
        self.event_table: list[list[tuple[float, list[float], list[int]]]] = []
        for i, k in enumerate(kernels):
            na = k.n_alleles
            pis = [0.0] * (1 << na)
            for mask in range(1, 1 << na):
                low = mask & -mask
                pis[mask] = pis[mask ^ low] + float(self.pi[i][low.bit_length() - 1])
            self.pi_sum.append(pis)
            M = k.matrix
            table: list[tuple[float, list[float], list[int]]] = [(0.0, [], [])]
            for mask in range(1, 1 << na):
                outcomes: dict[int, float] = {}
                for y in range(na):
                    ybit = 1 << y
                    for z in range(na):
                        rate = k.u * M[y][z]
                        if rate == 0.0:
                            continue
                        if mask & (1 << z):
                            new = mask | ybit
                        else:
                            new = mask & ~ybit
                        if new == mask:
                            continue
                        outcomes[new] = outcomes.get(new, 0.0) + rate
                total = 0.0
                cum: list[float] = []
                masks: list[int] = []
                for new, rate in outcomes.items():
                    total += rate
                    cum.append(total)
                    masks.append(new)
                table.append((total, cum, masks))
            self.event_table.append(table)

    def mutation_rate(self, x: FuzzyType) -> float:
        """Total rate of non-silent backward mutation events on one particle."""
        total = 0.0
        for i in sites(observed_sites(x)):
            total += self.event_table[i][allele_set(x, i)][0]
        return total

    def pi_weight(self, x: FuzzyType) -> float:
        """Product over observed sites of the acceptable-allele mass under pi."""
        w = 1.0
        for i in sites(observed_sites(x)):
            w *= self.pi_sum[i][allele_set(x, i)]
        return w


def root_weight(state: ProcessState, model: MutationModel) -> float:
    """Weight of a terminal state: stationary draw probability of a simple
    configuration, 0 for the cemetery."""
    if isinstance(state, Cemetery):
        return 0.0
    if not state.is_simple():
        raise ValueError("root weight is defined on simple states only")
    w = 1.0
    for x, c in state.items:
        w *= model.pi_weight(x) ** c
    return w
