"""Shared builders for randomized test instances."""

from __future__ import annotations

import numpy as np

from recoal.model import Model
from recoal.mutation import MutationKernel, MutationModel
from recoal.partitions import Partition, RecombinationSpec, single_crossover, singletons_partition
from recoal.types import CountingMeasure, make_type


def build_model(us, Ms, spec: RecombinationSpec) -> Model:
    kernels = [MutationKernel.from_rows(u, M) for u, M in zip(us, Ms)]
    labels = tuple(tuple(str(a) for a in range(k.n_alleles)) for k in kernels)
    return Model(len(kernels), labels, MutationModel(kernels), spec)


def flagship_model(rho: float = 1.0) -> tuple[Model, CountingMeasure]:
    """Two biallelic sites, uniform parent-independent mutation at rate 1,
    single crossover at base rate 1, sample = two copies of (0,0)."""
    spec = single_crossover(2, [1.0], rho)
    model = build_model([1.0, 1.0], [[[0.5, 0.5], [0.5, 0.5]]] * 2, spec)
    sample = CountingMeasure([(make_type({0: 1, 1: 1}), 2)])
    return model, sample


def random_kernel(rng: np.random.Generator, k: int) -> list[list[float]]:
    # strictly positive rows => irreducible
    M = rng.uniform(0.1, 1.0, size=(k, k))
    M /= M.sum(axis=1, keepdims=True)
    return M.tolist()


def random_partition(rng: np.random.Generator, n: int) -> Partition:
    while True:
        labels = rng.integers(0, n, size=n)
        blocks: dict[int, int] = {}
        for site, lab in enumerate(labels):
            blocks[int(lab)] = blocks.get(int(lab), 0) | (1 << site)
        if len(blocks) > 1 or n == 1:
            return Partition(tuple(blocks.values()))


def random_spec(rng: np.random.Generator, n: int, rho: float = 1.0) -> RecombinationSpec:
    terms = {singletons_partition(n): float(rng.uniform(0.2, 1.5))}
    for _ in range(int(rng.integers(0, 3))):
        part = random_partition(rng, n)
        if part not in terms:
            terms[part] = float(rng.uniform(0.0, 1.5))
    return RecombinationSpec(n, list(terms.items()), rho)


def random_model(
    rng: np.random.Generator,
    n: int,
    max_alleles: int = 3,
    rho: float = 1.0,
    pim: bool = False,
) -> Model:
    us, Ms = [], []
    for _ in range(n):
        k = int(rng.integers(2, max_alleles + 1))
        us.append(float(rng.uniform(0.3, 2.0)))
        if pim:
            row = rng.uniform(0.1, 1.0, size=k)
            row /= row.sum()
            Ms.append([row.tolist()] * k)
        else:
            Ms.append(random_kernel(rng, k))
    spec = random_spec(rng, n, rho) if n > 1 else RecombinationSpec(1, [], rho)
    return build_model(us, Ms, spec)


def random_exact_measure(
    rng: np.random.Generator, model: Model, max_mass: int = 4, full_types: bool = False
) -> CountingMeasure:
    mass = int(rng.integers(1, max_mass + 1))
    particles = []
    full = (1 << model.n) - 1
    for _ in range(mass):
        d = full if full_types else int(rng.integers(1, full + 1))
        entries = {}
        for i in range(model.n):
            if d >> i & 1:
                k = len(model.allele_labels[i])
                entries[i] = 1 << int(rng.integers(0, k))
        particles.append(make_type(entries))
    return CountingMeasure.from_particles(particles)


def random_fuzzy_measure(
    rng: np.random.Generator, model: Model, max_mass: int = 4
) -> CountingMeasure:
    mass = int(rng.integers(1, max_mass + 1))
    particles = []
    full = (1 << model.n) - 1
    for _ in range(mass):
        d = int(rng.integers(1, full + 1))
        entries = {}
        for i in range(model.n):
            if d >> i & 1:
                k = len(model.allele_labels[i])
                entries[i] = int(rng.integers(1, 1 << k))
        particles.append(make_type(entries))
    return CountingMeasure.from_particles(particles)
