"""Acceptance suite: one test (or a small group) per criterion, each printing
a PASS/FAIL line (run with ``-s`` to see them live).

Heavy Monte Carlo tallies are shared through module-scoped fixtures; all
replicate counts, seeds and tolerances are pinned here.  One sub-assertion
(criterion 3, first-decade residual ratio) is a documented genuine red: the
quantity it bounds is a mathematical constant of the flagship instance that
falls outside the required band; see the test docstring.
"""

import itertools

import numpy as np
import pytest

from helpers import build_model, flagship_model, random_exact_measure, random_fuzzy_measure, random_model
from recoal.asymptotics import (
    SingleSiteQ,
    moebius_invert,
    pim_single_site_q,
    prob_bad1_total,
    prob_bad1_witness,
    prob_bad2_total,
    prob_bad2_witness,
    q1,
    q1_via_decomposition,
    q_infty,
    superset_sum,
)
from recoal.dynamics import CoupledState, Simulator, cmarg_transitions, marg_transitions, simulate, smarg_transitions
from recoal.exact import absorption_value, single_site_q
from recoal.montecarlo import estimate_coupling, estimate_q
from recoal.mutation import MutationKernel
from recoal.partitions import Partition, RecombinationSpec, single_crossover
from recoal.types import (
    Cemetery,
    CountingMeasure,
    exact_type,
    make_type,
    observed_sites,
)

pytestmark = pytest.mark.acceptance

A, B, C = 1, 2, 4
SEED = 20260810
MC_WORKERS = 2
C7_REPS = 100_000
C8_REPS = 1_000_000
C9_REPS_LOW_RHO = 300_000


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[criterion {criterion:>2}] {'PASS' if ok else 'FAIL'}  {detail}")


# -------------------------------------------------------------------------
# criterion 1: exact solver vs parent-independent closed form
# -------------------------------------------------------------------------


def _allele_multisets(k: int, size: int):
    return itertools.combinations_with_replacement(range(k), size)


def test_criterion1_pim_oracle_agreement():
    rows2 = [[0.5, 0.5], [0.3, 0.7]]
    rows3 = [[1 / 3, 1 / 3, 1 / 3], [0.2, 0.3, 0.5]]
    worst = 0.0
    cases = 0
    for k, row_choices in ((2, rows2), (3, rows3)):
        for row in row_choices:
            for u in (0.25, 1.0, 4.0):
                kernel = MutationKernel.from_rows(u, [row] * k)
                model = build_model([u], [[row] * k], RecombinationSpec(1, []))
                for size in range(1, 5):
                    for combo in _allele_multisets(k, size):
                        nu = CountingMeasure.from_particles(
                            [make_type({0: 1 << a}) for a in combo]
                        )
                        solver = single_site_q(nu, model)
                        closed = pim_single_site_q(nu, u, row)
                        worst = max(worst, abs(solver - closed))
                        cases += 1
    ok = cases >= 50 and worst <= 1e-10
    report(1, ok, f"{cases} PIM cases, worst |solver - closed form| = {worst:.2e}")
    assert cases >= 50
    assert worst <= 1e-10


# -------------------------------------------------------------------------
# criterion 2: product structure of the infinite-recombination limit
# -------------------------------------------------------------------------


def test_criterion2_product_structure():
    rng = np.random.default_rng(SEED + 2)
    worst = 0.0
    for trial in range(50):
        n = int(rng.integers(1, 4))
        model = random_model(rng, n, rho=1.0, pim=bool(trial % 2))
        nu = random_exact_measure(rng, model, max_mass=4)
        ssq = SingleSiteQ(model)
        lhs = q_infty(nu, ssq)
        rhs = 1.0
        split = nu.split_to_sites()
        for i in range(n):
            sub = CountingMeasure(
                [(x, c) for x, c in split.items if observed_sites(x) == 1 << i]
            )
            if sub:
                rhs *= single_site_q(sub, model)
        worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-12
    report(2, ok, f"50 instances, worst |q_infty - per-site product| = {worst:.2e}")
    assert worst <= 1e-12


# -------------------------------------------------------------------------
# criterion 3: flagship expansion, exact path
# -------------------------------------------------------------------------

FLAGSHIP_Q1 = 0.015625
FLAGSHIP_QINF = 0.140625


@pytest.fixture(scope="module")
def flagship_residuals():
    model, sample = flagship_model()
    out = {}
    for rho in (100.0, 1000.0, 10000.0):
        q = absorption_value(sample, model.with_rho(rho))
        out[rho] = rho * (q - FLAGSHIP_QINF)
    return out


def test_criterion3_scaled_residual_converges_to_q1(flagship_residuals):
    gaps = {rho: abs(r - FLAGSHIP_Q1) for rho, r in flagship_residuals.items()}
    ok = gaps[10000.0] <= 2e-6 and all(
        abs(flagship_residuals[rho] - FLAGSHIP_Q1) < 1e-3 for rho in flagship_residuals
    )
    report(
        3,
        ok,
        "rho*(q - q_infty) = "
        + ", ".join(f"{r:.9f} @ rho={rho:g}" for rho, r in sorted(flagship_residuals.items()))
        + f" -> q1 = {FLAGSHIP_Q1}",
    )
    assert ok


def test_criterion3_residuals_decreasing(flagship_residuals):
    gaps = [abs(flagship_residuals[rho] - FLAGSHIP_Q1) for rho in (100.0, 1000.0, 10000.0)]
    ok = gaps[0] > gaps[1] > gaps[2]
    report(3, ok, f"|rho(q-q_infty) - q1| = {gaps[0]:.3e} > {gaps[1]:.3e} > {gaps[2]:.3e}")
    assert ok


def test_criterion3_decade_ratio_1000_to_10000(flagship_residuals):
    gaps = [abs(flagship_residuals[rho] - FLAGSHIP_Q1) for rho in (1000.0, 10000.0)]
    ratio = gaps[0] / gaps[1]
    ok = 5.0 <= ratio <= 20.0
    report(3, ok, f"decade ratio 1e3 -> 1e4: {ratio:.2f} (band [5, 20], theoretical 10)")
    assert ok


def test_criterion3_decade_ratio_100_to_1000(flagship_residuals):
    """Documented genuine red.

    The bounded quantity is a constant of the flagship model, not of this
    implementation: exact rational Gaussian elimination of the 72-state
    absorption system gives rho*(q - q_infty) = 0.015677258 at rho=1e2 and
    0.015639413 at 1e3, so the residual ratio is 3.63.  Fitting q(rho) over
    eight rho values to a series in 1/rho yields second/third-order
    coefficients ~ +0.0154 / -1.16: at rho=1e2 the third-order term still
    cancels most of the second-order one, so the [5, 20] band (which presumes
    the 1/rho-dominated regime by rho=1e2) cannot be met; it is met one
    decade later (ratio 9.30), as the passing companion test shows.
    """
    gaps = [abs(flagship_residuals[rho] - FLAGSHIP_Q1) for rho in (100.0, 1000.0)]
    ratio = gaps[0] / gaps[1]
    ok = 5.0 <= ratio <= 20.0
    report(3, ok, f"decade ratio 1e2 -> 1e3: {ratio:.2f} (band [5, 20]) -- known red, see docstring")
    assert ok, (
        f"known red: first-decade residual ratio {ratio:.2f} is a model constant "
        "outside [5, 20]; see docstring and README"
    )


# -------------------------------------------------------------------------
# criterion 4: coupling correctness (exact rate-marginal equality)
# -------------------------------------------------------------------------


def test_criterion4_rate_marginal_equality():
    rng = np.random.default_rng(SEED + 4)
    checked = 0
    worst = 0.0
    while checked < 120:
        n = int(rng.integers(1, 4))
        model = random_model(rng, n, rho=float(rng.uniform(0.5, 50.0)))
        nu = random_fuzzy_measure(rng, model, max_mass=4)
        if nu.is_simple():
            continue
        checked += 1
        state = CoupledState.start(nu)
        trans = cmarg_transitions(state, model)
        left_proj: dict = {}
        right_proj: dict = {}
        for t, r in trans:
            if t.left != nu:
                left_proj[t.left] = left_proj.get(t.left, 0.0) + r
            if t.right != state.right:
                right_proj[t.right] = right_proj.get(t.right, 0.0) + r
        expected_left = dict(marg_transitions(nu, model))
        assert set(left_proj) == set(expected_left)
        for k, v in left_proj.items():
            worst = max(worst, abs(v - expected_left[k]) / max(1.0, abs(v)))
        if not state.right.is_simple():
            expected_right = dict(smarg_transitions(state.right, model))
            assert set(right_proj) == set(expected_right)
            for k, v in right_proj.items():
                worst = max(worst, abs(v - expected_right[k]) / max(1.0, abs(v)))
        else:
            assert right_proj == {}
    ok = worst <= 1e-12
    report(4, ok, f"{checked} coupled states, worst projected-rate deviation = {worst:.2e}")
    assert worst <= 1e-12


# -------------------------------------------------------------------------
# criterion 5: inclusion-exclusion machinery
# -------------------------------------------------------------------------


def test_criterion5_moebius_and_identities():
    rng = np.random.default_rng(SEED + 5)
    worst = 0.0
    for n in range(1, 7):
        for _ in range(10):
            g = rng.normal(size=1 << n)
            back = moebius_invert(superset_sum(g.tolist()))
            worst = max(worst, float(np.max(np.abs(np.array(back) - g))))
    identity_ok = True
    for n in range(2, 9):
        full = (1 << n) - 1
        for Bm in range(full + 1):
            nb = Bm.bit_count()
            if nb < 2:
                continue
            subs = [Am for Am in range(Bm + 1) if Am & Bm == Am]
            for i in range(n):
                if Bm >> i & 1:
                    s = sum(
                        (-1) ** (Am.bit_count() - 1)
                        for Am in subs
                        if Am >> i & 1 and Am.bit_count() >= 2
                    )
                    identity_ok &= s == -1
            s2 = sum(
                (Am.bit_count() - 1) * (-1) ** Am.bit_count()
                for Am in subs
                if Am.bit_count() >= 2
            )
            identity_ok &= s2 == 1
    ok = worst <= 1e-12 and identity_ok
    report(5, ok, f"roundtrip worst = {worst:.2e}; alternating-sum identities exact: {identity_ok}")
    assert worst <= 1e-12
    assert identity_ok


# -------------------------------------------------------------------------
# criterion 6: Theorem-route vs decomposition-route first-order coefficient
# -------------------------------------------------------------------------


def test_criterion6_decomposition_identity():
    rng = np.random.default_rng(SEED + 6)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 4))
        model = random_model(rng, n, rho=1.0)
        nu = random_exact_measure(rng, model, max_mass=4)
        ssq = SingleSiteQ(model)
        a = q1(nu, model, ssq)
        b = q1_via_decomposition(nu, model, ssq)
        worst = max(worst, abs(a - b))
    ok = worst <= 1e-12
    report(6, ok, f"50 instances, worst |direct - decomposition| = {worst:.2e}")
    assert worst <= 1e-12


# -------------------------------------------------------------------------
# criterion 7: Monte Carlo vs exact solver
# -------------------------------------------------------------------------


def _criterion7_instances():
    rows_np = [[0.9, 0.1], [0.2, 0.8]]
    out = []
    model, sample = flagship_model()
    out.append(("flagship-pim", model, sample))
    out.append(
        (
            "n2-nonpim",
            build_model([0.7, 1.3], [rows_np, [[0.6, 0.4], [0.3, 0.7]]], single_crossover(2, [0.8])),
            CountingMeasure([(exact_type({0: 0, 1: 1}), 2)]),
        )
    )
    M3 = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]]
    out.append(
        (
            "n2-mixed-alleles",
            build_model([0.5, 1.0], [M3, [[0.5, 0.5], [0.5, 0.5]]], single_crossover(2, [1.2])),
            CountingMeasure.from_particles([exact_type({0: 0, 1: 1}), exact_type({0: 2, 1: 0})]),
        )
    )
    out.append(
        (
            "n1-nonpim",
            build_model([1.5], [M3], RecombinationSpec(1, [])),
            CountingMeasure([(exact_type({0: 0}), 3)]),
        )
    )
    out.append(
        (
            "n2-pim-skew",
            build_model(
                [0.25, 0.25], [[[0.2, 0.8], [0.2, 0.8]]] * 2, single_crossover(2, [0.5])
            ),
            CountingMeasure.from_particles(
                [exact_type({0: 0, 1: 0}), exact_type({0: 0, 1: 0}), exact_type({1: 1})]
            ),
        )
    )
    out.append(
        (
            "n2-singleton-partition",
            build_model(
                [1.0, 1.0],
                [[[0.5, 0.5], [0.5, 0.5]]] * 2,
                RecombinationSpec(2, [(Partition((0b01, 0b10)), 0.9)]),
            ),
            CountingMeasure([(exact_type({0: 0, 1: 1}), 2)]),
        )
    )
    out.append(
        (
            "n2-hot-mutation",
            build_model([4.0, 4.0], [[[0.5, 0.5], [0.5, 0.5]]] * 2, single_crossover(2, [1.0])),
            CountingMeasure([(exact_type({0: 0, 1: 0}), 2)]),
        )
    )
    out.append(
        (
            "n3-crossover",
            build_model(
                [1.0, 1.0, 1.0],
                [[[0.5, 0.5], [0.5, 0.5]]] * 3,
                single_crossover(3, [0.5, 0.5]),
            ),
            CountingMeasure([(exact_type({0: 0, 1: 0, 2: 0}), 2)]),
        )
    )
    out.append(
        (
            "n2-partial-observation",
            build_model([1.0, 0.6], [[[0.5, 0.5], [0.5, 0.5]], [[0.7, 0.3], [0.2, 0.8]]], single_crossover(2, [1.5])),
            CountingMeasure.from_particles(
                [exact_type({0: 0, 1: 0}), exact_type({0: 1}), exact_type({1: 0})]
            ),
        )
    )
    rng = np.random.default_rng(SEED + 7)
    seen = 0
    while seen < 11:
        model = random_model(rng, 2, rho=1.0)
        nu = random_exact_measure(rng, model, max_mass=3)
        if nu.is_simple():
            continue
        out.append((f"n2-random-{seen}", model, nu))
        seen += 1
    return out


def test_criterion7_mc_vs_exact():
    failures = []
    count = 0
    worst_sigma = 0.0
    for name, model, sample in _criterion7_instances():
        for rho in (10.0, 1000.0):
            m = model.with_rho(rho)
            exact = absorption_value(sample, m)
            est = estimate_q(sample, m, C7_REPS, seed=SEED, workers=MC_WORKERS)
            count += 1
            if est.stderr == 0.0:
                ok = est.mean == pytest.approx(exact, abs=1e-12)
                sigmas = 0.0
            else:
                sigmas = abs(est.mean - exact) / est.stderr
                ok = sigmas <= 4.0
            worst_sigma = max(worst_sigma, sigmas)
            if not ok:
                failures.append(f"{name}@rho={rho:g}: {sigmas:.2f} sigma")
    ok = count >= 20 and not failures
    report(7, ok, f"{count} instance/rho pairs at {C7_REPS} reps, worst deviation {worst_sigma:.2f} sigma")
    assert count >= 20
    assert not failures, failures


# -------------------------------------------------------------------------
# criteria 8 and 9: coupling-event formulas and failure scaling
# -------------------------------------------------------------------------


def _n3_instance_a():
    spec = single_crossover(3, [0.6, 1.3], 1000.0)
    model = build_model(
        [1.0, 0.8, 1.2],
        [[[0.5, 0.5], [0.5, 0.5]], [[0.6, 0.4], [0.3, 0.7]], [[0.5, 0.5], [0.5, 0.5]]],
        spec,
    )
    sample = CountingMeasure([(exact_type({0: 0, 1: 0, 2: 0}), 2)])
    return model, sample


def _n3_instance_b():
    spec = RecombinationSpec(
        3,
        [
            (Partition((0b001, 0b010, 0b100)), 0.5),
            (Partition((0b011, 0b100)), 0.7),
            (Partition((0b101, 0b010)), 0.3),
        ],
        1000.0,
    )
    model = build_model(
        [1.0, 1.0, 0.9],
        [[[0.5, 0.5], [0.5, 0.5]]] * 2 + [[[0.7, 0.3], [0.4, 0.6]]],
        spec,
    )
    sample = CountingMeasure.from_particles(
        [exact_type({0: 0, 1: 1, 2: 0}), exact_type({0: 0, 1: 1, 2: 0}), exact_type({0: 1, 1: 1})]
    )
    return model, sample


@pytest.fixture(scope="module")
def flagship_couple_1e3():
    model, sample = flagship_model(rho=1000.0)
    return (
        model,
        sample,
        estimate_coupling(sample, model, C8_REPS, seed=SEED, workers=MC_WORKERS),
    )


@pytest.fixture(scope="module")
def flagship_couple_1e2():
    model, sample = flagship_model(rho=100.0)
    return (
        model,
        sample,
        estimate_coupling(sample, model, C9_REPS_LOW_RHO, seed=SEED + 1, workers=MC_WORKERS),
    )


def _check_event_formulas(model, sample, stats, label):
    """Compare scaled empirical event frequencies with the leading
    coefficients; returns (list of check strings, list of failures)."""
    rho = model.recombination.rho
    spec = model.recombination
    checks = []
    failures = []

    def assert_close(name, coeff, stat):
        freq = 0.0 if stat is None else stat.freq
        se = 0.0 if stat is None else stat.freq_stderr
        scaled = rho * freq
        tol = max(4 * rho * se, 0.10 * coeff)
        ok = abs(scaled - coeff) <= tol
        checks.append(f"{name}: rho*freq={scaled:.4f} vs coeff={coeff:.4f} (tol {tol:.4f})")
        if not ok:
            failures.append(checks[-1])

    assert_close("bad1-total", prob_bad1_total(sample, spec), stats.events["bad1_first"])
    assert_close("bad2-total", prob_bad2_total(sample, spec), stats.events["bad2_first"])

    seen = set()
    for y, _ in sample.items:
        d = observed_sites(y)
        sub = d
        while True:
            if sub.bit_count() >= 2:
                from recoal.types import byte_mask

                x = y & byte_mask(sub)
                if x not in seen:
                    seen.add(x)
                    coeff = prob_bad1_witness(sample, x, spec)
                    stat = stats.bad1_witnesses.get((sub, x))
                    if coeff > 0:
                        assert_close(f"bad1[{x:#x}]", coeff, stat)
                    else:
                        # leading term cancels: the event carries only the
                        # un-quantified next-order mass
                        scaled = rho * (stat.freq if stat else 0.0)
                        se = stat.freq_stderr if stat else 0.0
                        ok = scaled <= max(4 * rho * se, 0.10 * prob_bad1_total(sample, spec))
                        checks.append(f"bad1[{x:#x}] zero-coeff: rho*freq={scaled:.4f}")
                        if not ok:
                            failures.append(checks[-1])
            if sub == 0:
                break
            sub = (sub - 1) & d
    for x_i, _ in sample.split_to_sites().items:
        site = observed_sites(x_i).bit_length() - 1
        mask = (x_i >> (8 * site)) & 0xFF
        coeff = prob_bad2_witness(sample, site, mask.bit_length() - 1, spec)
        stat = stats.bad2_witnesses.get((site, mask))
        if coeff > 0:
            assert_close(f"bad2[site {site}]", coeff, stat)
    return checks, failures


def test_criterion8_event_probability_formulas(flagship_couple_1e3):
    all_failures = []
    n_checks = 0
    instances = [
        ("flagship", *flagship_couple_1e3),
    ]
    for label, builder in (("n3-crossover", _n3_instance_a), ("n3-general", _n3_instance_b)):
        model, sample = builder()
        stats = estimate_coupling(sample, model, C8_REPS, seed=SEED, workers=MC_WORKERS)
        instances.append((label, model, sample, stats))
    for label, model, sample, stats in instances:
        checks, failures = _check_event_formulas(model, sample, stats, label)
        n_checks += len(checks)
        all_failures.extend(f"{label}: {f}" for f in failures)
    ok = not all_failures
    report(8, ok, f"{n_checks} formula checks at rho=1e3, {C8_REPS} reps each; failures: {all_failures or 'none'}")
    assert not all_failures, all_failures


def test_criterion9_coupling_failure_scaling(flagship_couple_1e3, flagship_couple_1e2):
    _, _, hi = flagship_couple_1e3
    _, _, lo = flagship_couple_1e2
    p_bad_lo = lo.events["bad"].freq
    p_bad_hi = hi.events["bad"].freq
    ratio_bad = p_bad_lo / p_bad_hi
    p_neither_lo = lo.events["neither"].freq
    p_neither_hi = hi.events["neither"].freq
    ratio_neither = p_neither_lo / p_neither_hi
    ok1 = 5.0 <= ratio_bad <= 20.0
    ok2 = 25.0 <= ratio_neither <= 400.0
    report(
        9,
        ok1 and ok2,
        f"P(coupling fails): {p_bad_lo:.4g} @1e2 vs {p_bad_hi:.4g} @1e3 (ratio {ratio_bad:.1f} in [5,20]); "
        f"P(neither): {p_neither_lo:.3g} vs {p_neither_hi:.3g} "
        f"(counts {lo.events['neither'].count}/{hi.events['neither'].count}, ratio {ratio_neither:.0f} in [25,400])",
    )
    assert ok1
    assert ok2


# -------------------------------------------------------------------------
# criterion 10: structural invariants
# -------------------------------------------------------------------------


def test_criterion10_structural_invariants():
    rng = np.random.default_rng(SEED + 10)

    def obs_count(m):
        return sum(c * observed_sites(x).bit_count() for x, c in m.items)

    # conservation per event class, fingerprinted by mass change
    conservation_ok = True
    for _ in range(40):
        n = int(rng.integers(1, 4))
        model = random_model(rng, n, rho=4.0)
        nu = random_fuzzy_measure(rng, model, max_mass=4)
        if nu.is_simple():
            continue
        src = obs_count(nu)
        for target, _ in marg_transitions(nu, model):
            if isinstance(target, Cemetery):
                continue
            if target.mass >= nu.mass:  # fragmentation or mutation
                conservation_ok &= obs_count(target) == src
            else:  # coalescence
                conservation_ok &= obs_count(target) <= src

    # split-consistency of the coupled run while coupled (asserted per step)
    for k in range(30):
        n = int(rng.integers(1, 4))
        model = random_model(rng, n, rho=float(rng.uniform(1.0, 100.0)))
        nu = random_fuzzy_measure(rng, model, max_mass=3)
        Simulator(model).run_coupled(
            nu, np.random.default_rng(k), check_coupling=True
        )

    # simplicity detection
    simple_ok = (
        CountingMeasure([(make_type({0: A}), 1), (make_type({1: B}), 1)]).is_simple()
        and not CountingMeasure([(make_type({0: A}), 2)]).is_simple()
        and not CountingMeasure(
            [(make_type({0: A, 1: B}), 1), (make_type({1: C}), 1)]
        ).is_simple()
    )

    # canonical determinism
    parts = [make_type({0: A}), make_type({1: B}), make_type({0: A, 1: B})]
    canon_ok = True
    for perm in itertools.permutations(parts):
        canon_ok &= CountingMeasure.from_particles(perm) == CountingMeasure.from_particles(parts)

    # bit-identical seed reproducibility, event streams and estimates
    model, sample = flagship_model(rho=50.0)
    r1 = simulate(sample, model, seed=9, dynamics="coupled")
    r2 = simulate(sample, model, seed=9, dynamics="coupled")
    repro_ok = r1.events == r2.events and r1.q_left == r2.q_left
    e1 = estimate_q(sample, model, 4000, seed=5, workers=1)
    e2 = estimate_q(sample, model, 4000, seed=5, workers=MC_WORKERS)
    repro_ok &= e1.mean == e2.mean and e1.stderr == e2.stderr

    ok = conservation_ok and simple_ok and canon_ok and repro_ok
    report(
        10,
        ok,
        f"conservation={conservation_ok}, split-consistency=checked, simplicity={simple_ok}, "
        f"canonical={canon_ok}, reproducibility={repro_ok}",
    )
    assert conservation_ok
    assert simple_ok
    assert canon_ok
    assert repro_ok
