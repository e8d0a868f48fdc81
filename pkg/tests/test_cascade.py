import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bogflow.cascade import (
    AdmissibilityError,
    IsospectralCollisionError,
    build_ground_state_vector,
    cascade_all_modes,
    feshbach_step,
    min_kinetic,
    number_expectation,
    run_pair_flow,
    solve_zm,
    verify_inverted_block_positivity,
    verify_property4_infspec,
)
from bogflow.fockspace import (
    ModelParams,
    ModePair,
    PotentialSpec,
    assemble_hbog,
    build_symmetric_sector_basis,
    ground_state_exact,
    pair_tridiagonal,
)
from bogflow.threemode import (
    CoefficientSet,
    block_bound_rhs,
    f_of_z,
    solve_ground_energy,
    x_sequence,
)

K2 = (2 * math.pi) ** 2


def two_pair_spec(N=20, eps=(0.1, 0.1)):
    pairs = [ModePair.on_lattice((j + 1,), 1.0, eps=e) for j, e in enumerate(eps)]
    return PotentialSpec(ModelParams(N, 1, 1.0), pairs)


@pytest.fixture(scope="module")
def two_pair():
    spec = two_pair_spec()
    return spec, cascade_all_modes(spec)


# -- generic Feshbach map -------------------------------------------------------------


def test_feshbach_diagonal_is_plain_restriction():
    K = np.diag([1.0, 2.0, 3.0, 4.0])
    F = feshbach_step(K, np.array([0, 2]), np.array([1, 3]), 0.5)
    assert np.array_equal(F, np.diag([0.5, 2.5]))


def test_feshbach_singular_complement():
    with pytest.raises(IsospectralCollisionError) as info:
        feshbach_step(np.diag([1.0, 2.0]), np.array([0]), np.array([1]), 2.0)
    assert info.value.z == 2.0


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_feshbach_isospectrality(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6))
    K = A + A.T
    P, Pbar = np.array([0, 1]), np.array([2, 3, 4, 5])
    lam = np.linalg.eigvalsh(K)
    comp = np.linalg.eigvalsh(K[np.ix_(Pbar, Pbar)])
    for z in lam:
        if np.min(np.abs(comp - z)) < 1e-3:
            continue
        F = feshbach_step(K, P, Pbar, z)
        assert np.min(np.abs(np.linalg.eigvalsh(F))) <= 1e-8 * (1 + np.abs(K).max())
    z = 0.5 * (lam[0] + lam[1])
    if np.min(np.abs(comp - z)) > 1e-3:
        assert np.min(np.abs(np.linalg.eigvalsh(feshbach_step(K, P, Pbar, z)))) > 1e-10


def test_chain_on_tridiagonal_gives_f_eta_projector():
    N = 30
    phi = 10 * K2
    spec = PotentialSpec.single_pair(N, K2, phi)
    T = pair_tridiagonal(spec, 0).to_dense()
    z = solve_ground_energy(N, K2, phi).z_star - 0.3 * phi
    K = T - z * np.eye(len(T))
    while K.shape[0] > 1:
        n = K.shape[0]
        K = feshbach_step(K, np.arange(n - 1), np.array([n - 1]))
    assert K[0, 0] == pytest.approx(f_of_z(z, N, K2, phi), rel=1e-10)


# -- pair flow ----------------------------------------------------------------------------


def test_flow_matches_scalar_recursion():
    N, phi = 60, 10 * K2
    spec = PotentialSpec.single_pair(N, K2, phi)
    for z in (-500.0, -300.0, solve_ground_energy(N, K2, phi).z_star - 1.0):
        flow = run_pair_flow(spec, None, 1, z)
        assert flow.f_value() == pytest.approx(f_of_z(z, N, K2, phi), rel=1e-10)


def test_flow_blocks_symmetric_and_base_gamma(two_pair):
    spec, res = two_pair
    s = res.steps[1]
    flow = run_pair_flow(spec, None, 2, s.z_step, res.steps[0].z_total, res.steps[0].vector)
    for B in flow.pivots:
        assert np.array_equal(B, B.T)
    base = flow.w_star(2).T @ flow.resolvent(0) @ flow.w_star(2)
    assert np.allclose(flow.gamma(2), base, rtol=1e-12, atol=0)
    assert not flow.gamma(0).any()


def test_gamma_recursion_equals_direct_inversion(two_pair):
    spec, res = two_pair
    s = res.steps[1]
    flow = run_pair_flow(spec, None, 2, s.z_step - 5.0, res.steps[0].z_total,
                         res.steps[0].vector)
    H = flow.H - flow.w * np.eye(len(flow.H))
    lv = flow.projectors.levels
    for r in range(0, flow.top):
        high = np.concatenate(lv[r + 1:])
        inv = np.linalg.inv(H[np.ix_(high, high)])
        n = len(lv[r + 1])
        direct = flow.couplings[r].T @ inv[:n, :n] @ flow.couplings[r]
        G = flow.gammas[r]
        assert np.abs(G - direct).max() <= 1e-10 * np.abs(direct).max()


def test_repeated_feshbach_steps_equal_block_elimination(two_pair):
    spec, res = two_pair
    s = res.steps[1]
    flow = run_pair_flow(spec, None, 2, s.z_step - 3.0, res.steps[0].z_total,
                         res.steps[0].vector)
    K = flow.H - flow.w * np.eye(len(flow.H))
    lv = flow.projectors.levels
    order = list(range(len(K)))
    for r in range(flow.top, 0, -1):
        keep = [order.index(x) for x in np.concatenate(lv[:r])]
        drop = [order.index(x) for x in lv[r]]
        K = feshbach_step(K, np.array(keep), np.array(drop))
        order = list(np.concatenate(lv[:r]))
    assert np.allclose(K, flow.k_final, rtol=0, atol=1e-9 * np.abs(K).max())
    P = flow.projectors
    f = feshbach_step(K, P.prev[:, None], P.bar)[0, 0]
    assert f == pytest.approx(flow.f_value(), rel=1e-9)


def test_projector_invariants(two_pair):
    spec, res = two_pair
    flow = run_pair_flow(spec, None, 2, res.steps[1].z_step, res.steps[0].z_total,
                         res.steps[0].vector)
    P = flow.projectors
    N = spec.N
    for i in range(2, N + 1, 2):
        union = np.union1d(P.q_low(i), P.q_high(i))
        assert np.array_equal(union, np.sort(P.q_high(i - 2)))
        assert len(P.q_odd(i)) == 0
    assert np.linalg.matrix_rank(P.p_prev()) == 1
    assert np.allclose(P.p_prev() + P.p_bar(), np.eye(len(P.prev)))


def test_neumann_partial_sums_converge_monotonically():
    N, phi = 40, 10 * K2
    spec = PotentialSpec.single_pair(N, K2, phi)
    flow = run_pair_flow(spec, None, 1, solve_ground_energy(N, K2, phi).z_star)
    for i in (10, 20, 38):
        err = flow.neumann_errors(i, 12)
        assert np.all(np.diff(err) < 0)
        assert err[-1] < 1e-3 * err[0]


def test_block_and_gamma_bounds():
    N, phi = 40, 10 * K2
    spec = PotentialSpec.single_pair(N, K2, phi)
    flow = run_pair_flow(spec, None, 1, solve_ground_energy(N, K2, phi).z_star)
    co = CoefficientSet.from_eps(0.1)
    X = x_sequence(N, co)
    for i in range(2, N - 1, 2):
        assert flow.block_norm_product(i) <= block_bound_rhs(i, N, co)
    for i in range(0, N - 1, 2):
        assert flow.check_gamma_norm(i) <= (1 + 1e-12) / X.at(i)


def test_inadmissible_z_raises_with_index():
    spec = PotentialSpec.single_pair(20, K2, 10 * K2)
    with pytest.raises(AdmissibilityError) as info:
        run_pair_flow(spec, None, 1, 1e6)
    assert info.value.i is not None


def test_later_steps_need_previous_state():
    with pytest.raises(ValueError):
        run_pair_flow(two_pair_spec(), None, 2, -100.0)


# -- fixed points and vectors ------------------------------------------------------------


def test_first_step_equals_single_pair_fixed_point():
    N, phi = 40, 10 * K2
    spec = PotentialSpec.single_pair(N, K2, phi)
    zm, _ = solve_zm(spec, None, 1)
    assert zm.z == pytest.approx(solve_ground_energy(N, K2, phi).z_star, abs=2e-12 * phi)
    assert zm.z_total == zm.z


def test_two_pair_energy_and_vector(two_pair):
    spec, res = two_pair
    basis = build_symmetric_sector_basis(spec)
    H = assemble_hbog(spec, basis).to_dense()
    lam, v = ground_state_exact(H)
    assert abs(res.energy - lam) <= 1e-8 * abs(lam)
    assert res.energy == pytest.approx(-1157.22013949164, rel=1e-9)
    psi = res.vector / np.linalg.norm(res.vector)
    assert abs(psi @ v) >= 1 - 1e-6
    norm1 = np.abs(H).sum(axis=0).max()
    assert np.linalg.norm(H @ psi - res.energy * psi) <= 1e-8 * norm1


def test_vector_leading_component(two_pair):
    spec, res = two_pair
    assert res.steps[0].vector[0] == 1.0
    prev = res.steps[0].vector
    lv0 = build_symmetric_sector_basis(spec).level(1, 0)
    v0 = res.steps[1].vector[lv0]
    assert prev @ v0 == pytest.approx(prev @ prev, rel=1e-12)


def test_vector_needs_matching_z(two_pair):
    spec, res = two_pair
    flow = run_pair_flow(spec, None, 1, res.steps[0].z_step)
    with pytest.raises(ValueError):
        build_ground_state_vector(flow, flow.z + 1.0)


def test_norm_chain_and_number_bound(two_pair):
    spec, res = two_pair
    norms = res.norms
    assert all(b >= a for a, b in zip(norms, norms[1:]))
    for s in res.steps:
        assert s.n_plus <= s.n_plus_bound
    assert res.gaps.delta0 == min_kinetic(spec) == pytest.approx(K2)


def test_number_expectation_on_eta():
    spec = two_pair_spec(10)
    b = build_symmetric_sector_basis(spec)
    e = np.zeros(len(b))
    e[0] = 1.0
    assert number_expectation(b, e) == 0.0


def test_rank_one_final_operator(two_pair):
    spec, res = two_pair
    for s in res.steps:
        assert s.rank_one_ratio <= 1e-10
        assert s.f_residual <= 1e-12 * spec.pairs[s.m - 1].phi


def test_positivity_report(two_pair):
    spec, res = two_pair
    s1, s2 = res.steps
    flow = run_pair_flow(spec, None, 2, s2.z_step, s1.z_total, s1.vector)
    gap = s1.gap_sector
    below = verify_inverted_block_positivity(flow, s2.z_step - 1e-3 * spec.pairs[1].phi,
                                             s1.vector, gap)
    assert below.passed and below.threshold == pytest.approx(0.5 * gap)
    further = verify_inverted_block_positivity(flow, s2.z_step - 50.0, s1.vector, gap)
    assert further.smallest > below.smallest
    above = verify_inverted_block_positivity(flow, s2.z_step + 5 * gap, s1.vector, gap)
    assert not above.passed


def test_gap_ledger(two_pair):
    spec, res = two_pair
    g = res.gaps
    assert all(x > 0 for x in g.measured_sector)
    assert g.C_III == pytest.approx(1 + 1 / (0.5 * g.delta0))
    rec = g.recursion(spec.N, 2)
    ln = math.log(spec.N)
    assert rec[1] == pytest.approx(0.5 * g.delta0 - 1 / ln ** 0.5 - 4 * g.C_III / ln ** 0.25)
    assert g.U == [p.k2 + p.phi for p in spec.pairs]


def test_single_pair_cascade_reduces_to_three_mode():
    N, phi = 60, 10 * K2
    spec = PotentialSpec.single_pair(N, K2, phi)
    res = cascade_all_modes(spec)
    assert len(res.steps) == 1
    assert res.energy == pytest.approx(solve_ground_energy(N, K2, phi).z_star, abs=1e-11 * phi)


def test_step_shift_shrinks_with_N():
    shifts = []
    for N in (20, 40, 80):
        res = cascade_all_modes(two_pair_spec(N), with_oracle=False)
        shifts.append(abs(res.steps[1].z_step - res.steps[1].z_single))
    assert shifts[0] > shifts[1] > shifts[2]


def test_cascade_is_deterministic():
    spec = two_pair_spec(12)
    a = cascade_all_modes(spec)
    b = cascade_all_modes(spec)
    assert np.array_equal(a.vector, b.vector) and a.energy == b.energy


# -- kinetic-stripped lower bound ----------------------------------------------------------


def test_property4_single_pair():
    spec = PotentialSpec(ModelParams(100, 1, 1.0), [ModePair.on_lattice((1,), 1.0, eps=0.1)])
    rep = verify_property4_infspec(spec, 1)
    assert rep.passed
    assert rep.deficit >= rep.bound
    assert abs(rep.deficit) <= 1e-9 * abs(rep.z_bog)


def test_property4_two_pairs(two_pair):
    spec, res = two_pair
    rep = verify_property4_infspec(spec, 2, res.energy)
    assert rep.passed and rep.bound == pytest.approx(-2 / math.log(20) ** 0.125)
