import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bogflow.cascade import cascade_all_modes, run_pair_flow
from bogflow.fockspace import ModelParams, ModePair, PotentialSpec
from bogflow.threemode import AdmissibilityError, bogoliubov_energy, check_g, ww_star
from bogflow.truncation import (
    TruncationParams,
    admissible_top,
    bare_operator_expansion,
    dn0_sensitivity,
    g_tau_dn0,
    gamma_tau_h,
    truncation_decay,
    ww_star_dn0,
    zeta_scan,
)

K2 = (2 * math.pi) ** 2
PHI = 10 * K2


def single(N):
    return PotentialSpec.single_pair(N, K2, PHI)


def flow_at_root(N):
    res = cascade_all_modes(single(N), with_oracle=False)
    return run_pair_flow(single(N), None, 1, res.energy)


# -- params -------------------------------------------------------------------------


def test_params_validation():
    with pytest.raises(ValueError):
        TruncationParams(3, 2)
    with pytest.raises(ValueError):
        TruncationParams(2, 0)
    with pytest.raises(ValueError):
        TruncationParams(2, 2, zeta=0.0)
    with pytest.raises(ValueError):
        TruncationParams(2, 2, dn0=3.0)


def test_default_params_are_even():
    assert TruncationParams.default(100).h == 2
    p = TruncationParams.default(10 ** 6)  # sqrt(ln N) = 3.7 -> 3 -> 4
    assert p.h == p.jbar == 4


# -- [Gamma]_{tau_h} ------------------------------------------------------------------


def test_base_case_h2():
    flow = flow_at_root(30)
    g = gamma_tau_h(flow, 2)
    i = 30 - 2 - 2
    base = flow.w_star(i).T @ flow.resolvent(i - 2) @ flow.w_star(i)
    assert np.array_equal(g.family[i], base)


def test_two_paths_and_monotone_decay():
    flow = flow_at_root(60)
    res = [gamma_tau_h(flow, h) for h in (2, 4, 6, 8)]
    for g in res:
        assert g.identity_error <= 1e-12
    r = [g.residual for g in res]
    assert all(b < a for a, b in zip(r, r[1:]))
    fit = truncation_decay(flow, (2, 4, 6, 8), 0.1)
    assert fit.rate < 1 and fit.c > 0


def test_two_paths_on_matrix_blocks():
    pairs = [ModePair.on_lattice((1,), 1.0, eps=0.1), ModePair.on_lattice((2,), 1.0, eps=0.1)]
    spec = PotentialSpec(ModelParams(20, 1, 1.0), pairs)
    res = cascade_all_modes(spec, with_oracle=False)
    s1, s2 = res.steps
    flow = run_pair_flow(spec, None, 2, s2.z_step, s1.z_total, s1.vector)
    prev = math.inf
    for h in (2, 4, 6, 8, 10):
        g = gamma_tau_h(flow, h)
        assert g.identity_error <= 1e-12
        assert g.residual < prev
        prev = g.residual


def test_window_too_deep():
    with pytest.raises(ValueError):
        gamma_tau_h(flow_at_root(10), 8)


def test_full_window_converges_to_exact_gamma():
    flow = flow_at_root(16)
    r8, r12 = gamma_tau_h(flow, 8).residual, gamma_tau_h(flow, 12)
    assert r12.residual < r8
    assert r12.residual <= 1e-5 * np.linalg.norm(r12.exact, 2)


# -- scalar Delta n_0 family ----------------------------------------------------------


def test_ww_dn0_reduces_to_plain():
    N, z = 40, bogoliubov_energy(K2, PHI) - 0.3 * PHI
    for i in range(4, N - 1, 2):
        assert ww_star_dn0(i, z, N, K2, PHI, 0.0) == pytest.approx(ww_star(i, z, N, K2, PHI),
                                                                   rel=1e-14)


def test_ww_dn0_dominated_by_shifted_plain():
    N, h = 60, 6
    z = bogoliubov_energy(K2, PHI) - 0.3 * PHI
    for dn0 in (0.0, 1.0, 2.5, 6.0):
        for i in range(N - h - 2, N - 1, 2):
            assert ww_star_dn0(i, z, N, K2, PHI, dn0) <= ww_star(i, z + (h + 4) * PHI / N,
                                                                 N, K2, PHI)


def test_gtau_base_and_full_window():
    N = 30
    z = bogoliubov_energy(K2, PHI) - 0.3 * PHI
    t = g_tau_dn0(z, N, K2, PHI, 6, 0.0)
    assert t.at(N - 10) == 1.0
    assert np.all(t.values >= 1) and np.all(np.isfinite(t.values))
    # the admissible window shrinks with h; a full window needs a lower z
    z = bogoliubov_energy(K2, PHI) - PHI
    full = g_tau_dn0(z, N, K2, PHI, N - 4, 0.0)
    ref = check_g(z, N, K2, PHI)
    for i in range(0, N - 1, 2):
        assert full.at(i) == pytest.approx(ref.at(i), rel=1e-12)


@given(st.floats(0.0, 5.0), st.floats(0.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_gtau_nonincreasing_in_dn0(d, step):
    N, h = 60, 6
    z = bogoliubov_energy(K2, PHI) - 0.3 * PHI
    a = g_tau_dn0(z, N, K2, PHI, h, d).values
    b = g_tau_dn0(z, N, K2, PHI, h, min(d + step, h)).values
    assert np.all(b <= a * (1 + 1e-14))


def test_gtau_range_check():
    N, h = 60, 6
    with pytest.raises(AdmissibilityError):
        g_tau_dn0(admissible_top(N, K2, PHI, h) + 1.0, N, K2, PHI, h, 0.0)


def test_sensitivity_report():
    N, h = 60, 6
    z = bogoliubov_energy(K2, PHI) - 0.3 * PHI
    rep = dn0_sensitivity(z, N, K2, PHI, h)
    assert rep.derivatives[0] == 0.0
    assert np.all(np.isfinite(rep.derivatives))
    assert rep.within(rep.K_fit)
    assert rep.K_fit > 0


# -- bare expansion -------------------------------------------------------------------


def test_bare_expansion_two_terms_structure():
    N = 20
    spec = single(N)
    res = cascade_all_modes(spec, with_oracle=False)
    out = bare_operator_expansion(spec, res, TruncationParams(2, 1))
    e = bogoliubov_energy(K2, PHI)
    w1 = (PHI / N) * math.sqrt(N * (N - 1))
    r1 = 1.0 / ((K2 + PHI * (N - 2) / N) * 2 - e)
    # level 2 resolvent, the only Gamma~ contribution at depth h = 2
    w2 = (PHI / N) * math.sqrt((N - 2) * (N - 3)) * 2
    r2 = 1.0 / ((K2 + PHI * (N - 4) / N) * 4 - e)
    w3 = (PHI / N) * math.sqrt((N - 4) * (N - 5)) * 3
    r3 = 1.0 / ((K2 + PHI * (N - 6) / N) * 6 - e)
    inner = w3 * r3 * w3
    g = w2 * (r2 + r2 * inner * r2) * w2
    binv = r1 + r1 * g * r1 + r1 * g * r1 * g * r1
    assert out.vector[0] == 1.0
    assert out.vector[1] == pytest.approx(-binv * w1, rel=1e-12)
    assert not out.vector[2:].any()


def test_exact_substitution_reproduces_vector():
    pairs = [ModePair.on_lattice((1,), 1.0, eps=0.1), ModePair.on_lattice((2,), 1.0, eps=0.2)]
    spec = PotentialSpec(ModelParams(16, 1, 1.0), pairs)
    res = cascade_all_modes(spec, with_oracle=False)
    out = bare_operator_expansion(spec, res, TruncationParams(2, 1), exact=True)
    assert out.error <= 1e-10


def test_zeta_scan_reaches_target():
    scan = zeta_scan(single, (50, 100), TruncationParams(6, 6))
    assert all(e <= 0.1 for e in scan.errors)
    assert scan.N_zeta == 50
