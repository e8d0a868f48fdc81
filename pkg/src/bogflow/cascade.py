"""Feshbach-Schur flow on sector matrices and the mode-by-mode ground state.

Step m (1-based) adds pair m to the Hamiltonian of the previous steps.  Its
sector is split into levels r = p_m = 0..N/2; level r is what the flow calls
Q^{(i,i+1)} with i = N - 2r.  The flow eliminates levels from r = N/2 down to
r = 1, which leaves K^{(N-2)} on level r = 0 (the previous sector), and a last
map onto the previous ground state psi_prev yields f(z) P_psi_prev.

Block notation used below, with w = z + z_prev:
    A_r  = W* block from level r to level r+1
    R_r  = (H_rr - w)^{-1}
    G_r  = A_r^T B_{r+1}^{-1} A_r            (Gamma at level r)
    B_r  = H_rr - w - G_r                    (B_{N/2} = H_top - w)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .fockspace import (
    PotentialSpec,
    SectorBasis,
    assemble_hbog,
    build_symmetric_sector_basis,
    ground_state_exact,
    lowest_eigenpairs,
)
from .threemode import AdmissibilityError, RegimeError, bisect_decreasing, solve_ground_energy


class IsospectralCollisionError(AdmissibilityError):
    """A complement block is (numerically) singular at the requested z."""

    def __init__(self, msg, i=None, z=None, eigenvalue=None):
        super().__init__(msg, i, z)
        self.eigenvalue = eigenvalue


SINGULAR_REL = 1e-10


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _check_invertible(block: np.ndarray, i, z, require_pd: bool):
    """Raise unless the block is safely invertible (and positive definite if asked)."""
    if block.size == 0:
        return math.inf
    eig = np.linalg.eigvalsh(_sym(block))
    thresh = SINGULAR_REL * max(float(np.abs(block).sum(axis=0).max()), 1e-300)
    lo = float(eig[0]) if require_pd else float(np.min(np.abs(eig)))
    if abs(lo) <= thresh or (require_pd and lo < 0 and abs(lo) <= thresh):
        raise IsospectralCollisionError(
            f"complement block is singular at z={z} (i={i}, eigenvalue {lo:.3e})", i, z, lo)
    if require_pd and lo < 0:
        raise AdmissibilityError(
            f"complement block at i={i} is not positive definite for z={z} "
            f"(smallest eigenvalue {lo:.6g})", i, z)
    return lo


def _frame(P, n):
    P = np.asarray(P)
    if P.ndim == 1:
        E = np.zeros((n, len(P)))
        E[P, np.arange(len(P))] = 1.0
        return E
    return P


def feshbach_step(K: np.ndarray, P, P_bar, z: float = 0.0) -> np.ndarray:
    """P(K-z)P - P K Pbar (Pbar (K-z) Pbar)^{-1} Pbar K P on the P-range.

    P and P_bar are either index arrays (coordinate projections) or matrices with
    orthonormal columns spanning complementary subspaces.  The complement block
    is inverted exactly by LU with partial pivoting.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    U, V = _frame(P, n), _frame(P_bar, n)
    Kz = K - z * np.eye(n)
    top = U.T @ Kz @ U
    if V.shape[1] == 0:
        return _sym(top)
    comp = V.T @ Kz @ V
    _check_invertible(comp, None, z, require_pd=False)
    cross = V.T @ Kz @ U
    return _sym(top - cross.T @ np.linalg.solve(comp, cross))


# ---------------------------------------------------------------------------
# projections and flow state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectorSet:
    """Level decomposition of step m and the final rank-one split of level 0."""

    m: int
    N: int
    levels: tuple  # levels[r] = basis indices with p_m = r
    prev: np.ndarray  # normalized previous ground state, level-0 coordinates
    bar: np.ndarray  # orthonormal complement of prev inside level 0 (columns)

    def level_of(self, i: int) -> int:
        if i % 2 or not 0 <= i <= self.N:
            raise ValueError(f"i={i} must be even in 0..N")
        return (self.N - i) // 2

    def q_low(self, i: int) -> np.ndarray:
        """States with N-i (or N-i-1, never realized here) particles in +-j_m."""
        return self.levels[self.level_of(i)]

    def q_odd(self, i: int) -> np.ndarray:
        """The N-i-1 slice of Q^{(i,i+1)}: empty because n_{+j} = n_{-j}."""
        return np.empty(0, dtype=np.int64)

    def q_high(self, i: int) -> np.ndarray:
        r = self.level_of(i)
        parts = [self.levels[s] for s in range(r)]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def p_prev(self) -> np.ndarray:
        """Rank-one projector onto prev, as a level-0 matrix."""
        return np.outer(self.prev, self.prev)

    def p_bar(self) -> np.ndarray:
        return self.bar @ self.bar.T


def build_projectors(basis: SectorBasis, m: int, prev_vector: np.ndarray) -> ProjectorSet:
    levels = tuple(basis.level(m - 1, r) for r in range(basis.N // 2 + 1))
    prev = np.asarray(prev_vector, float)
    if prev.shape != (len(levels[0]),):
        raise ValueError(f"previous vector has {prev.shape} entries, level 0 has {len(levels[0])}")
    prev = prev / np.linalg.norm(prev)
    bar = scipy.linalg.null_space(prev[None, :])
    return ProjectorSet(m, basis.N, levels, prev, bar)


@dataclass
class FlowState:
    spec: PotentialSpec
    basis: SectorBasis
    m: int
    z: float
    z_prev: float
    projectors: ProjectorSet
    H: np.ndarray = field(repr=False)
    diag_blocks: list = field(repr=False)  # H_rr
    couplings: list = field(repr=False)  # A_r, r = 0..N/2-1
    pivots: list = field(repr=False)  # B_r
    gammas: list = field(repr=False)  # G_r (None at the top level)

    @property
    def N(self) -> int:
        return self.basis.N

    @property
    def w(self) -> float:
        return self.z + self.z_prev

    @property
    def top(self) -> int:
        return self.N // 2

    def level(self, i: int) -> int:
        return self.projectors.level_of(i)

    # flow-index accessors -------------------------------------------------
    def shifted_block(self, i: int) -> np.ndarray:
        """H_rr - w at level i."""
        r = self.level(i)
        return self.diag_blocks[r] - self.w * np.eye(self.diag_blocks[r].shape[0])

    def resolvent(self, i: int) -> np.ndarray:
        return np.linalg.inv(self.shifted_block(i))

    def resolvent_sqrt(self, i: int) -> np.ndarray:
        lam, V = np.linalg.eigh(_sym(self.shifted_block(i)))
        if lam[0] <= 0:
            raise AdmissibilityError(f"H - w is not positive at i={i}", i, self.z)
        return (V / np.sqrt(lam)) @ V.T

    def w_star(self, i: int) -> np.ndarray:
        """W*_{i-2,i}: from level i (r) up to level i-2 (r+1)."""
        return self.couplings[self.level(i)]

    def gamma(self, i: int) -> np.ndarray:
        g = self.gammas[self.level(i)]
        n = self.diag_blocks[self.level(i)].shape[0]
        return np.zeros((n, n)) if g is None else g

    def k_block(self, i: int) -> np.ndarray:
        """Q^{(i,i+1)} K^{(i-2)} Q^{(i,i+1)} = B at level i."""
        return self.pivots[self.level(i)]

    @property
    def k_final(self) -> np.ndarray:
        """K^{(N-2)} on level 0."""
        return self.pivots[0]

    # diagnostics -------------------------------------------------------------
    def block_norm_product(self, i: int) -> float:
        """||R_i^1/2 W_{i,i-2} R_{i-2}^1/2|| ||R_{i-2}^1/2 W*_{i-2,i} R_i^1/2||."""
        a = self.resolvent_sqrt(i - 2) @ self.w_star(i) @ self.resolvent_sqrt(i)
        s = np.linalg.norm(a, 2)
        return float(s * s)

    def check_gamma_norm(self, i: int) -> float:
        """|| sum_l (R^1/2 Gamma R^1/2)^l || at level i, summed in closed form."""
        Rh = self.resolvent_sqrt(i)
        X = Rh @ self.gamma(i) @ Rh
        n = X.shape[0]
        lam = np.linalg.eigvalsh(_sym(X))
        if lam[-1] >= 1:
            raise AdmissibilityError(f"Neumann series diverges at i={i}", i, self.z)
        return float(np.linalg.norm(np.linalg.inv(np.eye(n) - X), 2))

    def neumann_errors(self, i: int, terms: int) -> np.ndarray:
        """|| sum_{l<=L} R (Gamma R)^l - B^{-1} || for L = 0..terms-1."""
        R = self.resolvent(i)
        GR = self.gamma(i) @ R
        exact = np.linalg.inv(self.k_block(i))
        out, term, acc = [], R.copy(), np.zeros_like(R)
        for _ in range(terms):
            acc = acc + term
            out.append(np.linalg.norm(acc - exact, 2))
            term = term @ GR
        return np.array(out)

    def final_operator(self) -> tuple[float, np.ndarray]:
        """(f, K^{(N)}) with K^{(N)} = f P_prev on level-0 coordinates."""
        P = self.projectors
        f = float(feshbach_step(self.k_final, P.prev[:, None], P.bar)[0, 0])
        return f, f * np.outer(P.prev, P.prev)

    def f_value(self) -> float:
        return self.final_operator()[0]

    def pbar_block(self) -> np.ndarray:
        B = self.projectors.bar
        return _sym(B.T @ self.k_final @ B)


def _sub_basis(spec: PotentialSpec, basis: SectorBasis | None, m: int):
    spec_m = spec.truncated(m)
    if basis is None or basis.mode_count != m or basis.N != spec.N:
        basis = build_symmetric_sector_basis(spec_m)
    return spec_m, basis


def run_pair_flow(spec: PotentialSpec, basis: SectorBasis | None, m: int, z: float,
                  z_prev: float = 0.0, prev_vector: np.ndarray | None = None,
                  H: np.ndarray | None = None) -> FlowState:
    """Eliminate the levels of pair m from the top down at w = z + z_prev.

    Every pivot B_r with r >= 1 must be positive definite; otherwise z lies above
    the admissible half-line and AdmissibilityError (or its collision subclass)
    is raised with the flow index i = N - 2r attached.
    """
    spec_m, basis = _sub_basis(spec, basis, m)
    if H is None:
        H = assemble_hbog(spec_m, basis).to_dense()
    if prev_vector is None:
        if m != 1:
            raise ValueError("steps after the first need the previous ground state")
        prev_vector = np.ones(1)
    proj = build_projectors(basis, m, prev_vector)
    N = basis.N
    w = z + z_prev
    levels = proj.levels
    top = N // 2
    diag = [H[np.ix_(lv, lv)] for lv in levels]
    coup = [H[np.ix_(levels[r + 1], levels[r])] for r in range(top)]
    pivots = [None] * (top + 1)
    gammas = [None] * (top + 1)
    pivots[top] = diag[top] - w * np.eye(len(levels[top]))
    _check_invertible(pivots[top], 0, z, require_pd=True)
    for r in range(top - 1, -1, -1):
        A = coup[r]
        G = _sym(A.T @ np.linalg.solve(pivots[r + 1], A))
        gammas[r] = G
        pivots[r] = _sym(diag[r] - w * np.eye(len(levels[r])) - G)
        if r >= 1:
            _check_invertible(pivots[r], N - 2 * r, z, require_pd=True)
    return FlowState(spec_m, basis, m, z, z_prev, proj, H, diag, coup, pivots, gammas)


def build_ground_state_vector(flow: FlowState, z: float | None = None,
                              prev_vector: np.ndarray | None = None) -> np.ndarray:
    """psi = sum_r v_r with v_0 = [1 - (Pbar K Pbar)^{-1} Pbar K] psi_prev and
    v_r = -B_r^{-1} W* v_{r-1}; un-normalized, m-pair sector coordinates."""
    if z is not None and z != flow.z:
        raise ValueError("the flow was computed at a different z")
    P = flow.projectors
    if prev_vector is None:
        prev_vector = P.prev
    prev = np.asarray(prev_vector, float)
    K = flow.k_final
    v = prev.copy()
    if P.bar.shape[1]:
        Kb = P.bar.T @ K @ P.bar
        _check_invertible(Kb, flow.N - 2, flow.z, require_pd=False)
        v = v - P.bar @ np.linalg.solve(Kb, P.bar.T @ (K @ prev))
    psi = np.zeros(len(flow.basis))
    psi[P.levels[0]] = v
    for r in range(1, flow.top + 1):
        v = -np.linalg.solve(flow.pivots[r], flow.couplings[r - 1] @ v)
        psi[P.levels[r]] = v
    return psi


# ---------------------------------------------------------------------------
# fixed points and the cascade
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZmResult:
    m: int
    z: float  # z^{(m)}
    z_total: float  # z^Bog_{j1..jm}
    z_single: float  # z_m of the isolated pair
    bracket: tuple[float, float]
    iterations: int
    residual: float


@dataclass
class CascadeStep:
    m: int
    z_single: float
    z_step: float
    z_total: float
    vector: np.ndarray = field(repr=False)
    norm: float = 1.0
    bracket: tuple[float, float] = (math.nan, math.nan)
    f_residual: float = math.nan
    gap_prev: float = math.nan  # Delta_{m-1} used for the bracket and positivity
    oracle_energy: float = math.nan
    overlap: float = math.nan
    residual: float = math.nan
    h_norm1: float = math.nan
    n_plus: float = math.nan
    n_plus_bound: float = math.nan
    rank_one_ratio: float = math.nan
    positivity_min: float = math.nan
    positivity_threshold: float = math.nan
    gap_sector: float = math.nan
    gap_embedded: float = math.nan


@dataclass
class GapLedger:
    delta0: float
    gamma: float = 0.5
    C_perp: float = 1.0
    C_I: float = 1.0
    C_II: float = 1.0
    measured_sector: list = field(default_factory=list)
    measured_embedded: list = field(default_factory=list)
    U: list = field(default_factory=list)  # k^2 + phi per step

    @property
    def C_III(self) -> float:
        return self.C_I + self.C_II ** 2 / ((1 - self.gamma) * self.delta0)

    def recursion(self, N: int, M: int) -> list[float]:
        """Delta_m = gamma Delta_{m-1} - C_perp/(ln N)^1/2 - (2/gamma)^m C_III/(ln N)^1/4."""
        ln = math.log(N)
        out = [self.delta0]
        for m in range(1, M + 1):
            out.append(self.gamma * out[-1] - self.C_perp / ln ** 0.5
                       - (2 / self.gamma) ** m * self.C_III / ln ** 0.25)
        return out


@dataclass
class GroundStateResult:
    spec: PotentialSpec
    steps: list
    gaps: GapLedger

    @property
    def energy(self) -> float:
        return self.steps[-1].z_total

    @property
    def vector(self) -> np.ndarray:
        return self.steps[-1].vector

    @property
    def norms(self) -> list[float]:
        return [1.0] + [s.norm for s in self.steps]


def min_kinetic(spec: PotentialSpec) -> float:
    """Delta_0: the smallest kinetic energy among the listed pairs."""
    return min(p.k2 for p in spec.pairs)


def solve_zm(spec: PotentialSpec, basis: SectorBasis | None, m: int,
             prev: GroundStateResult | None = None, gap_prev: float | None = None,
             gamma: float = 0.5, tol: float | None = None) -> tuple[ZmResult, FlowState]:
    """Root z^{(m)} of f^Bog(z + z_prev) by bisection on [z_m - phi, z_m + gamma Delta - margin]."""
    spec_m, basis = _sub_basis(spec, basis, m)
    pair = spec.pairs[m - 1]
    phi = pair.phi
    tol = 1e-12 * phi if tol is None else tol
    if m == 1:
        z_prev, prev_vec = 0.0, np.ones(1)
        gap = min_kinetic(spec) if gap_prev is None else gap_prev
    else:
        if prev is None or len(prev.steps) < m - 1:
            raise ValueError(f"step {m} needs the result of step {m - 1}")
        last = prev.steps[m - 2]
        z_prev, prev_vec = last.z_total, last.vector
        gap = last.gap_sector if gap_prev is None else gap_prev
    H = assemble_hbog(spec_m, basis).to_dense()
    z_m = solve_ground_energy(spec.N, pair.k2, phi, check_regime=False).z_star
    margin = 1e-6 * phi
    lo, hi = z_m - phi, z_m + gamma * gap - margin

    def f(z):
        return run_pair_flow(spec_m, basis, m, z, z_prev, prev_vec, H).f_value()

    width = phi
    for _ in range(60):
        try:
            if f(lo) > 0:
                break
        except AdmissibilityError:
            pass
        width *= 2
        lo = z_m - width
    else:
        raise RegimeError(f"step {m}: no positive f below z_m")
    try:
        top_val = f(hi)
    except AdmissibilityError:
        top_val = -math.inf
    if top_val > 0:
        raise RegimeError(f"step {m}: f has no sign change on [{lo}, {hi}]")
    z, val, iters = bisect_decreasing(f, lo, hi, tol)
    if not abs(val) <= tol:
        raise RegimeError(f"step {m}: bisection stalled at z={z} with |f|={abs(val):.3e}")
    flow = run_pair_flow(spec_m, basis, m, z, z_prev, prev_vec, H)
    return ZmResult(m, z, z + z_prev, z_m, (lo, hi), iters, abs(val)), flow


@dataclass(frozen=True)
class PositivityReport:
    smallest: float
    threshold: float
    passed: bool


def verify_inverted_block_positivity(flow: FlowState, z: float, prev_vector=None,
                                     delta_prev: float = math.nan,
                                     gamma: float = 0.5) -> PositivityReport:
    """Smallest eigenvalue of Pbar K^{(N-2)} Pbar at z against (1-gamma) Delta_{m-1}."""
    threshold = (1 - gamma) * delta_prev
    if prev_vector is None:
        prev_vector = flow.projectors.prev
    try:
        if z != flow.z or not np.allclose(prev_vector / np.linalg.norm(prev_vector),
                                          flow.projectors.prev):
            flow = run_pair_flow(flow.spec, flow.basis, flow.m, z, flow.z_prev,
                                 prev_vector, flow.H)
        block = flow.pbar_block()
    except AdmissibilityError as exc:
        return PositivityReport(getattr(exc, "eigenvalue", None) or -math.inf, threshold, False)
    smallest = float(np.linalg.eigvalsh(block)[0]) if block.size else math.inf
    return PositivityReport(smallest, threshold, bool(smallest >= threshold))


def number_expectation(basis: SectorBasis, psi: np.ndarray) -> float:
    """<psi, N_+ psi> / ||psi||^2 with N_+ = sum over nonzero modes."""
    weights = 2 * basis.states.sum(axis=1)
    return float(weights @ (psi * psi) / (psi @ psi))


def _sector_gap(H: np.ndarray) -> float:
    if H.shape[0] < 2:
        return math.inf
    vals, _ = lowest_eigenpairs(H, 2)
    return float(vals[1] - vals[0])


def cascade_all_modes(spec: PotentialSpec, gamma: float = 0.5, tol_rel: float = 1e-12,
                      C_perp: float = 1.0, C_I: float = 1.0, C_II: float = 1.0,
                      with_oracle: bool = True) -> GroundStateResult:
    """psi_{j1..jM} = T_M ... T_1 eta with per-step fixed points and checks."""
    ledger = GapLedger(min_kinetic(spec), gamma, C_perp, C_I, C_II)
    result = GroundStateResult(spec, [], ledger)
    full_basis = build_symmetric_sector_basis(spec) if with_oracle else None
    prev_vec = np.ones(1)
    for m in range(1, spec.M + 1):
        spec_m = spec.truncated(m)
        basis = build_symmetric_sector_basis(spec_m)
        gap_prev = ledger.delta0 if m == 1 else result.steps[-1].gap_sector
        try:
            zm, flow = solve_zm(spec, basis, m, result, gap_prev, gamma,
                                tol_rel * spec.pairs[m - 1].phi)
        except (AdmissibilityError, RegimeError) as exc:
            raise RegimeError(f"cascade step {m}: {exc}") from exc
        psi = build_ground_state_vector(flow, zm.z, prev_vec)
        pair = spec.pairs[m - 1]
        step = CascadeStep(m, zm.z_single, zm.z, zm.z_total, psi, float(np.linalg.norm(psi)),
                           zm.bracket, zm.residual, gap_prev)
        f_val, K_N = flow.final_operator()
        sv = np.linalg.svd(K_N, compute_uv=False)
        step.rank_one_ratio = float(sv[1] / sv[0]) if len(sv) > 1 and sv[0] > 0 else 0.0
        pos = verify_inverted_block_positivity(flow, zm.z - 1e-3 * pair.phi, prev_vec,
                                               gap_prev, gamma)
        step.positivity_min, step.positivity_threshold = pos.smallest, pos.threshold
        step.n_plus = number_expectation(basis, psi)
        step.n_plus_bound = sum(p.phi for p in spec.pairs[:m]) / ledger.delta0
        step.gap_sector = _sector_gap(flow.H)
        if with_oracle:
            H = flow.H
            lam, v = ground_state_exact(H)
            step.oracle_energy = lam
            u = psi / step.norm
            step.overlap = float(abs(u @ v))
            step.h_norm1 = float(np.abs(H).sum(axis=0).max())
            step.residual = float(np.linalg.norm(H @ u - zm.z_total * u))
            emb = assemble_hbog(spec, full_basis, range(m)).to_dense()
            step.gap_embedded = _sector_gap(emb)
        ledger.measured_sector.append(step.gap_sector)
        ledger.measured_embedded.append(step.gap_embedded)
        ledger.U.append(pair.k2 + pair.phi)
        result.steps.append(step)
        prev_vec = psi
    return result


# ---------------------------------------------------------------------------
# lower bound of the kinetic-stripped pair sum
# ---------------------------------------------------------------------------


def _pair_sum_matrix(spec: PotentialSpec, m: int, parked: int, asym: tuple[int, ...]):
    """Sum of the first m three-mode Hamiltonians on the sector where `parked`
    particles sit in modes outside the pairs and n_{+l} - n_{-l} = asym[l]."""
    N = spec.N
    free = N - parked - sum(abs(d) for d in asym)
    if free < 0:
        return None
    from .fockspace import _compositions
    states = [s for s in _compositions(free // 2, m)]
    index = {s: k for k, s in enumerate(states)}
    H = np.zeros((len(states), len(states)))
    for k, s in enumerate(states):
        n0 = free - 2 * sum(s)
        for l, (p, pair) in enumerate(zip(s, spec.pairs[:m])):
            npl, nmi = p + max(asym[l], 0), p + max(-asym[l], 0)
            H[k, k] += (pair.k2 + pair.phi * n0 / N) * (npl + nmi)
            if n0 >= 2:
                t = s[:l] + (p + 1,) + s[l + 1:]
                amp = pair.phi / N * math.sqrt(n0 * (n0 - 1) * (npl + 1) * (nmi + 1))
                H[index[t], k] = H[k, index[t]] = amp
    return H


@dataclass(frozen=True)
class Property4Report:
    m: int
    infspec: float
    z_bog: float
    deficit: float
    bound: float
    passed: bool
    argmin: tuple


def verify_property4_infspec(spec: PotentialSpec, m: int, z_bog: float | None = None,
                             parked_max: int = 4, asym_max: int = 1) -> Property4Report:
    """infspec of sum_{l<=m} H^Bog_{j_l} minus z^Bog_{j1..jm}, scanned over parked
    particle numbers and pair asymmetries; compared with -m/(ln N)^(1/8)."""
    import itertools
    N = spec.N
    if z_bog is None:
        spec_m = spec.truncated(m)
        z_bog = ground_state_exact(assemble_hbog(spec_m, build_symmetric_sector_basis(spec_m)))[0]
    best, arg = math.inf, None
    for parked in range(0, parked_max + 1):
        for asym in itertools.product(range(-asym_max, asym_max + 1), repeat=m):
            H = _pair_sum_matrix(spec, m, parked, asym)
            if H is None or H.shape[0] == 0:
                continue
            lam = float(np.linalg.eigvalsh(H)[0])
            if lam < best:
                best, arg = lam, (parked, asym)
    deficit = best - z_bog
    bound = -m / math.log(N) ** 0.125
    return Property4Report(m, best, z_bog, deficit, bound, bool(deficit >= bound), arg)
