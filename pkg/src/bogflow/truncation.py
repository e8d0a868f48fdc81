"""Truncated expansions: depth-h Gamma recursion, the scalar Delta n_0 family and
the bare-operator expansion of the ground state."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cascade import FlowState, GroundStateResult, build_ground_state_vector, run_pair_flow
from .fockspace import PotentialSpec, build_symmetric_sector_basis, assemble_hbog
from .threemode import AdmissibilityError, bogoliubov_energy, upper_bracket


@dataclass(frozen=True)
class TruncationParams:
    h: int
    jbar: int
    zeta: float = 0.1
    dn0: float = 0.0

    def __post_init__(self):
        if self.h < 2 or self.h % 2:
            raise ValueError(f"h={self.h} must be even and >= 2")
        if self.jbar < 1:
            raise ValueError(f"jbar={self.jbar} must be >= 1")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not 0 <= self.dn0 <= self.h:
            raise ValueError(f"dn0={self.dn0} must lie in [0, h]")

    @classmethod
    def default(cls, N: int, zeta: float = 0.1) -> "TruncationParams":
        """h = jbar = floor(sqrt(ln N)), rounded up to even."""
        n = max(2, int(math.floor(math.sqrt(math.log(N)))))
        n += n % 2
        return cls(n, n, zeta)


def _neumann(R: np.ndarray, S: np.ndarray | None, terms: int) -> np.ndarray:
    """sum_{l<terms} R (S R)^l, summed literally."""
    acc, term = R.copy(), R
    if S is None:
        return acc
    SR = S @ R
    for _ in range(terms - 1):
        term = term @ SR
        acc = acc + term
    return acc


# ---------------------------------------------------------------------------
# [Gamma]_{tau_h}
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaTauResult:
    h: int
    levels: tuple  # flow indices i = N-2-h .. N-2 (those present)
    family: dict  # i -> [Gamma_i]_{tau_h}
    unrolled: np.ndarray  # [Gamma_{N-2}] from the depth decomposition
    exact: np.ndarray  # Gamma_{N-2} from the flow
    residual: float  # ||Gamma - [Gamma]||_2
    identity_error: float  # relative gap between the two code paths

    @property
    def top(self) -> np.ndarray:
        return self.family[self.levels[-1]]


def _window(flow: FlowState, h: int):
    N = flow.N
    base = N - 2 - h
    if base < 2:
        raise ValueError(f"h={h} too large for N={N}: need N - h - 4 >= 0")
    return base, list(range(base, N - 1, 2))


def gamma_tau_h(flow: FlowState, h: int) -> GammaTauResult:
    """[Gamma_i]_{tau_h} for i = N-2-h .. N-2.

    Base: W R_{N-4-h} W*.  Step: W sum_{l=0}^{h-1} R_{i-2} ([Gamma_{i-2}] R_{i-2})^l W*.
    A second path splits every [Gamma_i] into components by the deepest level
    its terms reach and sums them at the end.
    """
    base, idx = _window(flow, h)
    R = {i: flow.resolvent(i) for i in range(base - 2, flow.N - 3, 2)}

    def wrap(i, M):
        A = flow.w_star(i)
        return A.T @ M @ A

    family = {base: wrap(base, R[base - 2])}
    for i in idx[1:]:
        family[i] = wrap(i, _neumann(R[i - 2], family[i - 2], h))

    # depth decomposition: comps[i][s] collects the terms whose deepest
    # resolvent sits at level s
    comps = {base: {base - 2: family[base]}}
    for i in idx[1:]:
        lower = comps[i - 2]
        depths = sorted(lower)  # deepest first
        Ri = R[i - 2]
        own = {i - 2: wrap(i, Ri)}
        for k, s in enumerate(depths):
            S_ge = sum(lower[t] for t in depths[k:])
            S_gt = sum(lower[t] for t in depths[k + 1:]) if k + 1 < len(depths) else None
            with_s = _neumann(Ri, S_ge, h) - Ri
            without = (_neumann(Ri, S_gt, h) - Ri) if S_gt is not None else 0.0
            own[s] = wrap(i, with_s - without)
        comps[i] = own
    top = idx[-1]
    unrolled = sum(comps[top][s] for s in sorted(comps[top], reverse=True))
    exact = flow.gamma(top)
    residual = float(np.linalg.norm(exact - family[top], 2))
    scale = max(float(np.linalg.norm(family[top], 2)), 1e-300)
    ident = float(np.linalg.norm(unrolled - family[top], 2)) / scale
    return GammaTauResult(h, tuple(idx), family, unrolled, exact, residual, ident)


@dataclass(frozen=True)
class DecayFit:
    h_values: tuple
    residuals: tuple
    rate: float  # per unit of h
    c: float  # rate = 1 / (1 + c sqrt(eps))
    strictly_decreasing: bool


def truncation_decay(flow: FlowState, h_values, eps: float) -> DecayFit:
    res = [gamma_tau_h(flow, h).residual for h in h_values]
    hs = np.asarray(h_values, float)
    slope = np.polyfit(hs, np.log(res), 1)[0]
    rate = float(math.exp(slope))
    c = (1 / rate - 1) / math.sqrt(eps)
    dec = all(b < a for a, b in zip(res, res[1:]))
    return DecayFit(tuple(h_values), tuple(res), rate, c, dec)


# ---------------------------------------------------------------------------
# scalar family [G]_{tau_h; dn0}
# ---------------------------------------------------------------------------


def ww_star_dn0(i: int, z: float, N: int, k2: float, phi: float, dn0: float) -> float:
    """[W W*]_{dn0}(i): the scalar WW* with dn0 particles missing from the zero mode."""
    n0 = i - dn0
    if n0 - 2 < 0:
        raise AdmissibilityError(f"i - dn0 - 2 < 0 at i={i}, dn0={dn0}", i, z)
    d_hi = (n0 / N * phi + k2) * (N - i) - z
    d_lo = ((n0 - 2) / N * phi + k2) * (N - i + 2) - z
    if d_hi <= 0 or d_lo <= 0:
        raise AdmissibilityError(f"z={z} is not below the shifted levels at i={i}", i, z)
    return (n0 - 1) * n0 / N ** 2 * phi ** 2 * (N - i + 2) ** 2 / (4 * d_hi * d_lo)


@dataclass(frozen=True)
class GTauTable:
    z: float
    N: int
    k2: float
    phi: float
    h: int
    dn0: float
    values: np.ndarray  # at i = N-h-4, N-h-2, ..., N-2

    @property
    def first(self) -> int:
        return self.N - self.h - 4

    def at(self, i: int) -> float:
        return float(self.values[(i - self.first) // 2])

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.first, self.N - 1, 2)


def admissible_top(N: int, k2: float, phi: float, h: int) -> float:
    return upper_bracket(k2, phi) - (h + 4) * phi / N


def g_tau_dn0(z: float, N: int, k2: float, phi: float, h: int, dn0: float) -> GTauTable:
    """Base 1 at i = N-h-4; [G_i] = sum_{l=0}^{h-1} ([WW*]_{dn0}(i) [G_{i-2}])^l."""
    if h < 2 or h % 2:
        raise ValueError("h must be even and >= 2")
    first = N - h - 4
    if first - dn0 < 0:
        raise ValueError(f"window start N-h-4={first} leaves no room for dn0={dn0}")
    if z > admissible_top(N, k2, phi, h):
        raise AdmissibilityError(
            f"z={z} above the admissible top {admissible_top(N, k2, phi, h)}", N - 2, z)
    vals = [1.0]
    for i in range(first + 2, N - 1, 2):
        x = ww_star_dn0(i, z, N, k2, phi, dn0) * vals[-1]
        vals.append(sum(x ** l for l in range(h)))
    return GTauTable(z, N, k2, phi, h, dn0, np.array(vals))


@dataclass(frozen=True)
class SensitivityReport:
    N: int
    h: int
    indices: np.ndarray  # i
    derivatives: np.ndarray  # max over interior dn0 of |d[G_i]/d dn0|
    bound_shape: np.ndarray  # h 4^{i-N+h} / sqrt(N)
    K_fit: float

    def within(self, K: float) -> bool:
        return bool(np.all(self.derivatives <= K * self.bound_shape * (1 + 1e-12)))


def dn0_sensitivity(z: float, N: int, k2: float, phi: float, h: int,
                    dn0_points=None, step: float = 1e-3) -> SensitivityReport:
    """Central differences of [G]_{tau_h; dn0} in dn0 against K h 4^{i-N+h}/sqrt(N)."""
    if dn0_points is None:
        dn0_points = [float(d) for d in range(1, h)]
    derivs = None
    for d in dn0_points:
        up = g_tau_dn0(z, N, k2, phi, h, d + step).values
        dn = g_tau_dn0(z, N, k2, phi, h, d - step).values
        g = np.abs(up - dn) / (2 * step)
        derivs = g if derivs is None else np.maximum(derivs, g)
    idx = np.arange(N - h - 4, N - 1, 2)
    shape = h * 4.0 ** (idx - N + h) / math.sqrt(N)
    return SensitivityReport(N, h, idx, derivs, shape, float(np.max(derivs / shape)))


# ---------------------------------------------------------------------------
# bare-operator expansion of the ground state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BareExpansion:
    vector: np.ndarray
    reference: np.ndarray
    error: float  # ||psi - (psi)_zeta|| / ||psi||
    params: TruncationParams
    exact: bool


def _bare_step(spec_m: PotentialSpec, basis, m: int, prev: np.ndarray,
               params: TruncationParams) -> np.ndarray:
    pair = spec_m.pairs[m - 1]
    e_bog = bogoliubov_energy(pair.k2, pair.phi)
    if not e_bog < 0:
        raise AdmissibilityError("E^Bog must be negative for the bare resolvents", None, e_bog)
    N = basis.N
    top = N // 2
    H = assemble_hbog(spec_m, basis).to_dense()
    levels = [basis.level(m - 1, r) for r in range(top + 1)]
    n0 = basis.n0
    Rt = []
    for r, lv in enumerate(levels):
        h0 = (pair.k2 + pair.phi * n0[lv] / N) * 2 * r
        Rt.append(np.diag(1.0 / (h0 - e_bog)))
    coup = [H[np.ix_(levels[r + 1], levels[r])] for r in range(top)]
    h = params.h
    depth = h // 2 + 1

    def gamma_tilde(r):
        """[Gamma~_r]: levels r+1 .. r+h/2+1, base W R~ W* at the deepest."""
        deepest = min(r + depth, top)
        G = None
        for s in range(deepest - 1, r - 1, -1):
            inner = Rt[s + 1] if G is None else _neumann(Rt[s + 1], G, h)
            G = coup[s].T @ inner @ coup[s]
        return G

    psi = np.zeros(len(basis))
    v = np.asarray(prev, float)
    psi[levels[0]] = v
    for r in range(1, min(params.jbar, top) + 1):
        Binv = _neumann(Rt[r], gamma_tilde(r) if r < top else None, h + 1)
        v = -Binv @ (coup[r - 1] @ v)
        psi[levels[r]] = v
    return psi


def _exact_step(flow: FlowState, prev: np.ndarray) -> np.ndarray:
    return build_ground_state_vector(flow, flow.z, prev)


def bare_operator_expansion(spec: PotentialSpec, result: GroundStateResult,
                            params: TruncationParams, exact: bool = False) -> BareExpansion:
    """(psi)_zeta built pair by pair from eta.

    exact=False: no Pbar correction, outer sum cut at jbar, inverse blocks replaced
    by depth-h Neumann sums of the kinetic-plus-zero-mode resolvents at E^Bog.
    exact=True: the flow's own blocks, all levels and the Pbar correction; this
    must reproduce the cascade vector.
    """
    v = np.ones(1)
    for m in range(1, spec.M + 1):
        spec_m = spec.truncated(m)
        basis = build_symmetric_sector_basis(spec_m)
        if exact:
            step = result.steps[m - 1]
            z_prev = 0.0 if m == 1 else result.steps[m - 2].z_total
            flow = run_pair_flow(spec_m, basis, m, step.z_step, z_prev, v)
            v = _exact_step(flow, v)
        else:
            v = _bare_step(spec_m, basis, m, v, params)
    ref = result.vector
    err = float(np.linalg.norm(ref - v) / np.linalg.norm(ref))
    return BareExpansion(v, ref, err, params, exact)


@dataclass(frozen=True)
class ZetaScan:
    N_values: tuple
    errors: tuple
    N_zeta: int | None  # smallest scanned N with error <= zeta


def zeta_scan(make_spec, N_values, params: TruncationParams) -> ZetaScan:
    """Bare-expansion error over an N scan; make_spec(N) -> PotentialSpec."""
    from .cascade import cascade_all_modes
    errs = []
    for N in N_values:
        spec = make_spec(N)
        res = cascade_all_modes(spec, with_oracle=False)
        errs.append(bare_operator_expansion(spec, res, params).error)
    hit = [N for N, e in zip(N_values, errs) if e <= params.zeta]
    return ZetaScan(tuple(N_values), tuple(errs), min(hit) if hit else None)
