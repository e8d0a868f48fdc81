"""Occupation-number bases and Bogoliubov Hamiltonians as finite matrices.

Conventions: hbar = 1, m = 1/2 and lambda = 1/rho, so that lambda/|Lambda| = 1/N
and the kinetic energy of mode j is k_j^2 = (2 pi |j| / L)^2.

The symmetric sector keeps n_{+j} = n_{-j} for every listed pair; a state is the
tuple (p_1, ..., p_M) of common pair occupations and the zero mode holds
n_0 = N - 2 sum(p).  The general basis drops that restriction and is only used
for the cubic/quartic remainder V and for cross-checks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

DEFAULT_MAX_STATES = 2_000_000


class SpecError(ValueError):
    """Invalid model specification."""


class CapacityError(RuntimeError):
    """A requested basis exceeds the configured size cap."""

    def __init__(self, N: int, M: int, size: int, cap: int):
        super().__init__(
            f"basis for (N={N}, M={M}) has {size} states, above the cap of {cap}"
        )
        self.N, self.M, self.size, self.cap = N, M, size, cap


class SolverError(RuntimeError):
    """Eigensolver did not meet its residual contract."""

    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    N: int
    d: int = 1
    L: float = 1.0
    rho: float | None = None

    def __post_init__(self):
        if int(self.N) != self.N:
            raise SpecError(f"N must be an integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        if self.N % 2:
            raise SpecError(f"N={self.N} is odd; the particle number must be even")
        if self.N < 4:
            raise SpecError(f"N={self.N} is too small; N >= 4 is required")
        if self.d < 1:
            raise SpecError(f"spatial dimension must be >= 1, got {self.d}")
        if not self.L > 0:
            raise SpecError(f"box side must be positive, got {self.L}")
        volume = self.L ** self.d
        if self.rho is None:
            object.__setattr__(self, "rho", self.N / volume)
        elif abs(self.rho * volume - self.N) > 1.0:
            raise SpecError(
                f"rho * L^d = {self.rho * volume} does not match N = {self.N}"
            )

    @property
    def volume(self) -> float:
        return self.L ** self.d


@dataclass(frozen=True)
class ModePair:
    """The unordered pair {+j, -j} with its kinetic energy and Fourier weight."""

    j: tuple[int, ...]
    k2: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "j", tuple(int(x) for x in self.j))
        if not any(self.j):
            raise SpecError("the zero mode cannot be a pair")
        if not self.phi > 0:
            raise SpecError(f"pair {self.j}: phi must be positive, got {self.phi}")
        if not self.k2 > 0:
            raise SpecError(f"pair {self.j}: k2 must be positive, got {self.k2}")

    @property
    def eps(self) -> float:
        return self.k2 / self.phi

    @classmethod
    def on_lattice(cls, j: Sequence[int], L: float, phi: float | None = None,
                   eps: float | None = None) -> "ModePair":
        """Pair at lattice vector j in a box of side L; give either phi or eps."""
        k2 = (2.0 * math.pi / L) ** 2 * sum(int(x) ** 2 for x in j)
        if (phi is None) == (eps is None):
            raise SpecError("give exactly one of phi or eps")
        if phi is None:
            if not eps > 0:
                raise SpecError(f"eps must be positive, got {eps}")
            phi = k2 / eps
        return cls(tuple(j), k2, float(phi))


@dataclass(frozen=True)
class PotentialSpec:
    params: ModelParams
    pairs: tuple[ModePair, ...]
    phi0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise SpecError("at least one interacting pair is required")
        if self.phi0 < 0:
            raise SpecError(f"phi0 must be nonnegative, got {self.phi0}")
        seen: set[tuple[int, ...]] = set()
        for p in self.pairs:
            if len(p.j) != self.params.d:
                raise SpecError(f"pair {p.j} has the wrong dimension (d={self.params.d})")
            neg = tuple(-x for x in p.j)
            if p.j in seen or neg in seen:
                raise SpecError(f"duplicate pair {p.j} (or its negation)")
            seen.add(p.j)

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def M(self) -> int:
        return len(self.pairs)

    @property
    def c_N(self) -> float:
        """Constant dropped from H before H^Bog is formed (never added to matrices)."""
        N = self.N
        return self.phi0 / 2.0 * (1 - N)

    def truncated(self, m: int) -> "PotentialSpec":
        """The same model keeping only the first m pairs of the cascade order."""
        if not 1 <= m <= self.M:
            raise SpecError(f"pair count {m} outside 1..{self.M}")
        return PotentialSpec(self.params, self.pairs[:m], self.phi0)

    def reordered(self, order: Sequence[int]) -> "PotentialSpec":
        if sorted(order) != list(range(self.M)):
            raise SpecError(f"{order} is not a permutation of the pair indices")
        return PotentialSpec(self.params, tuple(self.pairs[i] for i in order), self.phi0)

    def with_N(self, N: int) -> "PotentialSpec":
        params = ModelParams(N, self.params.d, self.params.L)
        return PotentialSpec(params, self.pairs, self.phi0)

    @classmethod
    def single_pair(cls, N: int, k2: float, phi: float) -> "PotentialSpec":
        """One pair j=(1,) in d=1, with the box side chosen so that k_1^2 = k2."""
        L = 2.0 * math.pi / math.sqrt(k2)
        return cls(ModelParams(N, 1, L), (ModePair((1,), k2, phi),))


# ---------------------------------------------------------------------------
# symmetric pair sector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SectorBasis:
    mode_count: int
    N: int
    states: np.ndarray  # (size, M) int, lexicographic
    index_of_eta: int = 0
    _keys: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def radix(self) -> int:
        return self.N // 2 + 1

    @property
    def n0(self) -> np.ndarray:
        return self.N - 2 * self.states.sum(axis=1)

    def encode(self, states: np.ndarray) -> np.ndarray:
        weights = self.radix ** np.arange(self.mode_count - 1, -1, -1, dtype=np.int64)
        return np.asarray(states, dtype=np.int64) @ weights

    def index(self, states) -> np.ndarray:
        """Positions of the given occupation tuples; -1 where absent."""
        keys = self.encode(np.atleast_2d(states))
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self) - 1)
        return np.where(self._keys[pos] == keys, pos, -1)

    def level(self, m: int, r: int) -> np.ndarray:
        """Indices of states whose pair m (0-based) has occupation r."""
        return np.flatnonzero(self.states[:, m] == r)


def _compositions(budget: int, slots: int):
    if slots == 0:
        yield ()
        return
    for first in range(budget + 1):
        for rest in _compositions(budget - first, slots - 1):
            yield (first,) + rest


def build_symmetric_sector_basis(spec: PotentialSpec,
                                 max_states: int = DEFAULT_MAX_STATES) -> SectorBasis:
    N, M = spec.N, spec.M
    size = math.comb(N // 2 + M, M)
    if size > max_states:
        raise CapacityError(N, M, size, max_states)
    states = np.array(list(_compositions(N // 2, M)), dtype=np.int64).reshape(size, M)
    basis = SectorBasis(M, N, states, 0)
    object.__setattr__(basis, "_keys", basis.encode(states))
    return basis


class Tridiagonal(NamedTuple):
    diag: np.ndarray
    off: np.ndarray

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)


def pair_tridiagonal(spec: PotentialSpec, pair_index: int) -> Tridiagonal:
    """Three-mode H^Bog of one pair in the basis p = 0..N/2 (p = n_{+j} = n_{-j})."""
    if not 0 <= pair_index < spec.M:
        raise SpecError(f"pair index {pair_index} outside 0..{spec.M - 1}")
    pair = spec.pairs[pair_index]
    N = spec.N
    p = np.arange(N // 2 + 1, dtype=float)
    n0 = N - 2 * p
    diag = (pair.k2 + pair.phi * n0 / N) * 2 * p
    n0 = n0[:-1]
    off = pair.phi / N * np.sqrt(n0 * (n0 - 1)) * (p[:-1] + 1)
    return Tridiagonal(diag, off)


# ---------------------------------------------------------------------------
# sparse operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseOperator:
    """Real square operator in coordinate form with duplicates summed."""

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @classmethod
    def from_triplets(cls, dim, rows, cols, vals) -> "SparseOperator":
        coo = scipy.sparse.coo_matrix(
            (np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))),
            shape=(dim, dim),
        ).tocsr()
        coo.sum_duplicates()
        coo.sort_indices()
        coo = coo.tocoo()
        keep = coo.data != 0
        arrays = [coo.row[keep].astype(np.int64), coo.col[keep].astype(np.int64),
                  coo.data[keep].copy()]
        for a in arrays:
            a.setflags(write=False)
        return cls(dim, *arrays)

    @classmethod
    def from_dense(cls, A: np.ndarray) -> "SparseOperator":
        r, c = np.nonzero(A)
        return cls.from_triplets(A.shape[0], r, c, A[r, c])

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()))

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix((self.vals, (self.rows, self.cols)),
                                       shape=(self.dim, self.dim))

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.dim, self.dim))
        np.add.at(A, (self.rows, self.cols), self.vals)
        return A

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ v

    def norm1(self) -> float:
        if not self.dim:
            return 0.0
        colsum = np.zeros(self.dim)
        np.add.at(colsum, self.cols, np.abs(self.vals))
        return float(colsum.max())

    def asymmetry(self) -> float:
        """Largest entry of |A - A^T|."""
        S = self.to_scipy()
        D = abs(S - S.T)
        return float(D.max()) if D.nnz else 0.0


def assemble_hbog(spec: PotentialSpec, basis: SectorBasis,
                  active: Iterable[int] | None = None) -> SparseOperator:
    """H^Bog of the active pairs on the symmetric sector.

    Every listed pair contributes its kinetic term k^2 (n_+ + n_-); only active
    pairs carry the phi n_0/N shift and the W, W* pair creation terms.
    """
    if basis.mode_count != spec.M or basis.N != spec.N:
        raise SpecError("basis does not belong to this spec")
    active = sorted(set(range(spec.M) if active is None else active))
    if any(not 0 <= a < spec.M for a in active):
        raise SpecError(f"active set {active} outside 0..{spec.M - 1}")
    N = spec.N
    S = basis.states
    n0 = basis.n0.astype(float)
    dim = len(basis)
    diag = np.zeros(dim)
    for m, pair in enumerate(spec.pairs):
        shift = pair.phi * n0 / N if m in active else 0.0
        diag += (pair.k2 + shift) * 2 * S[:, m]
    rows, cols, vals = [np.arange(dim)], [np.arange(dim)], [diag]
    for m in active:
        phi = spec.pairs[m].phi
        src = np.flatnonzero(n0 >= 2)
        up = S[src].copy()
        up[:, m] += 1
        dst = basis.index(up)
        amp = phi / N * np.sqrt(n0[src] * (n0[src] - 1)) * (S[src, m] + 1)
        rows += [dst, src]
        cols += [src, dst]
        vals += [amp, amp]
    return SparseOperator.from_triplets(dim, np.concatenate(rows),
                                        np.concatenate(cols), np.concatenate(vals))


# ---------------------------------------------------------------------------
# general (unsymmetrized) occupation basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneralBasis:
    """All occupations of a finite mode list with total N; mode 0 is the zero mode."""

    N: int
    modes: tuple[tuple[int, ...], ...]
    states: tuple[tuple[int, ...], ...]
    lookup: dict = field(repr=False, compare=False, default=None)

    def __len__(self) -> int:
        return len(self.states)


def build_general_basis(spec: PotentialSpec, extra_modes: Iterable[Sequence[int]] = (),
                        max_states: int = DEFAULT_MAX_STATES) -> GeneralBasis:
    """Mode list (0, +j_1, -j_1, ..., +j_M, -j_M, extra...) and its N-particle states.

    Extra modes carry kinetic energy only; they give the remainder V room to
    scatter particles outside the interacting pairs.
    """
    d = spec.params.d
    modes = [tuple([0] * d)]
    for p in spec.pairs:
        modes += [p.j, tuple(-x for x in p.j)]
    for e in extra_modes:
        e = tuple(int(x) for x in e)
        if len(e) != d or e in modes:
            raise SpecError(f"extra mode {e} is invalid or already present")
        modes.append(e)
    K = len(modes)
    size = math.comb(spec.N + K - 1, K - 1)
    if size > max_states:
        raise CapacityError(spec.N, spec.M, size, max_states)
    states = []
    for rest in _compositions(spec.N, K - 1):
        states.append((spec.N - sum(rest),) + rest)
    states.sort()
    return GeneralBasis(spec.N, tuple(modes), tuple(states),
                        {s: i for i, s in enumerate(states)})


def _apply_word(state: tuple[int, ...], word: Sequence[tuple[int, bool]]):
    """Apply ladder operators right-to-left; word entries are (mode, is_creation)."""
    occ = list(state)
    amp = 1.0
    for mode, create in reversed(word):
        if create:
            occ[mode] += 1
            amp *= math.sqrt(occ[mode])
        else:
            if occ[mode] == 0:
                return None, 0.0
            amp *= math.sqrt(occ[mode])
            occ[mode] -= 1
    return tuple(occ), amp


def _assemble_terms(basis: GeneralBasis, terms) -> SparseOperator:
    acc: dict[tuple[int, int], float] = {}
    for col, state in enumerate(basis.states):
        for coeff, word in terms:
            out, amp = _apply_word(state, word)
            if out is None or amp == 0.0:
                continue
            row = basis.lookup[out]
            acc[row, col] = acc.get((row, col), 0.0) + coeff * amp
    if not acc:
        return SparseOperator.from_triplets(len(basis), [], [], [])
    (rows, cols), vals = zip(*acc.keys()), list(acc.values())
    return SparseOperator.from_triplets(len(basis), rows, cols, vals)


def _kinetic(spec: PotentialSpec, mode: tuple[int, ...]) -> float:
    return (2.0 * math.pi / spec.params.L) ** 2 * sum(x * x for x in mode)


def assemble_hbog_general(spec: PotentialSpec, basis: GeneralBasis) -> SparseOperator:
    """H^Bog on the general basis, written directly in ladder operators."""
    N = spec.N
    terms = []
    # the pair list fixes k2 for interacting modes; extra modes use the lattice value
    k2_of = {}
    for p in spec.pairs:
        k2_of[p.j] = k2_of[tuple(-x for x in p.j)] = p.k2
    for a, mode in enumerate(basis.modes[1:], start=1):
        terms.append((k2_of.get(mode, _kinetic(spec, mode)), [(a, True), (a, False)]))
    for m, p in enumerate(spec.pairs):
        a, b = 1 + 2 * m, 2 + 2 * m
        for x in (a, b):
            terms.append((p.phi / N, [(0, True), (0, False), (x, True), (x, False)]))
        terms.append((p.phi / N, [(0, True), (0, True), (a, False), (b, False)]))
        terms.append((p.phi / N, [(a, True), (b, True), (0, False), (0, False)]))
    return _assemble_terms(basis, terms)


def assemble_full_interaction(spec: PotentialSpec, basis: GeneralBasis) -> SparseOperator:
    """The remainder V = H - H^Bog: terms with at most one zero-mode operator.

    V = 1/(2N) sum_{r != 0} phi_r sum_{p,q} a*_{p+r} a*_{q-r} a_q a_p restricted to
    words with zero or one zero-index operator.  Momenta leaving the mode list
    are dropped.
    """
    N = spec.N
    index = {m: i for i, m in enumerate(basis.modes)}
    zero = basis.modes[0]
    phis = {}
    for p in spec.pairs:
        phis[p.j] = phis[tuple(-x for x in p.j)] = p.phi

    def add(u, v, s=1):
        return tuple(x + s * y for x, y in zip(u, v))

    terms = []
    for r, phi_r in phis.items():
        for p in basis.modes:
            for q in basis.modes:
                a, b = add(p, r), add(q, r, -1)
                if a not in index or b not in index:
                    continue
                zeros = sum(m == zero for m in (a, b, q, p))
                if zeros > 1:
                    continue
                word = [(index[a], True), (index[b], True), (index[q], False), (index[p], False)]
                terms.append((phi_r / (2.0 * N), word))
    return _assemble_terms(basis, terms)


def symmetric_embedding(sym: SectorBasis, general: GeneralBasis) -> np.ndarray:
    """Row positions in the general basis of each symmetric-sector state."""
    pos = np.empty(len(sym), dtype=np.int64)
    extra = len(general.modes) - 1 - 2 * sym.mode_count
    for i, p in enumerate(sym.states):
        occ = (sym.N - 2 * int(p.sum()),) + tuple(int(x) for x in np.repeat(p, 2)) + (0,) * extra
        pos[i] = general.lookup[occ]
    return pos


# ---------------------------------------------------------------------------
# exact diagonalization oracle
# ---------------------------------------------------------------------------


def _fix_sign(v: np.ndarray, eta_index: int) -> np.ndarray:
    ref = v[eta_index]
    if abs(ref) < 1e-300:
        ref = v[np.flatnonzero(np.abs(v) > 1e-300)[0]] if np.any(v) else 1.0
    return -v if ref < 0 else v


def _as_matrix(op):
    if isinstance(op, Tridiagonal):
        return op
    if isinstance(op, SparseOperator):
        return op.to_dense()
    A = np.asarray(op, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    return A


def _norm1(A) -> float:
    if isinstance(A, Tridiagonal):
        return _norm1(A.to_dense()) if len(A.diag) < 4096 else float(
            np.max(np.abs(A.diag)) + 2 * np.max(np.abs(A.off), initial=0.0))
    return float(np.abs(A).sum(axis=0).max()) if A.size else 0.0


def _apply(A, v):
    if isinstance(A, Tridiagonal):
        out = A.diag * v
        out[:-1] += A.off * v[1:]
        out[1:] += A.off * v[:-1]
        return out
    return A @ v


def lowest_eigenpairs(op, k: int = 1, eta_index: int = 0):
    """The k lowest eigenvalues and eigenvectors (columns), sign-fixed.

    Tridiagonal input: Sturm-sequence bisection with inverse iteration.
    Dense input: Householder tridiagonalization followed by implicit QL.
    """
    A = _as_matrix(op)
    if isinstance(A, Tridiagonal):
        n = len(A.diag)
        k = min(k, n)
        if n == 1:
            vals, vecs = A.diag.copy(), np.ones((1, 1))
        else:
            vals, vecs = scipy.linalg.eigh_tridiagonal(
                A.diag, A.off, select="i", select_range=(0, k - 1),
                lapack_driver="stebz")
    else:
        n = A.shape[0]
        k = min(k, n)
        if np.any(A != A.T):
            raise ValueError("oracle input is not symmetric")
        vals, vecs = scipy.linalg.eigh(A, driver="ev")
        vals, vecs = vals[:k], vecs[:, :k]
    vecs = np.array(vecs, dtype=float)
    scale = 1.0 + _norm1(A)
    for c in range(k):
        v = vecs[:, c] / np.linalg.norm(vecs[:, c])
        vecs[:, c] = _fix_sign(v, eta_index)
        res = float(np.linalg.norm(_apply(A, vecs[:, c]) - vals[c] * vecs[:, c]))
        if res > 1e-10 * scale:
            raise SolverError(f"eigenpair {c} failed the residual contract", res)
    return np.asarray(vals, float), vecs


def ground_state_exact(op, eta_index: int = 0) -> tuple[float, np.ndarray]:
    """Lowest eigenvalue and its normalized eigenvector (eta component >= 0)."""
    vals, vecs = lowest_eigenpairs(op, 1, eta_index)
    return float(vals[0]), vecs[:, 0]


def spectral_gap(op) -> float:
    """Second-lowest minus lowest eigenvalue (0 for one-dimensional input)."""
    vals, _ = lowest_eigenpairs(op, 2)
    return float(vals[1] - vals[0]) if len(vals) > 1 else 0.0
