"""Disordered spinless-fermion chain: free-fermion (Wick) and exact-diagonalization paths.

Sites are 0-based.  In the occupation basis a many-body state is an integer
whose bit ``y`` is the occupation of site ``y``; ``c_y`` carries the Jordan
Wigner sign ``(-1)^(number of occupied sites below y)``.

The particle current through bond (x, x+1) is
``j_x = iJ (c^dag_x c_{x+1} - c^dag_{x+1} c_x)``, oriented so that
``i[H, n_x] = j_{x-1} - j_x``.  Heisenberg evolution is ``da/dt = i[H, a]``,
which for a quadratic ``H = c^dag h c`` gives ``c(t) = exp(-iht) c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .anderson import AndersonOperator, build_operator, eigendecompose
from .correlation import CorrelationSeries
from .disorder import DisorderRealization

ED_L_CAP = 12


class QuantumContractError(ValueError):
    pass


class EDResourceError(MemoryError):
    pass


@dataclass(frozen=True)
class QuantumParams:
    """Hopping J > 0, interaction g >= 0 and weight mu > 0 of exp(-mu N)."""

    J: float = 1.0
    g: float = 0.0
    mu: float = 1.0

    def __post_init__(self):
        if not self.J > 0:
            raise QuantumContractError("J must be positive")
        if not self.g >= 0:
            raise QuantumContractError("g must be nonnegative")
        if not self.mu > 0:
            raise QuantumContractError("mu must be positive")


def filling(mu: float) -> float:
    """Mean occupation 1/(e^mu + 1) of the product state."""
    return float(0.5 * (1 - np.tanh(mu / 2)))


# -- free-fermion path -------------------------------------------------------------

@dataclass
class CovarianceMatrix:
    """Two-point function G_{x,y} = <c^dag_x c_y> of a Gaussian state."""

    G: np.ndarray

    @property
    def L(self) -> int:
        return self.G.shape[0]

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.G - self.G.conj().T), initial=0.0))

    def spectrum(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.G + self.G.conj().T))

    def particle_number(self) -> float:
        return float(np.real(np.trace(self.G)))

    def evolve(self, h: np.ndarray, t: float) -> "CovarianceMatrix":
        """G(t) = conj(U) G U^T with U = exp(-iht)."""
        E, V = np.linalg.eigh(h)
        U = (V * np.exp(-1j * E * t)) @ V.conj().T
        return CovarianceMatrix(U.conj() @ self.G @ U.T)


def covariance_init(L: int, mu: float) -> CovarianceMatrix:
    return CovarianceMatrix(filling(mu) * np.eye(L, dtype=complex))


def build_one_body(real: DisorderRealization, J: float) -> AndersonOperator:
    """One-body matrix J*hopping + 2J + omega on the whole chain."""
    return build_operator(real, None, "quantum", J)


def current_matrix(L: int, J: float) -> np.ndarray:
    """A with c^dag A c = sum_x j_x."""
    A = np.zeros((L, L), dtype=complex)
    i = np.arange(L - 1)
    A[i, i + 1] = 1j * J
    A[i + 1, i] = -1j * J
    return A


def _phi(delta, t):
    """int_0^t exp(i delta s) ds with the t-linear limit for |delta| < 1e-9."""
    small = np.abs(delta) < 1e-9
    safe = np.where(small, 1.0, delta)
    return np.where(small, t + 0j, (np.exp(1j * safe * t) - 1) / (1j * safe))


def wick_square(M: np.ndarray, G: np.ndarray) -> complex:
    """<(c^dag M c)^2> in the Gaussian state with <c^dag_a c_b> = G_ab."""
    Gt = G.T
    n = len(G)
    return np.trace(M @ Gt) ** 2 + np.trace(M @ (np.eye(n) - Gt) @ M @ Gt)


def wick_pair(A1: np.ndarray, A2: np.ndarray, G: np.ndarray) -> complex:
    """<(c^dag A1 c)(c^dag A2 c)> for a Gaussian state."""
    Gt = G.T
    n = len(G)
    return np.trace(A1 @ Gt) * np.trace(A2 @ Gt) + np.trace(A1 @ (np.eye(n) - Gt) @ A2 @ Gt)


def heisenberg_one_body(h: np.ndarray, A: np.ndarray, s: float) -> np.ndarray:
    """Matrix of c^dag(s) A c(s) in terms of c^dag, c: exp(ihs) A exp(-ihs)."""
    E, V = np.linalg.eigh(h)
    U = (V * np.exp(-1j * E * s)) @ V.conj().T
    return U.conj().T @ A @ U


def current_two_time(real, params: QuantumParams, s: float, s2: float,
                     cov: CovarianceMatrix | None = None) -> complex:
    """<J(s) J(s2)>_mu for the free chain."""
    h = build_one_body(real, params.J).dense()
    A = current_matrix(real.L, params.J)
    cov = covariance_init(real.L, params.mu) if cov is None else cov
    return wick_pair(heisenberg_one_body(h, A, s), heisenberg_one_body(h, A, s2), cov.G)


def mean_current(real, params: QuantumParams, t: float) -> float:
    h = build_one_body(real, params.J).dense()
    A = heisenberg_one_body(h, current_matrix(real.L, params.J), t)
    G = covariance_init(real.L, params.mu).G
    return float(np.real(np.trace(A @ G.T)))


def free_current_correlation(real: DisorderRealization, params: QuantumParams, t_grid,
                             cov: CovarianceMatrix | None = None) -> CorrelationSeries:
    """<(int_0^t J(s) ds)^2>_mu / L for g = 0, exactly.

    In the eigenbasis of the one-body matrix the time integral is done in
    closed form, ``M_kl = A_kl (exp(i D_kl t) - 1) / (i D_kl)`` with
    ``D_kl = E_k - E_l``, and the square is contracted with Wick's theorem.
    """
    if params.g != 0:
        raise QuantumContractError("free path needs g = 0; use the ED path")
    t_grid = np.asarray(t_grid, float)
    L = real.L
    if L == 1:
        return CorrelationSeries(t_grid, np.zeros_like(t_grid), np.zeros_like(t_grid),
                                 {"model": "quantum", "L": 1, "method": "wick"})
    basis = eigendecompose(build_one_body(real, params.J))
    V, E = basis.psi, basis.nu2
    At = V.T @ current_matrix(L, params.J) @ V
    cov = covariance_init(L, params.mu) if cov is None else cov
    Gt = V.T @ cov.G @ V
    D = E[:, None] - E[None, :]
    out = np.empty(len(t_grid))
    for i, t in enumerate(t_grid):
        val = wick_square(At * _phi(D, t), Gt)
        if abs(val.imag) > 1e-9 * max(1.0, abs(val.real)):
            raise ArithmeticError(f"non-real <Q^2> = {val}")
        out[i] = val.real / L
    return CorrelationSeries(t_grid, out, np.zeros_like(out),
                             {"model": "quantum", "L": L, "J": params.J, "g": 0.0,
                              "mu": params.mu, "seed": real.spec.seed, "method": "wick"})


# -- exact diagonalization ---------------------------------------------------------

def _popcount(a: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a.astype(np.uint64)).astype(np.int64)


def annihilators(L: int) -> list[sp.csr_matrix]:
    """c_0, ..., c_{L-1} as sparse 2^L x 2^L real matrices."""
    dim = 1 << L
    s = np.arange(dim, dtype=np.int64)
    ops = []
    for y in range(L):
        occ = s[(s >> y) & 1 == 1]
        sign = 1.0 - 2.0 * (_popcount(occ & ((1 << y) - 1)) & 1)
        ops.append(sp.csr_matrix((sign, (occ ^ (1 << y), occ)), shape=(dim, dim)))
    return ops


@dataclass(frozen=True, eq=False)
class ManyBodyOperator:
    """Sparse operator on the 2^L Fock space together with its site support."""

    matrix: sp.spmatrix
    support: frozenset = frozenset()

    def hermiticity_error(self) -> float:
        d = self.matrix - self.matrix.conj().T
        return float(abs(d).max()) if d.nnz else 0.0

    def commutator(self, other) -> sp.spmatrix:
        b = other.matrix if isinstance(other, ManyBodyOperator) else other
        return self.matrix @ b - b @ self.matrix

    def __matmul__(self, other):
        b = other.matrix if isinstance(other, ManyBodyOperator) else other
        return ManyBodyOperator((self.matrix @ b).tocsr(),
                                self.support | getattr(other, "support", frozenset()))


def sparse_norm(a) -> float:
    """Largest absolute matrix entry (0 for an empty matrix)."""
    a = sp.csr_matrix(a)
    a.eliminate_zeros()
    return float(abs(a).max()) if a.nnz else 0.0


@dataclass
class EDSystem:
    L: int
    H: ManyBodyOperator
    N: ManyBodyOperator
    n: list
    j: list
    c: list = field(repr=False)
    params: QuantumParams | None = None

    @property
    def dim(self) -> int:
        return 1 << self.L

    def hop(self, a: int, b: int) -> sp.csr_matrix:
        """c^dag_a c_b."""
        return (self.c[a].T @ self.c[b]).tocsr()

    def quadratic(self, M: np.ndarray, sites=None) -> ManyBodyOperator:
        """sum_{z,w} M_zw c^dag_z c_w for ``sites`` (default all) labelling M's rows."""
        sites = list(range(self.L)) if sites is None else list(sites)
        out = sp.csr_matrix((self.dim, self.dim), dtype=complex)
        for i, z in enumerate(sites):
            for k, w in enumerate(sites):
                if M[i, k] != 0:
                    out = out + M[i, k] * self.hop(z, w)
        return ManyBodyOperator(out.tocsr(), frozenset(sites))

    def total_current(self) -> sp.csr_matrix:
        out = sp.csr_matrix((self.dim, self.dim), dtype=complex)
        for jx in self.j:
            out = out + jx.matrix
        return out

    def sector_states(self, N: int) -> np.ndarray:
        s = np.arange(self.dim, dtype=np.int64)
        return s[_popcount(s) == N]


def state_weights(L: int, mu: float) -> np.ndarray:
    """Diagonal of rho_mu = exp(-mu N) / Z in the occupation basis."""
    occ = _popcount(np.arange(1 << L, dtype=np.int64))
    nbar = filling(mu)
    return nbar**occ * (1 - nbar) ** (L - occ)


def expectation(op, mu: float, L: int) -> complex:
    """Tr(rho_mu op) for the product state (diagonal in the occupation basis)."""
    m = op.matrix if isinstance(op, ManyBodyOperator) else op
    return complex(np.sum(state_weights(L, mu) * m.diagonal()))


def ed_build(real: DisorderRealization, params: QuantumParams, L_cap: int = ED_L_CAP,
             sites=None, check: bool = True) -> EDSystem:
    """Sparse H, N, n_x and j_x for the chain (or the sub-chain ``sites``).

    ``sites`` selects a window of consecutive sites; H keeps only the terms
    supported in it.
    """
    sites = range(real.L) if sites is None else sites
    L = len(sites)
    if L > L_cap:
        raise EDResourceError(f"ED needs 2^{L} states; cap is L <= {L_cap}")
    omega = np.asarray(real.omega)[sites.start:sites.stop]
    tau = np.asarray(real.tau)[sites.start:sites.stop]
    c = annihilators(L)
    dim = 1 << L
    n = [ManyBodyOperator((cy.T @ cy).tocsr(), frozenset([y])) for y, cy in enumerate(c)]
    N = sp.csr_matrix((dim, dim))
    H = sp.csr_matrix((dim, dim), dtype=complex)
    for y in range(L):
        N = N + n[y].matrix
        H = H + omega[y] * n[y].matrix
    j = []
    J = params.J
    for x in range(L - 1):
        fwd = (c[x].T @ c[x + 1]).tocsr()
        back = (c[x + 1].T @ c[x]).tocsr()
        H = H + J * (fwd + back) + params.g * tau[x] * (n[x].matrix @ n[x + 1].matrix)
        j.append(ManyBodyOperator((1j * J * (fwd - back)).tocsr(), frozenset([x, x + 1])))
    system = EDSystem(L, ManyBodyOperator(H.tocsr(), frozenset(range(L))),
                      ManyBodyOperator(N.tocsr(), frozenset(range(L))), n, j, c, params)
    if check:
        err = sparse_norm(system.H.commutator(system.N))
        if err > 1e-13:
            raise ArithmeticError(f"[H, N] = {err:.3g}")
    return system


def continuity_error(system: EDSystem) -> float:
    """max_x || i[H, n_x] - (j_{x-1} - j_x) ||_max with j_{-1} = j_{L-1} = 0."""
    worst = 0.0
    zero = sp.csr_matrix((system.dim, system.dim))
    for x in range(system.L):
        left = system.j[x - 1].matrix if x >= 1 else zero
        right = system.j[x].matrix if x < system.L - 1 else zero
        worst = max(worst, sparse_norm(1j * system.H.commutator(system.n[x]) - (left - right)))
    return worst


def ed_current_correlation(system: EDSystem, mu: float, t_grid, j_list=None) -> CorrelationSeries:
    """<(int_0^t J(s) ds)^2>_mu / L by diagonalizing H sector by sector.

    rho_mu is constant on each particle-number sector, so in the energy
    eigenbasis ``<Q(t)^2> = sum_{m,n} rho_m |J_mn|^2 |phi(E_m - E_n, t)|^2``.
    """
    t_grid = np.asarray(t_grid, float)
    Jtot = system.total_current() if j_list is None else sum(op.matrix for op in j_list)
    Jtot = sp.csr_matrix(Jtot)
    H = system.H.matrix.tocsr()
    nbar = filling(mu)
    total = np.zeros(len(t_grid))
    for N in range(1, system.L):
        idx = system.sector_states(N)
        Hs = H[idx][:, idx].toarray()
        E, V = np.linalg.eigh(0.5 * (Hs + Hs.conj().T))
        Js = V.conj().T @ Jtot[idx][:, idx].toarray() @ V
        W = np.abs(Js) ** 2
        D = E[:, None] - E[None, :]
        rho = nbar**N * (1 - nbar) ** (system.L - N)
        for i, t in enumerate(t_grid):
            total[i] += rho * np.sum(W * np.abs(_phi(D, t)) ** 2)
    p = system.params
    meta = {"model": "quantum", "L": system.L, "mu": mu, "method": "ed"}
    if p is not None:
        meta.update(J=p.J, g=p.g)
    return CorrelationSeries(t_grid, total / system.L, np.zeros_like(total), meta)


def sector_populations(system: EDSystem, psi: np.ndarray) -> np.ndarray:
    occ = _popcount(np.arange(system.dim, dtype=np.int64))
    return np.bincount(occ, weights=np.abs(psi) ** 2, minlength=system.L + 1)


# -- splitting on a window -----------------------------------------------------------

@dataclass
class QuantumResidual:
    """u_x = N~_L - N_L and f_x = i[H_dB, u_x] on the window plus its two neighbours.

    The mean of u_x in the product state vanishes (trace of gamma is zero by
    completeness), so no shift is subtracted.
    """

    coeffs: object
    system: EDSystem
    offset: int
    u: ManyBodyOperator
    f: ManyBodyOperator
    j: ManyBodyOperator
    H_boundary: ManyBodyOperator
    r: float
    mean_shift: float = 0.0

    def poisson_error(self) -> float:
        """|| i[H, u] - j_x - f_x || over the extended region."""
        lhs = 1j * self.system.H.commutator(self.u)
        return sparse_norm(lhs - self.j.matrix - self.f.matrix)


def quantum_residuals(coeffs, params, mu=None, real: DisorderRealization | None = None,
                      L_cap: int = ED_L_CAP + 2) -> QuantumResidual:
    if real is None:
        raise QuantumContractError("the quantum residual needs the disorder realization")
    if not isinstance(params, QuantumParams):
        params = QuantumParams(J=coeffs.coupling, g=float(params or 0.0), mu=mu or 1.0)
    B = coeffs.B
    lo, hi = max(B.start - 1, 0), min(B.stop + 1, real.L)
    system = ed_build(real, params, L_cap=L_cap, sites=range(lo, hi), check=False)
    off = B.start - lo
    local = range(off, off + len(B))
    u = system.quadratic(coeffs.gammaL, local)
    dim = system.dim
    HdB = sp.csr_matrix((dim, dim), dtype=complex)
    tau = np.asarray(real.tau)[lo:hi]
    for a in ([off - 1] if off >= 1 else []) + ([off + len(B) - 1] if hi > B.stop else []):
        b = a + 1
        HdB = HdB + params.J * (system.hop(a, b) + system.hop(b, a))
        HdB = HdB + params.g * tau[a] * (system.n[a].matrix @ system.n[b].matrix)
    HdB = ManyBodyOperator(HdB.tocsr(), frozenset(range(system.L)))
    f = ManyBodyOperator((1j * HdB.commutator(u)).tocsr(), frozenset(range(system.L)))
    jx = system.j[coeffs.midpoint - lo]
    return QuantumResidual(coeffs, system, lo, u, f, jx, HdB, coeffs.r())


@dataclass
class SplittingReport:
    commutator_norm: float
    completeness_error: float
    coefficient_error: float
    mean_f: complex
    f_square: float
    r: float
    poisson_error: float


def quantum_splitting_check(real: DisorderRealization, B: range, J: float, mu: float,
                            g: float = 0.0) -> SplittingReport:
    """Build N~_L, N~_R from the mode occupations of H_B and audit them.

    Checks ``[H_B, N~_L] = 0``, ``N~_L + N~_R = N_B``, that ``N~_L - N_L``
    has the coefficients gamma^L, and evaluates ``<f_x>`` and ``<f_x^2>``.
    """
    from .splitting import splitting_coefficients

    if len(B) > ED_L_CAP:
        raise EDResourceError(f"|B| must be <= {ED_L_CAP}")
    if np.any(np.asarray(real.tau)[B.start:B.stop]):
        raise QuantumContractError("tau must vanish on B")
    params = QuantumParams(J=J, g=g, mu=mu)
    basis = eigendecompose(build_operator(real, B, "quantum", J))
    coeffs = splitting_coefficients(basis)
    system = ed_build(real, params, sites=B)
    c = coeffs.midpoint - B.start
    w = coeffs.left_weights
    psi = basis.psi
    # mode occupations n_k = b^dag_k b_k with b_k = sum_y psi_k(y) c_y
    NL = system.quadratic((psi * w) @ psi.T)
    NR = system.quadratic((psi * (1 - w)) @ psi.T)
    comm = sparse_norm(system.H.commutator(NL))
    complete = sparse_norm(NL.matrix + NR.matrix - system.N.matrix)
    N_left = sum(system.n[y].matrix for y in range(c + 1))
    coef = sparse_norm(NL.matrix - N_left - system.quadratic(coeffs.gammaL).matrix)
    res = quantum_residuals(coeffs, params, mu, real)
    Lx = res.system.L
    mean_f = expectation(res.f, mu, Lx)
    f2 = expectation(res.f @ res.f, mu, Lx).real
    return SplittingReport(comm, complete, coef, mean_f, float(f2), coeffs.r(), res.poisson_error())
