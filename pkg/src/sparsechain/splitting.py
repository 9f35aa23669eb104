"""Invariant left/right splitting of a harmonic (or free-fermion) window.

For a window ``B = {x-l, ..., x+l}`` the eigenmodes of the restricted
operator give conserved mode energies ``e_k`` (mode occupations ``n_k`` in
the fermion chain).  Distributing each mode over the sites with weights
``|psi_k(y)|^2`` and summing over the left part produces ``H~_L`` with
``{H_B, H~_L} = 0``.  The difference ``H~_L - H_L`` is a quadratic form

    sum_{z,w} gamma^L_{z,w} p_z p_w + alpha^L_{z,w} q_z q_w

whose boundary rows control the corrector ``u_x`` and residual ``f_x`` in
``L u_x = j_x + f_x``.

The left part is ``{y in B : y <= x}`` together with the bond (x, x+1),
i.e. the sum of the local energies h_y for y <= x.  This is the cut across
which ``j_x`` flows, so the identity above is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anderson import (EigenBasis, build_operator, batched_eigh, eigendecompose, log_linear_fit,
                       tridiagonal_arrays)
from .classical_chain import ChainParams, PhaseState, harmonic_covariance
from .disorder import DisorderRealization, DisorderSpec, ensemble_seeds, omega_window


class SplittingContractError(ValueError):
    pass


def window(x: int, ell: int) -> range:
    return range(x - ell, x + ell + 1)


def window_basis(real: DisorderRealization, x: int, ell: int, model: str = "classical",
                 coupling: float = 1.0) -> EigenBasis:
    return eigendecompose(build_operator(real, window(x, ell), model, coupling))


# -- mode energies -----------------------------------------------------------

def mode_amplitudes(state: PhaseState, basis: EigenBasis):
    B = basis.operator.B
    return state.q[..., B.start:B.stop] @ basis.psi, state.p[..., B.start:B.stop] @ basis.psi


def mode_energies(state: PhaseState, basis: EigenBasis) -> np.ndarray:
    if basis.operator.model != "classical":
        raise SplittingContractError("mode energies need a classical basis")
    a_q, a_p = mode_amplitudes(state, basis)
    return 0.5 * (a_p**2 + basis.nu2 * a_q**2)


def mode_energy(state: PhaseState, basis: EigenBasis, k: int) -> float:
    """e_k = (<p, psi_k>^2 + nu_k^2 <q, psi_k>^2) / 2 over the window."""
    return float(mode_energies(state, basis)[..., k])


def restricted_energy(state: PhaseState, omega_B: np.ndarray, g0: float, B: range,
                      sites=None) -> float:
    """Harmonic energy of the window, keeping only terms supported in B.

    ``sites`` (local indices) selects the on-site terms and the bonds to the
    right of those sites that stay inside B; default is all of B.
    """
    q = state.q[..., B.start:B.stop]
    p = state.p[..., B.start:B.stop]
    n = len(B)
    sites = range(n) if sites is None else sites
    e = 0.0
    for y in sites:
        e = e + 0.5 * p[..., y] ** 2 + 0.5 * omega_B[y] ** 2 * q[..., y] ** 2
        if y + 1 < n:
            e = e + 0.5 * g0 * (q[..., y + 1] - q[..., y]) ** 2
    return e


# -- coefficients ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplittingCoefficients:
    B: range
    midpoint: int
    gammaL: np.ndarray
    gammaR: np.ndarray
    alphaL: np.ndarray | None
    alphaR: np.ndarray | None
    model: str
    basis: EigenBasis
    left_weights: np.ndarray

    @property
    def ell(self) -> int:
        return len(self.B) // 2

    @property
    def coupling(self) -> float:
        return self.basis.operator.coupling

    def r(self) -> float:
        return float(boundary_mass(self.gammaL))

    def tilde_left(self, state: PhaseState):
        """H~_L evaluated through the mode energies."""
        return mode_energies(state, self.basis) @ self.left_weights

    def tilde_right(self, state: PhaseState):
        return mode_energies(state, self.basis) @ (1.0 - self.left_weights)

    def plain_left(self, state: PhaseState):
        omega_B = omega_from_operator(self.basis.operator)
        return restricted_energy(state, omega_B, self.coupling, self.B,
                                 range(self.midpoint - self.B.start + 1))

    def quadratic_form(self, state: PhaseState, side: str = "L"):
        g, a = (self.gammaL, self.alphaL) if side == "L" else (self.gammaR, self.alphaR)
        q = state.q[..., self.B.start:self.B.stop]
        p = state.p[..., self.B.start:self.B.stop]
        return np.einsum("...i,ij,...j->...", p, g, p) + np.einsum("...i,ij,...j->...", q, a, q)

    def to_csv(self) -> str:
        rows = ["matrix,z,w,value"]
        mats = {"gammaL": self.gammaL, "gammaR": self.gammaR}
        if self.alphaL is not None:
            mats.update(alphaL=self.alphaL, alphaR=self.alphaR)
        for name, m in mats.items():
            for i, z in enumerate(self.B):
                for j, w in enumerate(self.B):
                    rows.append(f"{name},{z},{w},{m[i, j]:.17g}")
        return "\n".join(rows) + "\n"


def omega_from_operator(op) -> np.ndarray:
    """Recover omega on the window from the classical Neumann diagonal."""
    n = op.size
    degree = np.full(n, 2.0)
    degree[[0, -1]] -= 1.0
    if n == 1:
        degree[:] = 0.0
    return np.sqrt(op.diag - op.coupling * degree)


def left_hessian(omega_B, g0: float, c: int) -> np.ndarray:
    """Hessian of H_L: on-site terms for local sites <= c plus their right bonds."""
    n = len(omega_B)
    K = np.zeros((n, n))
    for y in range(c + 1):
        K[y, y] += omega_B[y] ** 2
        if y + 1 < n:
            K[y, y] += g0
            K[y + 1, y + 1] += g0
            K[y, y + 1] -= g0
            K[y + 1, y] -= g0
    return K


def _coefficient_arrays(psi, nu2, omega_B, g0, c, model):
    """Batched gamma^L, alpha^L over leading axes of ``psi`` (..., n, n)."""
    n = psi.shape[-1]
    w = np.sum(psi[..., :c + 1, :] ** 2, axis=-2)
    PL = (np.arange(n) <= c).astype(float)
    mode_proj = (psi * w[..., None, :]) @ np.swapaxes(psi, -1, -2)
    if model == "quantum":
        return mode_proj - np.diag(PL), None, w
    gamma = 0.5 * (mode_proj - np.diag(PL))
    K = np.array([left_hessian(o, g0, c) for o in np.reshape(omega_B, (-1, n))])
    K = K.reshape(np.shape(omega_B)[:-1] + (n, n))
    alpha = 0.5 * ((psi * (w * nu2)[..., None, :]) @ np.swapaxes(psi, -1, -2) - K)
    return gamma, alpha, w


def splitting_coefficients(basis: EigenBasis, midpoint: int | None = None) -> SplittingCoefficients:
    """gamma/alpha matrices for the window of ``basis`` cut at ``midpoint``.

    Classical: ``gamma^L = (Psi diag(w) Psi^T - P_L) / 2`` with
    ``w_k = sum_{y <= x} psi_k(y)^2``, and ``alpha^L`` the analogous
    nu^2-weighted form minus the Hessian of H_L.  Quantum: the coefficient
    of ``c^dag_z c_w`` in ``N~_L - N_L``, i.e. ``Psi diag(w) Psi^T - P_L``.
    Right-side matrices are the negatives.
    """
    op = basis.operator
    B = op.B
    if len(B) % 2 == 0:
        raise SplittingContractError("window must have odd size 2l + 1")
    centre = B.start + len(B) // 2
    if midpoint is None:
        midpoint = centre
    if midpoint != centre:
        raise SplittingContractError(f"midpoint {midpoint} is not the centre of {B}")
    c = midpoint - B.start
    if op.model == "classical":
        omega_B = omega_from_operator(op)
    else:
        omega_B = op.diag - 2 * op.coupling
    gamma, alpha, w = _coefficient_arrays(basis.psi, basis.nu2, omega_B, op.coupling, c, op.model)
    gamma = 0.5 * (gamma + gamma.T)
    if alpha is not None:
        alpha = 0.5 * (alpha + alpha.T)
    return SplittingCoefficients(B, midpoint, gamma, -gamma,
                                 alpha, None if alpha is None else -alpha,
                                 op.model, basis, w)


def boundary_mass(gammaL: np.ndarray) -> np.ndarray:
    """r_x = sum over the two boundary rows of |gamma^L|."""
    a = np.abs(gammaL)
    return np.sum(a[..., 0, :], axis=-1) + np.sum(a[..., -1, :], axis=-1)


def harmonic_flow(op, q, p, t: float):
    """Exact flow of the restricted harmonic Hamiltonian for time t.

    Uses the matrix exponential of the first-order generator, independently
    of any eigendecomposition.
    """
    import scipy.linalg

    n = op.size
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -op.dense()
    z = scipy.linalg.expm(A * t) @ np.concatenate([q, p])
    return z[:n], z[n:]


# -- corrector and residual ---------------------------------------------------

@dataclass
class ResidualData:
    """u_x, f_x and r_x for one window (classical chain).

    ``u(state) = H~_L - H_L - mean_shift`` and
    ``f(state) = 2 g0 sum_w p_w (gamma^L_{x+l,w} (q_{x+l+1} - q_{x+l})
                                + gamma^L_{x-l,w} (q_{x-l-1} - q_{x-l}))``
    so that ``L u_x = j_x + f_x`` along the full dynamics.
    """

    coeffs: SplittingCoefficients
    g0: float
    r: float
    mean_shift: float

    @property
    def x(self) -> int:
        return self.coeffs.midpoint

    def _qp(self, state):
        B = self.coeffs.B
        return state.q[..., B.start:B.stop], state.p[..., B.start:B.stop]

    def u(self, state: PhaseState):
        return self.coeffs.quadratic_form(state, "L") - self.mean_shift

    def _outside(self, q_full, site, fallback):
        L = q_full.shape[-1]
        return q_full[..., site] if 0 <= site < L else fallback

    def f(self, state: PhaseState):
        B, g = self.coeffs.B, self.coeffs.gammaL
        q, p = self._qp(state)
        lo, hi = B.start, B.stop - 1
        q_left = self._outside(state.q, lo - 1, state.q[..., lo])
        q_right = self._outside(state.q, hi + 1, state.q[..., hi])
        right = (p @ g[-1]) * (q_right - state.q[..., hi])
        left = (p @ g[0]) * (q_left - state.q[..., lo])
        return 2 * self.g0 * (right + left)

    def j(self, state: PhaseState):
        x = self.x
        return -self.g0 * state.p[..., x + 1] * (state.q[..., x + 1] - state.q[..., x])

    def liouville_u(self, state: PhaseState, F: np.ndarray):
        """Exact time derivative of u given the full-chain force ``F``."""
        B = self.coeffs.B
        q, p = self._qp(state)
        FB = F[..., B.start:B.stop]
        return 2 * (np.einsum("...i,ij,...j->...", p, self.coeffs.alphaL, q)
                    + np.einsum("...i,ij,...j->...", FB, self.coeffs.gammaL, p))


def gibbs_mean_shift(coeffs: SplittingCoefficients, beta: float, q_cov_B: np.ndarray) -> float:
    """<H~_L - H_L>_beta from <p_z p_w> = delta/beta and a q-covariance on B."""
    return float(np.trace(coeffs.gammaL) / beta + np.sum(coeffs.alphaL * q_cov_B))


def residuals(coeffs: SplittingCoefficients, params, beta_or_mu: float | None = None,
              gibbs_oracle=None, real: DisorderRealization | None = None):
    """Corrector/residual data for a window with tau = 0 on it.

    Classical: ``params`` is a :class:`ChainParams` (or the coupling g0).
    The mean shift is exact when the whole chain is harmonic (from the
    inverse Anderson operator); otherwise ``gibbs_oracle`` must supply
    either q-samples of shape (n, L) or a covariance matrix on B.

    Quantum: returns :class:`sparsechain.fermion.QuantumResidual`.
    """
    B = coeffs.B
    if real is not None and np.any(real.tau[B.start:B.stop]):
        raise SplittingContractError("tau must vanish on the window (x must lie in G0)")
    if coeffs.model == "quantum":
        from .fermion import quantum_residuals

        return quantum_residuals(coeffs, params, beta_or_mu, real)
    g0 = params.g0 if isinstance(params, ChainParams) else float(params)
    beta = params.beta if isinstance(params, ChainParams) and beta_or_mu is None else beta_or_mu
    shift = 0.0
    if beta is not None:
        cov_B = None
        if gibbs_oracle is not None:
            arr = np.asarray(gibbs_oracle.q if hasattr(gibbs_oracle, "q") else gibbs_oracle)
            if arr.shape == (len(B), len(B)):
                cov_B = arr
            else:
                qs = arr[:, B.start:B.stop]
                cov_B = qs.T @ qs / len(qs)
        elif real is not None:
            g = params.g if isinstance(params, ChainParams) else 0.0
            if g == 0 or not np.any(real.tau):
                full = harmonic_covariance(real, ChainParams(g=0.0, g0=g0, beta=beta))
                cov_B = full[B.start:B.stop, B.start:B.stop]
        if cov_B is None:
            raise SplittingContractError(
                "anharmonic chain: pass gibbs_oracle samples to fix the mean of u")
        shift = gibbs_mean_shift(coeffs, beta, cov_B)
    return ResidualData(coeffs, g0, coeffs.r(), shift)


def window_r_values(omega, sites, ell: int, coupling: float = 1.0,
                    model: str = "classical", chunk: int = 4096) -> np.ndarray:
    """r_x for the windows B(x, l) centred at each of ``sites``, batched."""
    omega = np.asarray(omega, float)
    sites = np.asarray(sites, dtype=int)
    n = 2 * ell + 1
    out = np.empty(len(sites))
    offsets = np.arange(-ell, ell + 1)
    # operator without the on-site term; V is added per window below
    shift, off = tridiagonal_arrays(np.zeros(n), range(n), model, coupling)
    for lo in range(0, len(sites), chunk):
        w = omega[sites[lo:lo + chunk, None] + offsets]
        diag = (w * w if model == "classical" else w) + shift
        _, psi = batched_eigh(diag, np.broadcast_to(off, (len(w), n - 1)))
        gamma, _, _ = _coefficient_arrays(psi, None, w, coupling, ell, "quantum")
        out[lo:lo + chunk] = boundary_mass(gamma) * (0.5 if model == "classical" else 1.0)
    return out


# -- ensemble statistics -------------------------------------------------------

def _window_ensemble(spec: DisorderSpec, ell: int, ensemble: int, model: str, coupling: float,
                     salt: int = 0):
    """Batched eigenbases for independent windows of size 2l + 1 (tau = 0)."""
    n = 2 * ell + 1
    seeds = ensemble_seeds(spec.seed + 1_000_003 * ell + salt, ensemble)
    omega = np.array([omega_window(spec.with_seed(s), 0, n) for s in seeds])
    diag, off = zip(*(tridiagonal_arrays(w, range(n), model, coupling) for w in omega))
    nu2, psi = batched_eigh(np.array(diag), np.array(off))
    om_B = omega if model == "classical" else omega
    gamma, alpha, _ = _coefficient_arrays(psi, nu2, om_B, coupling, ell, model)
    return gamma, alpha


@dataclass
class DecayTable:
    ell: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    rate: float
    rate_stderr: float
    r_squared: float
    fit_window: tuple
    inverse_xi: float | None = None
    quantiles: dict | None = None
    samples: dict | None = None

    @property
    def rate_ratio(self) -> float | None:
        return None if not self.inverse_xi else self.rate * (1.0 / self.inverse_xi)

    def to_csv(self) -> str:
        head = "ell,mean,stderr"
        if self.quantiles:
            head += ",q50,q95"
        rows = [head]
        for i, l in enumerate(self.ell):
            row = f"{l},{self.mean[i]:.17g},{self.stderr[i]:.17g}"
            if self.quantiles:
                row += f",{self.quantiles['q50'][i]:.17g},{self.quantiles['q95'][i]:.17g}"
            rows.append(row)
        return "\n".join(rows) + "\n"


def _fit_decay(ells, means, fit_window):
    ells = np.asarray(ells)
    lo, hi = fit_window if fit_window else (ells[0], ells[-1])
    sel = (ells >= lo) & (ells <= hi) & (np.asarray(means) > 0)
    slope, _, se, r2 = log_linear_fit(ells[sel], np.asarray(means)[sel])
    return -slope, se, r2, (int(ells[sel][0]), int(ells[sel][-1]))


def boundary_decay_experiment(spec: DisorderSpec, ell_range, ensemble: int = 200,
                              coupling: float = 1.0, xi_hat: float | None = None,
                              fit_window=None, model: str = "classical") -> DecayTable:
    """E(sum_w |gamma_{z,w}| + |alpha_{z,w}|) for z on the window boundary, versus l.

    Both boundary rows (z = x - l and z = x + l) contribute; the exponential
    rate of the mean is fitted over ``fit_window`` (default: all l).
    """
    if ensemble < 200:
        raise ValueError("ensemble must be >= 200 per l")
    ells = np.array(sorted(ell_range))
    means, errs = [], []
    for ell in ells:
        gamma, alpha = _window_ensemble(spec, int(ell), ensemble, model, coupling)
        val = boundary_mass(gamma)
        if alpha is not None:
            val = val + boundary_mass(alpha)
        means.append(val.mean())
        errs.append(val.std(ddof=1) / math.sqrt(ensemble))
    rate, se, r2, win = _fit_decay(ells, means, fit_window)
    return DecayTable(ells, np.array(means), np.array(errs), rate, se, r2, win,
                      None if xi_hat is None else 1.0 / xi_hat)


def r_statistics(spec: DisorderSpec, ell, ensemble: int = 500, coupling: float = 1.0,
                 xi_hat: float | None = None, fit_window=None, model: str = "classical",
                 keep_samples: bool = False) -> DecayTable:
    """Distribution of r_x over windows with tau = 0, for one or several l."""
    if ensemble < 500:
        raise ValueError("ensemble must be >= 500")
    ells = np.atleast_1d(np.array(ell, dtype=int))
    means, errs, q50, q95, samples = [], [], [], [], {}
    for l in ells:
        gamma, _ = _window_ensemble(spec, int(l), ensemble, model, coupling, salt=17)
        r = boundary_mass(gamma)
        means.append(r.mean())
        errs.append(r.std(ddof=1) / math.sqrt(ensemble))
        q50.append(np.quantile(r, 0.5))
        q95.append(np.quantile(r, 0.95))
        if keep_samples:
            samples[int(l)] = r
    if len(ells) >= 2:
        rate, se, r2, win = _fit_decay(ells, means, fit_window)
    else:
        rate, se, r2, win = float("nan"), float("nan"), float("nan"), (int(ells[0]), int(ells[0]))
    return DecayTable(ells, np.array(means), np.array(errs), rate, se, r2, win,
                      None if xi_hat is None else 1.0 / xi_hat,
                      {"q50": np.array(q50), "q95": np.array(q95)}, samples or None)
