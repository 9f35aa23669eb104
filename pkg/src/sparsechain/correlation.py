"""Current-correlation functional C(t), exponent fits and the decomposition audit.

``C(t) = <(int_0^t sum_x j_x(s) ds)^2> / L`` is estimated at fixed L over an
ensemble of disorder realizations, each started from one Gibbs-distributed
phase-space point (classical) or from the product state (quantum).
"""

from __future__ import annotations

import io
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson

from .classical_chain import (ChainParams, Trajectory, energy_densities, evolve_batch, force_array,
                              gibbs_initial_batch)
from .disorder import DisorderRealization, DisorderSpec, ensemble_seeds, sample_disorder


class FitError(ValueError):
    pass


class RunInvalidError(RuntimeError):
    """Too many ensemble members were dropped for exceeding the drift budget."""


class IdentityViolation(AssertionError):
    pass


@dataclass
class CorrelationSeries:
    t_grid: np.ndarray
    C_hat: np.ndarray
    stderr: np.ndarray
    meta: dict = field(default_factory=dict)
    samples: np.ndarray | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "C", "stderr"])
        for t, c, s in zip(self.t_grid, self.C_hat, self.stderr):
            w.writerow([f"{t:.10g}", f"{c:.17g}", f"{s:.17g}"])
        return buf.getvalue()

    def meta_json(self) -> str:
        return json.dumps(self.meta, indent=2, sort_keys=True, default=_jsonable)

    def at(self, t: float) -> tuple[float, float]:
        i = int(np.argmin(np.abs(self.t_grid - t)))
        return float(self.C_hat[i]), float(self.stderr[i])

    def subset(self, rows) -> "CorrelationSeries":
        """Series recomputed from a subset of the per-member samples."""
        s = self.samples[rows]
        return CorrelationSeries(self.t_grid, s.mean(axis=0),
                                 s.std(axis=0, ddof=1) / math.sqrt(len(s)),
                                 {**self.meta, "ensemble": len(s)}, s)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# -- classical estimator ------------------------------------------------------------

def time_grid(t_max: float, dt: float, n_points: int = 200, spacing: str = "log"):
    """Step indices and times of the output grid (t = 0 always included)."""
    n_steps = int(round(t_max / dt))
    if spacing == "log":
        idx = np.unique(np.geomspace(1, n_steps, n_points).astype(int))
    else:
        idx = np.unique(np.linspace(0, n_steps, n_points).astype(int))
    idx = np.unique(np.concatenate([[0], idx, [n_steps]]))
    return n_steps, idx, idx * dt


def integrate_series(y: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative integral of samples on a uniform grid (axis 0), 4th order."""
    out = np.zeros_like(y)
    if len(y) >= 3:
        out[1:] = cumulative_simpson(y, dx=dt, axis=0)
    elif len(y) == 2:
        out[1] = 0.5 * dt * (y[0] + y[1])
    return out


def draw_members(spec: DisorderSpec, L: int, seeds, dense: bool = False):
    omega, tau = [], []
    for s in seeds:
        real = sample_disorder(spec.with_length(L).with_seed(s))
        omega.append(real.omega)
        tau.append(np.ones(L) if dense else real.tau.astype(float))
    return np.array(omega), np.array(tau)


def _batch_job(spec, params, L, t_max, dt, seeds, dense, scheme, burn_in, energy_every,
               n_points, spacing):
    """One fixed batch of members; its RNG depends only on the batch's seeds."""
    omega, tau = draw_members(spec, L, seeds, dense)
    rng = np.random.default_rng(np.random.SeedSequence([int(s) for s in seeds]))
    q, p = gibbs_initial_batch(omega, tau, params, rng, burn_in)
    stiff = np.max(omega**2) + 4 * params.g0 + 3 * params.g * np.max(q * q)
    limit = 0.05 / math.sqrt(stiff)
    if dt is not None and dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds dt_max={limit:.4g}")
    if dt is None:
        n_steps = max(1, math.ceil(t_max / limit))
        step = t_max / n_steps
    else:
        step = dt
    n_steps, idx, t_out = time_grid(t_max, step, n_points, spacing)
    run = evolve_batch(q, p, omega, tau, params.g, params.g0, step, n_steps, scheme,
                       record_energy_every=energy_every)
    Q = integrate_series(run.current_sum, step)[idx].T  # member, time
    return Q**2 / L, np.asarray(run.drift), t_out, step


def estimate_C_classical(spec: DisorderSpec, params: ChainParams, L: int, t_max: float,
                         dt: float | None = None, ensemble: int = 200, n_points: int = 200,
                         spacing: str = "log", dense: bool = False, scheme: str = "verlet",
                         drift_budget: float = 1e-6, seeds=None, burn_in: int = 10_000,
                         batch: int = 256, energy_every: int = 10,
                         workers: int = 1) -> CorrelationSeries:
    """Ensemble estimate of C(t) for the classical chain.

    Each member has its own disorder (seeded from ``spec.seed``) and one
    Gibbs initial condition.  ``dense=True`` sets every tau_x = 1, the fully
    interacting chain.  ``dt`` defaults to dt_max of each batch, rounded
    down so that t_max is a whole number of steps; when given, the grid
    times of every batch coincide.  Members whose energy drift exceeds
    ``drift_budget`` are dropped; more than 5% dropped raises
    :class:`RunInvalidError`.  Batches are fixed by ``batch``, so the result
    does not depend on ``workers``.
    """
    if ensemble < 50:
        raise ValueError("ensemble must be >= 50")
    seeds = ensemble_seeds(spec.seed, ensemble) if seeds is None else list(seeds)
    jobs = [(spec, params, L, t_max, dt, seeds[lo:lo + batch], dense, scheme, burn_in,
             energy_every, n_points, spacing) for lo in range(0, len(seeds), batch)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_batch_job, *zip(*jobs)))
    else:
        results = [_batch_job(*job) for job in jobs]
    t_out = results[0][2]
    samples, dropped = [], 0
    for Q2, drift, t_b, _ in results:
        if len(t_b) != len(t_out) or not np.allclose(t_b, t_out, rtol=1e-6):
            Q2 = np.array([np.interp(t_out, t_b, row) for row in Q2])
        ok = drift <= drift_budget
        dropped += int(np.sum(~ok))
        samples.append(Q2[ok])
    samples = np.concatenate(samples)
    if dropped > 0.05 * len(seeds):
        raise RunInvalidError(f"{dropped}/{len(seeds)} members exceeded the drift budget")
    n = len(samples)
    meta = {"model": "classical", "L": L, "p": 1.0 if dense else spec.p, "g": params.g,
            "g0": params.g0, "beta": params.beta, "ensemble": n, "dropped": dropped,
            "dt": max(r[3] for r in results), "scheme": scheme, "t_max": t_max,
            "seed": spec.seed, "omega_law": [spec.omega_law.low, spec.omega_law.high]}
    return CorrelationSeries(t_out, samples.mean(axis=0),
                             samples.std(axis=0, ddof=1) / math.sqrt(n), meta, samples)


def estimate_C_quantum(spec: DisorderSpec, params, L: int, t_grid, ensemble: int = 20,
                       seeds=None) -> CorrelationSeries:
    """Disorder average of the free (g = 0) or ED (g > 0) C(t)."""
    from .fermion import ed_build, ed_current_correlation, free_current_correlation

    seeds = ensemble_seeds(spec.seed, ensemble) if seeds is None else list(seeds)
    rows = []
    for s in seeds:
        real = sample_disorder(spec.with_length(L).with_seed(s))
        if params.g == 0:
            rows.append(free_current_correlation(real, params, t_grid).C_hat)
        else:
            rows.append(ed_current_correlation(ed_build(real, params), params.mu, t_grid).C_hat)
    rows = np.array(rows)
    n = len(rows)
    err = rows.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(rows.shape[1])
    meta = {"model": "quantum", "L": L, "J": params.J, "g": params.g, "mu": params.mu,
            "p": spec.p, "ensemble": n, "seed": spec.seed,
            "method": "wick" if params.g == 0 else "ed"}
    return CorrelationSeries(np.asarray(t_grid, float), rows.mean(axis=0), err, meta, rows)


def _phase_integral(delta, t):
    """int_0^t exp(i delta s) ds, t-linear for |delta| < 1e-12."""
    small = np.abs(delta) < 1e-12
    safe = np.where(small, 1.0, delta)
    return np.where(small, t + 0j, (np.exp(1j * safe * t) - 1) / (1j * safe))


def harmonic_current_correlation(real: DisorderRealization, params: ChainParams,
                                 t_grid) -> np.ndarray:
    """Exact Gibbs average of (int_0^t sum_x j_x)^2 / L for the harmonic chain.

    With g = 0 (or no interactions) the flow is linear and the Gibbs state
    Gaussian.  In complex mode amplitudes ``c_k = nu_k a_k + i b_k`` the
    flow is ``c_k e^{-i nu_k t}``, so the time integral of the current is a
    quadratic form ``z^T M(t) z`` in closed form, with ``z`` the real and
    imaginary parts of ``c`` (variance 1/beta each).  Isserlis then gives
    ``<Q^2> = (tr M / beta)^2 + 2 tr(M^2) / beta^2``.
    """
    from .anderson import build_operator, eigendecompose

    if params.g != 0 and np.any(real.tau):
        raise ValueError("the closed form needs a harmonic chain (g = 0 or tau = 0)")
    L, g0 = real.L, params.g0
    t_grid = np.asarray(t_grid, float)
    if L == 1:
        return np.zeros_like(t_grid)
    basis = eigendecompose(build_operator(real, coupling=g0))
    psi, nu = basis.psi, np.sqrt(basis.nu2)
    S = np.zeros((L, L))
    i = np.arange(L - 1)
    S[i + 1, i + 1] = -g0
    S[i + 1, i] = g0
    # sum_x j_x = sum_kl T_kl b_k a_l = sum_kl T_kl Im(c_k) Re(c_l) / nu_l
    base = (psi.T @ S @ psi) / (4j * nu[None, :])
    nsum = nu[:, None] + nu[None, :]
    ndiff = nu[:, None] - nu[None, :]
    s = 1.0 / params.beta
    out = np.empty(len(t_grid))
    for n, t in enumerate(t_grid):
        P = base * _phase_integral(-nsum, t)      # c_k c_l
        R = base * _phase_integral(-ndiff, t)     # c_k conj(c_l)
        Rb = -base * _phase_integral(ndiff, t)    # conj(c_k) c_l
        Pb = -base * _phase_integral(nsum, t)     # conj(c_k) conj(c_l)
        M = np.block([[P + Rb + R + Pb, 1j * (P + Rb - R - Pb)],
                      [1j * (P - Rb + R - Pb), R - Pb - P + Rb]]).real
        M = 0.5 * (M + M.T)
        out[n] = (s * np.trace(M)) ** 2 + 2 * s * s * np.sum(M * M)
    return out / L


def estimate_C_harmonic(spec: DisorderSpec, params: ChainParams, L: int, t_grid,
                        ensemble: int = 200, seeds=None) -> CorrelationSeries:
    """Disorder average of the exact harmonic C(t); no initial-condition noise.

    Members use the same disorder seeds as :func:`estimate_C_classical`, so
    the two estimates differ only by the Monte Carlo over initial states.
    """
    seeds = ensemble_seeds(spec.seed, ensemble) if seeds is None else list(seeds)
    harmonic = ChainParams(g=0.0, g0=params.g0, beta=params.beta)
    rows = np.array([harmonic_current_correlation(sample_disorder(spec.with_length(L).with_seed(s)),
                                                  harmonic, t_grid) for s in seeds])
    n = len(rows)
    err = rows.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(rows.shape[1])
    meta = {"model": "classical", "L": L, "p": spec.p, "g": 0.0, "g0": params.g0,
            "beta": params.beta, "ensemble": n, "seed": spec.seed, "method": "gaussian-exact"}
    return CorrelationSeries(np.asarray(t_grid, float), rows.mean(axis=0), err, meta, rows)


@dataclass
class DoublingCheck:
    small: CorrelationSeries
    large: CorrelationSeries
    max_z: float

    @property
    def consistent(self) -> bool:
        return self.max_z <= 3.0


def l_doubling_check(spec, params, L: int, t_max: float, ensemble: int = 100, **kw) -> DoublingCheck:
    """Compare C(t) at L and 2L; consistent when every grid point is within 3 sigma."""
    a = estimate_C_classical(spec, params, L, t_max, ensemble=ensemble, **kw)
    b = estimate_C_classical(spec.with_seed(spec.seed + 1), params, 2 * L, t_max,
                             ensemble=ensemble, **kw)
    n = min(len(a.t_grid), len(b.t_grid))
    err = np.hypot(a.stderr[:n], b.stderr[:n])
    z = np.abs(a.C_hat[:n] - b.C_hat[:n]) / np.where(err > 0, err, np.inf)
    return DoublingCheck(a, b, float(np.max(z[1:])) if n > 1 else 0.0)


# -- exponent fit ---------------------------------------------------------------------

@dataclass
class ExponentFit:
    gamma_hat: float
    window: tuple
    stderr: float
    r_squared: float
    n_points: int
    method: str = "ols"

    def to_json(self) -> str:
        return json.dumps({"gamma_hat": self.gamma_hat, "window": list(self.window),
                           "stderr": self.stderr, "r_squared": self.r_squared,
                           "n_points": self.n_points, "stderr_method": self.method}, indent=2)


def _loglog(t, c):
    lt, lc = np.log(t), np.log(c)
    A = np.vstack([lt, np.ones_like(lt)]).T
    coef, *_ = np.linalg.lstsq(A, lc, rcond=None)
    resid = lc - A @ coef
    ss = np.sum((lc - lc.mean()) ** 2)
    r2 = 1 - np.sum(resid**2) / ss if ss > 0 else 1.0
    se = math.sqrt(np.sum(resid**2) / max(len(t) - 2, 1) / np.sum((lt - lt.mean()) ** 2))
    return float(coef[0]), float(r2), se


def fit_exponent(series: CorrelationSeries, window=None, n_blocks: int = 50) -> ExponentFit:
    """Least-squares slope of log C against log t over ``window``.

    The default window is the last decade of the grid.  When the series
    carries per-member samples, the standard error is a delete-one-block
    jackknife over ``n_blocks`` blocks of members; otherwise the OLS one.
    """
    t = np.asarray(series.t_grid, float)
    if window is None:
        window = (t[-1] / 10, t[-1])
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    if sel.sum() < 8:
        raise FitError(f"only {int(sel.sum())} grid points in window {window}; need >= 8")
    c = np.asarray(series.C_hat)[sel]
    if np.any(c <= 0):
        raise FitError("nonpositive C values in the fit window")
    slope, r2, se = _loglog(t[sel], c)
    method = "ols"
    if series.samples is not None and len(series.samples) >= 10:
        s = series.samples[:, sel]
        blocks = np.array_split(np.arange(len(s)), min(n_blocks, len(s)))
        total = s.sum(axis=0)
        est = []
        for b in blocks:
            rest = (total - s[b].sum(axis=0)) / (len(s) - len(b))
            if np.any(rest <= 0):
                continue
            est.append(_loglog(t[sel], rest)[0])
        est = np.array(est)
        k = len(est)
        if k >= 2:
            se = float(math.sqrt((k - 1) / k * np.sum((est - est.mean()) ** 2)))
            method = "jackknife"
    return ExponentFit(slope, (float(lo), float(hi)), float(se), r2, int(sel.sum()), method)


# -- decomposition audit ----------------------------------------------------------------

@dataclass
class DecompositionAudit:
    times: np.ndarray
    current_integral: np.ndarray       # int_0^t sum_x j_x
    residual_integral: np.ndarray      # int_0^t sum_x f_{x_G}
    boundary_term: np.ndarray          # sum_x v_x(t) - sum_x v_x(0)
    max_relative_residual: float
    I1: float                          # (int sum f)^2 at the final time
    I2: float                          # (delta sum v)^2 at the final time


def _v_coefficients(L: int, G, sign_right: int = -1):
    """For each site y, how many times h_y enters sum_x v_x, and the u multiplicities.

    ``sum_x v_x = sum_g m_g u_g + sum_y k_y h_y`` over bonds x = 0..L-2.
    """
    from .griffiths import nearest_map

    xG = nearest_map(L, G)[:L - 1]
    m = {int(g): 0 for g in G}
    k = np.zeros(L)
    for x, g in enumerate(xG):
        m[int(g)] += 1
        if x < g:
            k[x + 1:g + 1] += 1
        elif x > g:
            k[g + 1:x + 1] += sign_right
    return xG, m, k


def audit_current_decomposition(trajectory: Trajectory, gindex, residuals: dict,
                                real: DisorderRealization, params: ChainParams,
                                tol: float = 1e-6, sign_right: int = -1,
                                atol: float = 0.0) -> DecompositionAudit:
    """Check int sum j = -int sum f_{x_G} + sum v_x(t) - sum v_x(0) along a trajectory.

    ``residuals`` maps each g in G to its :class:`~sparsechain.splitting.ResidualData`.
    The trajectory must hold a snapshot at every step; time integrals use
    cumulative Simpson.  ``sign_right`` is the sign of the h-sum for bonds to
    the right of x_G (flip it to see the identity fail).  Raises
    :class:`IdentityViolation` when the residual exceeds
    ``100 (tol * scale + atol)``; ``atol`` matters only when every term is
    near zero (e.g. g0 -> 0), where the relative residual is meaningless.
    """
    G = np.asarray(gindex.G if hasattr(gindex, "G") else gindex)
    if len(G) == 0:
        raise IdentityViolation("G is empty; nothing to audit")
    if trajectory.stride != 1:
        raise ValueError("the audit needs a snapshot at every step")
    L = real.L
    qs = np.array([s.q for s in trajectory.states])
    ps = np.array([s.p for s in trajectory.states])
    _, m, k = _v_coefficients(L, G, sign_right)
    h = energy_densities(qs, ps, real.omega, real.tau, params.g, params.g0)
    v = h @ k
    fsum = np.zeros(len(qs))
    for g, mult in m.items():
        if mult:
            res = residuals[g]
            v = v + mult * res.u(_States(qs, ps))
            fsum = fsum + mult * res.f(_States(qs, ps))
    dt = trajectory.dt
    jsum = trajectory.current_sum[: len(qs)] if hasattr(trajectory, "current_sum") else \
        trajectory.current_sum_series[: len(qs)]
    Ij = integrate_series(jsum, dt)
    If = integrate_series(fsum, dt)
    dv = v - v[0]
    resid = Ij - (-If + dv)
    scale = max(np.max(np.abs(Ij)), np.max(np.abs(If)), np.max(np.abs(dv)), np.finfo(float).tiny)
    rel = float(np.max(np.abs(resid)) / scale)
    audit = DecompositionAudit(trajectory.times[: len(qs)], Ij, If, dv, rel,
                               float(If[-1] ** 2), float(dv[-1] ** 2))
    if np.max(np.abs(resid)) > 100 * (tol * scale + atol):
        raise IdentityViolation(f"decomposition residual {rel:.3g} exceeds 100 x {tol:g}")
    return audit


@dataclass
class _States:
    """Stack of phase-space points shaped like PhaseState (leading time axis)."""

    q: np.ndarray
    p: np.ndarray


def poisson_residual(trajectory: Trajectory, res, real: DisorderRealization,
                     params: ChainParams) -> np.ndarray:
    """d/dt u_x - j_x - f_x along a trajectory, d/dt by a 5-point stencil."""
    qs = np.array([s.q for s in trajectory.states])
    ps = np.array([s.p for s in trajectory.states])
    st = _States(qs, ps)
    u = res.u(st)
    dt = trajectory.dt
    du = (u[:-4] - 8 * u[1:-3] + 8 * u[3:-1] - u[4:]) / (12 * dt)
    rhs = res.j(st) + res.f(st)
    return du - rhs[2:-2]


def liouville_residual(states, res, real: DisorderRealization, params: ChainParams) -> np.ndarray:
    """Exact L u_x - j_x - f_x at each state (analytic time derivative)."""
    F = force_array(states.q, real.omega, real.tau.astype(float), params.g, params.g0)
    return res.liouville_u(states, F) - res.j(states) - res.f(states)


def quantum_decomposition_error(real: DisorderRealization, qparams, ell: int, G=None) -> float:
    """|| i[H, sum_x v_x] - sum_x j_x - sum_x f_{x_G} || on the full ED chain.

    v_x uses the particle numbers n_y in place of the energies.
    """
    import scipy.sparse as sp

    from .anderson import build_operator, eigendecompose
    from .fermion import ManyBodyOperator, ed_build, sparse_norm
    from .griffiths import compute_G0
    from .splitting import splitting_coefficients, window

    G = compute_G0(real.tau, ell) if G is None else np.asarray(G)
    if len(G) == 0:
        raise IdentityViolation("G is empty")
    system = ed_build(real, qparams)
    L = real.L
    _, m, k = _v_coefficients(L, G)
    dim = system.dim
    V = sp.csr_matrix((dim, dim), dtype=complex)
    Fsum = sp.csr_matrix((dim, dim), dtype=complex)
    for y in range(L):
        if k[y]:
            V = V + k[y] * system.n[y].matrix
    for g, mult in m.items():
        if not mult:
            continue
        B = window(g, ell)
        coeffs = splitting_coefficients(eigendecompose(build_operator(real, B, "quantum", qparams.J)))
        u = system.quadratic(coeffs.gammaL, B)
        Hd = sp.csr_matrix((dim, dim), dtype=complex)
        for a in (B.start - 1, B.stop - 1):
            if 0 <= a and a + 1 < L:
                Hd = Hd + qparams.J * (system.hop(a, a + 1) + system.hop(a + 1, a))
                Hd = Hd + qparams.g * real.tau[a] * (system.n[a].matrix @ system.n[a + 1].matrix)
        V = V + mult * u.matrix
        Fsum = Fsum + mult * (1j * (Hd @ u.matrix - u.matrix @ Hd))
    lhs = 1j * system.H.commutator(ManyBodyOperator(V.tocsr()))
    return sparse_norm(lhs - system.total_current() - Fsum)
