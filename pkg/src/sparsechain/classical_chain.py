"""Classical anharmonic chain with sparse quartic pinning.

    H(q, p) = sum_x  p_x^2/2 + omega_x^2 q_x^2/2 + g tau_x q_x^4/4
                     + g0 (q_{x+1} - q_x)^2/2

with the Neumann convention q_{L} = q_{L-1} (0-based), so the last bond
term vanishes.  Energy current across bond (x, x+1) is
``j_x = -g0 p_{x+1} (q_{x+1} - q_x)`` and ``dh_x/dt = j_{x-1} - j_x``.

Array helpers take ``q, p`` of shape ``(..., L)`` and broadcast over
leading batch axes, which is how ensembles are integrated in one pass.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .disorder import DisorderRealization


class IntegrationError(RuntimeError):
    """Energy drift exceeded its budget; retry with a smaller time step."""


class SamplingError(RuntimeError):
    """The Gibbs sampler produced too few effective samples."""


@dataclass(frozen=True)
class ChainParams:
    g: float = 1.0
    g0: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.g >= 0 and self.g0 > 0 and self.beta > 0):
            raise ValueError("need g >= 0, g0 > 0, beta > 0")


@dataclass(frozen=True, eq=False)
class PhaseState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.shape != p.shape:
            raise ValueError("q and p must have the same shape")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("non-finite phase-space coordinates")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def L(self) -> int:
        return self.q.shape[-1]

    def copy(self) -> "PhaseState":
        return PhaseState(self.q.copy(), self.p.copy())


# -- Neumann bookkeeping ----------------------------------------------------

def bond_stretch(q: np.ndarray) -> np.ndarray:
    """``q_{x+1} - q_x`` for every site x, zero at the last site (Neumann)."""
    d = np.zeros_like(q)
    d[..., :-1] = q[..., 1:] - q[..., :-1]
    return d


def neumann_laplacian(q: np.ndarray) -> np.ndarray:
    """``q_{x-1} - 2 q_x + q_{x+1}`` with q_{-1} = q_0 and q_L = q_{L-1}."""
    d = bond_stretch(q)
    lap = d.copy()
    lap[..., 1:] -= d[..., :-1]
    return lap


# -- energies, currents, forces ---------------------------------------------

def energy_densities(q, p, omega, tau, g, g0) -> np.ndarray:
    return (0.5 * p**2 + 0.5 * omega**2 * q**2 + 0.25 * g * tau * q**4
            + 0.5 * g0 * bond_stretch(q) ** 2)


def energy_density(state: PhaseState, real: DisorderRealization, params: ChainParams,
                   x: int) -> float:
    """Local energy h_x at 0-based site x."""
    if not 0 <= x < state.L:
        raise IndexError(x)
    h = energy_densities(state.q, state.p, real.omega, real.tau, params.g, params.g0)
    return float(h[..., x])


def total_energy(state: PhaseState, real: DisorderRealization, params: ChainParams) -> float:
    """Total H as 1/2 p.p + 1/2 q.(V - g0 Delta) q + quartic part."""
    from .anderson import build_operator

    op = build_operator(real, model="classical", coupling=params.g0)
    q, p = state.q, state.p
    quartic = 0.25 * params.g * np.sum(real.tau * q**4, axis=-1)
    return 0.5 * np.sum(p * p, axis=-1) + 0.5 * np.sum(q * op.matvec(q), axis=-1) + quartic


def potential(q, omega, tau, g, g0):
    return np.sum(0.5 * omega**2 * q**2 + 0.25 * g * tau * q**4
                  + 0.5 * g0 * bond_stretch(q) ** 2, axis=-1)


def force_array(q, omega, tau, g, g0) -> np.ndarray:
    F = -(omega * omega + (g * tau) * (q * q)) * q
    d = g0 * (q[..., 1:] - q[..., :-1])
    F[..., :-1] += d
    F[..., 1:] -= d
    return F


def force(state: PhaseState, real: DisorderRealization, params: ChainParams) -> np.ndarray:
    """-grad_q H."""
    return force_array(state.q, real.omega, real.tau, params.g, params.g0)


def bond_currents(q, p, g0) -> np.ndarray:
    """Currents j_0 .. j_{L-2} across the L-1 bonds."""
    return -g0 * p[..., 1:] * (q[..., 1:] - q[..., :-1])


def current(state: PhaseState, params: ChainParams, x: int) -> float:
    """j_x across bond (x, x+1); j_{-1} = j_{L-1} = 0 by the boundary conditions."""
    L = state.L
    if not -1 <= x <= L - 1:
        raise IndexError(x)
    if x in (-1, L - 1):
        return 0.0
    return float(-params.g0 * state.p[..., x + 1] * (state.q[..., x + 1] - state.q[..., x]))


def total_current(q, p, g0) -> np.ndarray:
    return np.sum(bond_currents(q, p, g0), axis=-1)


def energy_bracket(state: PhaseState, real: DisorderRealization, params: ChainParams) -> np.ndarray:
    """Analytic ``{h_x, H}`` for every x, i.e. the time derivative of h_x.

    Coded from the chain rule on h_x, independently of the current formula,
    so it can be compared against ``j_{x-1} - j_x``.
    """
    q, p = state.q, state.p
    F = force(state, real, params)
    onsite = (real.omega**2 * q + params.g * real.tau * q**3) * p
    d = bond_stretch(q)
    dp = bond_stretch(p)
    return p * F + onsite + params.g0 * d * dp


def continuity_rhs(state: PhaseState, params: ChainParams) -> np.ndarray:
    j = np.zeros(state.L + 1)
    j[1:-1] = bond_currents(state.q, state.p, params.g0)
    return j[:-1] - j[1:]


# -- time integration -------------------------------------------------------

def dt_max(real: DisorderRealization, params: ChainParams, q_cap2: float = 0.0) -> float:
    """Largest admissible step: 0.05 / sqrt(max omega^2 + 4 g0 + 3 g q_cap^2)."""
    stiff = np.max(real.omega**2) + 4 * params.g0 + 3 * params.g * q_cap2
    return 0.05 / math.sqrt(stiff)


def shadow_energy(q, p, omega, tau, g, g0, dt) -> np.ndarray:
    """Velocity-Verlet modified energy, H + dt^2 (p.U''p / 12 - |U'|^2 / 24).

    Its error is O(dt^4), so it exposes secular drift that the O(dt^2)
    oscillation of H itself would hide.
    """
    F = force_array(q, omega, tau, g, g0)
    Hp = omega**2 * p + 3 * g * tau * q**2 * p - g0 * neumann_laplacian(p)
    H = potential(q, omega, tau, g, g0) + 0.5 * np.sum(p * p, axis=-1)
    return H + dt**2 * (np.sum(p * Hp, axis=-1) / 12 - np.sum(F * F, axis=-1) / 24)


_Y1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
YOSHIDA4 = (_Y1, 1.0 - 2.0 * _Y1, _Y1)


@dataclass
class BatchRun:
    """Result of :func:`evolve_batch` (leading axis of arrays = time)."""

    q: np.ndarray
    p: np.ndarray
    current_sum: np.ndarray
    energy: np.ndarray
    drift: np.ndarray
    snapshots: list


def evolve_batch(q, p, omega, tau, g, g0, dt, n_steps, scheme="verlet", stride=0,
                 record_energy_every=1):
    """Integrate Hamilton's equations for a batch of chains.

    Records the total bond current at every step (``n_steps + 1`` rows) and
    the relative drift of the monitored energy: the shadow energy for
    ``verlet`` and H itself for ``yoshida4``.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    subs = (1.0,) if scheme == "verlet" else YOSHIDA4
    if scheme not in ("verlet", "yoshida4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    monitor = ((lambda q, p: shadow_energy(q, p, omega, tau, g, g0, dt)) if scheme == "verlet"
               else (lambda q, p: potential(q, omega, tau, g, g0) + 0.5 * np.sum(p * p, axis=-1)))
    e0 = monitor(q, p)
    scale = np.maximum(np.abs(potential(q, omega, tau, g, g0) + 0.5 * np.sum(p * p, axis=-1)),
                       np.finfo(float).tiny)
    drift = np.zeros(np.shape(e0))
    cur = np.empty((n_steps + 1,) + q.shape[:-1])
    cur[0] = total_current(q, p, g0)
    energy = [e0]
    snaps = [(q.copy(), p.copy())] if stride else []
    F = force_array(q, omega, tau, g, g0)
    for n in range(1, n_steps + 1):
        for c in subs:
            h = c * dt
            p += 0.5 * h * F
            q += h * p
            F = force_array(q, omega, tau, g, g0)
            p += 0.5 * h * F
        cur[n] = total_current(q, p, g0)
        if record_energy_every and n % record_energy_every == 0:
            e = monitor(q, p)
            drift = np.maximum(drift, np.abs(e - e0) / scale)
            energy.append(e)
        if stride and n % stride == 0:
            snaps.append((q.copy(), p.copy()))
    return BatchRun(q, p, cur, np.array(energy), drift, snaps)


@dataclass
class Trajectory:
    dt: float
    states: list
    current_sum_series: np.ndarray
    energy_series: np.ndarray
    stride: int
    drift: float
    scheme: str = "verlet"

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.current_sum_series))

    @property
    def final(self) -> PhaseState:
        return self.states[-1]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "current_sum", "H"])
        every = max(1, (len(self.current_sum_series) - 1) // max(len(self.energy_series) - 1, 1))
        for i, e in enumerate(self.energy_series):
            n = i * every
            w.writerow([f"{n * self.dt:.10g}", f"{self.current_sum_series[n]:.17g}", f"{e:.17g}"])
        return buf.getvalue()

    def snapshots_json(self) -> str:
        return json.dumps({"dt": self.dt, "stride": self.stride,
                           "q": [s.q.tolist() for s in self.states],
                           "p": [s.p.tolist() for s in self.states]})


def verlet_evolve(state: PhaseState, real: DisorderRealization, params: ChainParams, T: float,
                  dt: float, stride: int = 1, scheme: str = "verlet",
                  drift_budget: float = 1e-6, check_dt: bool = True) -> Trajectory:
    """Symplectic evolution over time ``T`` (negative ``dt`` runs backwards).

    Raises :class:`IntegrationError` when the relative drift of the monitored
    energy exceeds ``drift_budget``.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if check_dt and abs(dt) > dt_max(real, params, float(np.max(state.q**2))):
        raise ValueError(f"dt={dt} exceeds dt_max={dt_max(real, params, float(np.max(state.q**2))):.4g}")
    n_steps = int(round(T / abs(dt)))
    run = evolve_batch(state.q, state.p, real.omega, real.tau, params.g, params.g0, dt, n_steps,
                       scheme=scheme, stride=stride)
    if float(run.drift) > drift_budget:
        raise IntegrationError(
            f"relative energy drift {float(run.drift):.2e} > budget {drift_budget:.0e}; reduce dt")
    states = [PhaseState(q, p) for q, p in run.snapshots] if stride else [PhaseState(run.q, run.p)]
    if stride and n_steps % stride:
        states.append(PhaseState(run.q, run.p))
    if scheme == "yoshida4":
        energy = run.energy
    else:
        qs = np.array([s.q for s in states])
        ps = np.array([s.p for s in states])
        energy = np.sum(energy_densities(qs, ps, real.omega, real.tau, params.g, params.g0), axis=-1)
    return Trajectory(abs(dt), states, run.current_sum, energy, stride, float(run.drift), scheme)


# -- Gibbs sampling ----------------------------------------------------------

def harmonic_covariance(real: DisorderRealization, params: ChainParams) -> np.ndarray:
    """Covariance of q under the Gibbs measure of the g = 0 chain."""
    from .anderson import build_operator

    return np.linalg.inv(build_operator(real, coupling=params.g0).dense()) / params.beta


def mala_log_ratio(q, q_new, log_pi, grad, log_pi_new, grad_new, eps):
    """log of pi(q') K(q|q') / (pi(q) K(q'|q)) for the Langevin proposal."""
    fwd = q_new - q - 0.5 * eps**2 * grad
    bwd = q - q_new - 0.5 * eps**2 * grad_new
    log_k_fwd = -np.sum(fwd * fwd, axis=-1) / (2 * eps**2)
    log_k_bwd = -np.sum(bwd * bwd, axis=-1) / (2 * eps**2)
    return log_pi_new + log_k_bwd - log_pi - log_k_fwd


class MALA:
    """Metropolis-adjusted Langevin chains targeting exp(-beta U(q)).

    All arrays carry a leading chain axis; ``omega``/``tau`` broadcast, so
    each chain may have its own disorder.
    """

    def __init__(self, omega, tau, params: ChainParams, eps: float, rng: np.random.Generator,
                 log_proposals: int = 0):
        self.omega, self.tau, self.params = omega, tau, params
        self.eps = eps
        self.rng = rng
        self.n_accepted = 0
        self.n_proposed = 0
        self.log = [] if log_proposals else None
        self._log_cap = log_proposals

    def log_pi(self, q):
        pr = self.params
        return -pr.beta * potential(q, self.omega, self.tau, pr.g, pr.g0)

    def grad_log_pi(self, q):
        pr = self.params
        return pr.beta * force_array(q, self.omega, self.tau, pr.g, pr.g0)

    def step(self, q, lp, grad):
        eps = self.eps
        q_new = q + 0.5 * eps**2 * grad + eps * self.rng.standard_normal(q.shape)
        lp_new = self.log_pi(q_new)
        grad_new = self.grad_log_pi(q_new)
        log_a = mala_log_ratio(q, q_new, lp, grad, lp_new, grad_new, eps)
        accept = np.log(self.rng.random(log_a.shape)) < log_a
        if self.log is not None and len(self.log) < self._log_cap:
            self.log.append((q[0].copy(), q_new[0].copy()))
        self.n_accepted += int(np.sum(accept))
        self.n_proposed += accept.size
        q = np.where(accept[..., None], q_new, q)
        lp = np.where(accept, lp_new, lp)
        grad = np.where(accept[..., None], grad_new, grad)
        return q, lp, grad

    def run(self, q, n_steps, record=None):
        lp, grad = self.log_pi(q), self.grad_log_pi(q)
        trace = []
        for _ in range(n_steps):
            q, lp, grad = self.step(q, lp, grad)
            if record is not None:
                trace.append(record(q))
        return q, np.array(trace)

    @property
    def acceptance(self) -> float:
        return self.n_accepted / max(self.n_proposed, 1)


def integrated_autocorr_time(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time of series ``x`` (time on axis 0).

    Extra axes are independent chains whose autocorrelations are averaged;
    the summation window is the first M with M >= c * tau(M).
    """
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 4:
        return 1.0
    x = x - x.mean(axis=0)
    f = np.fft.rfft(x, n=2 * n, axis=0)
    acf = np.fft.irfft(f * np.conj(f), axis=0)[:n].mean(axis=1)
    if acf[0] <= 0:
        return 1.0
    rho = acf / acf[0]
    taus = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(n) >= c * taus
    m = int(np.argmax(window)) if window.any() else n - 1
    return float(max(taus[m], 1.0))


@dataclass
class GibbsSamples:
    q: np.ndarray
    p: np.ndarray
    method: str
    acceptance: float = 1.0
    iat: float = 1.0
    thin: int = 1
    ess: float = 0.0
    eps: float = 0.0
    proposals: list = field(default_factory=list)

    def __len__(self):
        return len(self.q)

    def states(self):
        return [PhaseState(q, p) for q, p in zip(self.q, self.p)]


def mala_step_size(omega, params: ChainParams) -> float:
    lam_max = np.max(omega**2) + 4 * params.g0
    return 0.5 / math.sqrt(params.beta * lam_max)


def gibbs_sample(real: DisorderRealization, params: ChainParams, n_samples: int, seed: int,
                 method: str = "auto", n_chains: int = 64, burn_in: int = 10_000,
                 thin: int | None = None, min_ess_fraction: float = 0.2,
                 log_proposals: int = 0) -> GibbsSamples:
    """Draw ``n_samples`` phase-space points from exp(-beta H) / Z.

    Momenta are exact Gaussians of variance 1/beta.  Positions come from
    parallel MALA chains started at exact draws of the harmonic part;
    ``method="auto"`` draws positions exactly when no site is anharmonic.
    The thinning defaults to the integrated autocorrelation time of U(q)
    measured on the second half of the burn-in.
    """
    rng = np.random.default_rng(seed)
    L = real.L
    p = rng.standard_normal((n_samples, L)) / math.sqrt(params.beta)
    cov = harmonic_covariance(real, params)
    chol = np.linalg.cholesky(cov)
    harmonic = params.g == 0 or not np.any(real.tau)
    if method == "auto":
        method = "exact" if harmonic else "mala"
    if method == "exact":
        if not harmonic:
            raise ValueError("exact sampling needs a harmonic chain")
        q = rng.standard_normal((n_samples, L)) @ chol.T
        return GibbsSamples(q, p, "exact", ess=float(n_samples))
    if method != "mala":
        raise ValueError(f"unknown method {method!r}")

    n_chains = min(n_chains, n_samples)
    per_chain = -(-n_samples // n_chains)
    eps = mala_step_size(real.omega, params)
    sampler = MALA(real.omega, real.tau, params, eps, rng, log_proposals)
    q0 = rng.standard_normal((n_chains, L)) @ chol.T
    energy = lambda q: potential(q, real.omega, real.tau, params.g, params.g0)
    q, trace = sampler.run(q0, burn_in, record=energy)
    iat = integrated_autocorr_time(trace[burn_in // 2:])
    step = int(thin) if thin else max(1, math.ceil(iat))
    out = []
    for _ in range(per_chain):
        q, _ = sampler.run(q, step)
        out.append(q.copy())
    qs = np.stack(out, axis=1)  # chain, draw, site
    e = energy(qs).T
    iat_thinned = integrated_autocorr_time(e) if per_chain >= 4 else 1.0
    ess = n_chains * per_chain / iat_thinned
    q_flat = qs.reshape(-1, L)[:n_samples]
    if ess < min_ess_fraction * n_samples:
        raise SamplingError(
            f"effective sample size {ess:.0f} < {min_ess_fraction:.2f} x {n_samples} "
            f"(acceptance {sampler.acceptance:.2f}, IAT {iat:.1f}, thin {step})")
    return GibbsSamples(q_flat, p, "mala", sampler.acceptance, iat, step, ess, eps,
                        sampler.log or [])


def gibbs_initial_batch(omega, tau, params: ChainParams, rng: np.random.Generator,
                        burn_in: int = 10_000):
    """One Gibbs draw per row of ``omega``/``tau`` (independent chains)."""
    from .anderson import tridiagonal_arrays

    n, L = omega.shape
    q = np.empty((n, L))
    for i in range(n):
        d, o = tridiagonal_arrays(omega[i], range(L), "classical", params.g0)
        m = np.diag(d) + np.diag(o, 1) + np.diag(o, -1)
        q[i] = np.linalg.cholesky(np.linalg.inv(m) / params.beta) @ rng.standard_normal(L)
    p = rng.standard_normal((n, L)) / math.sqrt(params.beta)
    if params.g > 0 and np.any(tau):
        eps = min(mala_step_size(w, params) for w in omega)
        sampler = MALA(omega, tau.astype(float), params, eps, rng)
        q, _ = sampler.run(q, burn_in)
    return q, p


# -- static correlations -----------------------------------------------------

@dataclass
class CorrelationDecay:
    distances: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    zeta_hat: float
    decaying: bool
    noise_floor: float
    moments: dict
    moment_stderr: dict


def check_correlation_decay(samples, u_support=None, v_support=None, ess: float | None = None,
                            max_r: int = 8) -> CorrelationDecay:
    """Decay of |<q_x q_y>| with |x - y| and moment bounds up to order ``max_r``.

    ``u_support``/``v_support`` restrict the sites entering the pairs
    (defaults: all).  ``ess`` scales standard errors for correlated draws.
    """
    q = samples.q if hasattr(samples, "q") else np.asarray(samples)
    n, L = q.shape
    ess = float(getattr(samples, "ess", 0) or n) if ess is None else ess
    u = np.arange(L) if u_support is None else np.asarray(list(u_support))
    v = np.arange(L) if v_support is None else np.asarray(list(v_support))
    qc = q - q.mean(axis=0)
    dmax = int(np.max(np.abs(u[:, None] - v[None, :])))
    vals, errs = [], []
    for d in range(dmax + 1):
        pairs = [(a, b) for a in u for b in v if abs(a - b) == d]
        prods = np.mean([qc[:, a] * qc[:, b] for a, b in pairs], axis=0)
        vals.append(abs(prods.mean()))
        errs.append(prods.std(ddof=1) / math.sqrt(ess))
    vals, errs = np.array(vals), np.array(errs)
    dist = np.arange(dmax + 1)
    floor = 3 * float(np.median(errs))
    resolved = vals > np.maximum(3 * errs, floor)
    last = len(vals) if resolved.all() else max(int(np.argmin(resolved)), 1)
    zeta, decaying = float("nan"), False
    if last >= 2:
        slope = np.polyfit(dist[:last], np.log(vals[:last]), 1)[0]
        if slope < 0:
            zeta, decaying = -1.0 / slope, True
    moments, moment_se = {}, {}
    for r in range(1, max_r + 1):
        m = q**r
        moments[r] = float(m.mean())
        moment_se[r] = float(m.std(ddof=1) / math.sqrt(ess))
    return CorrelationDecay(dist, vals, errs, zeta, decaying, floor, moments, moment_se)
