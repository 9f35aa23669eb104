import numpy as np
import pytest

from sparsechain.classical_chain import (ChainParams, PhaseState, force_array, gibbs_sample,
                                         verlet_evolve)
from sparsechain.correlation import (CorrelationSeries, FitError, IdentityViolation, _States,
                                     audit_current_decomposition, estimate_C_classical,
                                     estimate_C_harmonic, estimate_C_quantum, fit_exponent,
                                     harmonic_current_correlation, integrate_series,
                                     l_doubling_check, poisson_residual,
                                     quantum_decomposition_error, time_grid)
from sparsechain.disorder import DisorderSpec, sample_disorder
from sparsechain.fermion import QuantumParams
from sparsechain.griffiths import compute_G, compute_G0
from sparsechain.splitting import residuals, splitting_coefficients, window_basis


def synthetic(f, t):
    t = np.asarray(t, float)
    return CorrelationSeries(t, f(t), np.zeros_like(t))


def test_fit_exact_power_law():
    fit = fit_exponent(synthetic(lambda t: t**2, np.geomspace(1, 1000, 60)))
    assert abs(fit.gamma_hat - 2) < 1e-6
    assert fit.window == (100.0, 1000.0)
    assert '"gamma_hat"' in fit.to_json()


def test_fit_log_corrected_power():
    s = synthetic(lambda t: t * np.log(t) ** 5, np.geomspace(2, 1e8, 400))
    slopes = [fit_exponent(s, (lo, 10 * lo)).gamma_hat for lo in (1e2, 1e4, 1e6)]
    assert all(g > 1 for g in slopes)
    assert slopes[0] > slopes[1] > slopes[2]


def test_fit_errors():
    with pytest.raises(FitError):
        fit_exponent(synthetic(lambda t: t, np.arange(1, 6)))
    t = np.geomspace(1, 100, 30)
    with pytest.raises(FitError):
        fit_exponent(synthetic(lambda t: t - 50, t), (1, 100))


def test_time_grid_and_integration():
    n, idx, t = time_grid(10.0, 0.01)
    assert n == 1000 and idx[0] == 0 and idx[-1] == 1000 and t[-1] == pytest.approx(10.0)
    assert np.all(np.diff(idx) > 0)
    x = np.linspace(0, 2, 201)
    assert integrate_series(np.cos(x), 0.01)[-1] == pytest.approx(np.sin(2.0), abs=1e-9)


@pytest.fixture(scope="module")
def harmonic_series():
    spec = DisorderSpec(L=128, p=0.0, seed=11)
    return estimate_C_classical(spec, ChainParams(g=0.0, g0=0.3), 128, 200.0, ensemble=100,
                                n_points=80)


def test_series_invariants(harmonic_series):
    s = harmonic_series
    assert s.C_hat[0] == 0
    assert np.all(s.C_hat >= -3 * s.stderr)
    assert s.to_csv().splitlines()[0] == "t,C,stderr"
    assert '"ensemble": 100' in s.meta_json()


def test_gaussian_oracle_matches_brute_force():
    from scipy.integrate import simpson
    from scipy.linalg import expm

    from sparsechain.anderson import build_operator

    real = sample_disorder(DisorderSpec(L=6, p=0.0, seed=1))
    params = ChainParams(g=0.0, g0=0.7, beta=1.3)
    n, t = 6, 3.0
    K = build_operator(real, coupling=0.7).dense()
    A = np.block([[np.zeros((n, n)), np.eye(n)], [-K, np.zeros((n, n))]])
    S = np.zeros((n, n))
    i = np.arange(n - 1)
    S[i + 1, i + 1], S[i + 1, i] = -0.7, 0.7
    W = np.zeros((2 * n, 2 * n))
    W[n:, :n] = S
    W = 0.5 * (W + W.T)
    ss = np.linspace(0, t, 2001)
    M = simpson(np.array([expm(A * s).T @ W @ expm(A * s) for s in ss]), x=ss, axis=0)
    cov = np.block([[np.linalg.inv(K), np.zeros((n, n))], [np.zeros((n, n)), np.eye(n)]]) / 1.3
    brute = (np.trace(M @ cov) ** 2 + 2 * np.trace(M @ cov @ M @ cov)) / n
    assert harmonic_current_correlation(real, params, [t])[0] == pytest.approx(brute, rel=1e-8)
    assert harmonic_current_correlation(real, params, [0.0])[0] == 0
    with pytest.raises(ValueError):
        harmonic_current_correlation(sample_disorder(DisorderSpec(L=6, p=0.9, seed=1)),
                                     ChainParams(g=1.0), [1.0])


def test_monte_carlo_matches_gaussian_oracle(harmonic_series):
    s = harmonic_series
    exact = estimate_C_harmonic(DisorderSpec(L=128, p=0.0, seed=11), ChainParams(g=0.0, g0=0.3),
                                128, s.t_grid[1:], ensemble=100)
    z = np.abs(s.C_hat[1:] - exact.C_hat) / s.stderr[1:]
    assert np.max(z) < 4
    assert np.mean(z) < 1.5


def test_harmonic_late_exponent_small():
    t = np.geomspace(200, 2000, 12)
    s = estimate_C_harmonic(DisorderSpec(L=96, p=0.0, seed=2), ChainParams(g=0.0, g0=0.3), 96, t,
                            ensemble=100)
    assert fit_exponent(s, (200, 2000)).gamma_hat < 0.2


def test_disjoint_halves_agree(harmonic_series):
    a = harmonic_series.subset(slice(0, 50))
    b = harmonic_series.subset(slice(50, 100))
    late = harmonic_series.t_grid > 20
    z = np.abs(a.C_hat - b.C_hat)[late] / np.hypot(a.stderr, b.stderr)[late]
    assert np.median(z) < 3


def test_stderr_shrinks_like_root_n(harmonic_series):
    s = harmonic_series
    e25 = s.subset(slice(0, 25)).stderr[-1]
    e100 = s.stderr[-1]
    assert 1.2 < e25 / e100 < 3.5


def test_workers_do_not_change_result():
    spec = DisorderSpec(L=32, p=0.5, seed=2)
    params = ChainParams(g=1.0, g0=1.0)
    kw = dict(ensemble=50, batch=25, n_points=20, burn_in=500)
    a = estimate_C_classical(spec, params, 32, 5.0, **kw)
    b = estimate_C_classical(spec, params, 32, 5.0, workers=2, **kw)
    assert np.array_equal(a.C_hat, b.C_hat)
    with pytest.raises(ValueError):
        estimate_C_classical(spec, params, 32, 5.0, ensemble=10)


def test_doubling_check_runs():
    chk = l_doubling_check(DisorderSpec(L=16, p=0.5, seed=1), ChainParams(g0=0.5), 16, 5.0,
                           ensemble=50, n_points=20, burn_in=500)
    assert chk.max_z >= 0
    assert chk.large.meta["L"] == 32


def test_quantum_estimator_plateau_and_ed_branch():
    spec = DisorderSpec(L=200, p=0.0, seed=4, model="quantum",
                        omega_law={"low": 0.0, "high": 8.0})
    s = estimate_C_quantum(spec, QuantumParams(J=1.0), 200, [0.0, 50.0, 200.0], ensemble=5)
    assert s.C_hat[0] == 0 and np.all(s.C_hat >= 0)
    assert s.C_hat[2] / s.C_hat[1] < 1.5
    e = estimate_C_quantum(DisorderSpec(L=6, p=0.5, seed=1, model="quantum"),
                           QuantumParams(g=1.0), 6, [0.0, 1.0], ensemble=3)
    assert e.meta["method"] == "ed" and np.all(e.C_hat >= 0)


# -- decomposition ----------------------------------------------------------------

def audit_setup(L=48, ell=2, g0=1.0):
    params = ChainParams(g=1.0, g0=g0)
    for seed in range(100):
        real = sample_disorder(DisorderSpec(L=L, p=0.5, seed=seed))
        if len(compute_G0(real.tau, ell)) >= 2:
            break
    gi = compute_G(real, ell, 24.0, coupling=g0)
    res = {int(g): residuals(splitting_coefficients(window_basis(real, int(g), ell, coupling=g0)),
                             params, gibbs_oracle=0.5 * np.eye(2 * ell + 1), real=real)
           for g in gi.G}
    s = gibbs_sample(real, params, 1, seed=1, method="mala")
    st = PhaseState(s.q[0], s.p[0])
    return real, params, gi, res, st


def test_audit_identity_and_negative_control():
    real, params, gi, res, st = audit_setup()
    tr = verlet_evolve(st, real, params, 10.0, 0.01, stride=1, scheme="yoshida4", check_dt=False)
    audit = audit_current_decomposition(tr, gi, res, real, params, tol=1e-6)
    assert audit.max_relative_residual < 1e-6
    assert audit.I1 >= 0 and audit.I2 >= 0
    with pytest.raises(IdentityViolation):
        audit_current_decomposition(tr, gi, res, real, params, sign_right=+1)
    with pytest.raises(IdentityViolation):
        audit_current_decomposition(tr, [], res, real, params)


def test_audit_weak_coupling_terms_vanish():
    real, params, gi, res, st = audit_setup(L=24, g0=1e-12)
    tr = verlet_evolve(st, real, params, 1.0, 0.01, stride=1, scheme="yoshida4", check_dt=False)
    # every term is zero up to integrator error, so the check is absolute
    a = audit_current_decomposition(tr, gi, res, real, params, atol=1e-8)
    assert np.max(np.abs(a.current_integral)) < 1e-10
    assert np.max(np.abs(a.residual_integral)) < 1e-10
    assert np.max(np.abs(a.boundary_term)) < 1e-7


def test_cauchy_schwarz_and_time_integral_trick():
    real, params, gi, res, _ = audit_setup(L=32)
    samples = gibbs_sample(real, params, 20, seed=3, method="mala")
    t, dt = 5.0, 0.01
    lhs, rhs, trick = [], [], []
    for q, p in zip(samples.q, samples.p):
        tr = verlet_evolve(PhaseState(q, p), real, params, t, dt, stride=1, scheme="yoshida4",
                           check_dt=False)
        qs = np.array([s.q for s in tr.states])
        ps = np.array([s.p for s in tr.states])
        S = _States(qs, ps)
        w = sum(r.f(S) for r in res.values())
        lhs.append(integrate_series(w, dt)[-1] ** 2)
        rhs.append(t**2 * np.mean(w**2))
        F = force_array(qs, real.omega, real.tau.astype(float), params.g, params.g0)
        v = sum(r.u(S) for r in res.values())
        Lv = sum(r.liouville_u(S, F) for r in res.values())
        trick.append((integrate_series(Lv, dt)[-1], v[-1] - v[0]))
    assert np.mean(lhs) <= np.mean(rhs) + 3 * np.std(rhs) / np.sqrt(len(rhs))
    trick = np.array(trick)
    assert np.allclose(trick[:, 0], trick[:, 1], atol=1e-7)
    r = next(iter(res.values()))
    assert np.max(np.abs(poisson_residual(tr, r, real, params))) < 1e-5


@pytest.mark.parametrize("seed", [0, 3])
def test_quantum_decomposition_exact(seed):
    real = sample_disorder(DisorderSpec(L=8, p=0.3, seed=seed, model="quantum"))
    G = compute_G0(real.tau, 1)
    if len(G) == 0:
        pytest.skip("no interaction-free window")
    assert quantum_decomposition_error(real, QuantumParams(g=1.0), 1) < 1e-12
