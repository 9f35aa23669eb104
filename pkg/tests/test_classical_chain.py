import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsechain.anderson import build_operator
from sparsechain.classical_chain import (ChainParams, IntegrationError, PhaseState, check_correlation_decay,
                                         continuity_rhs, current, dt_max, energy_bracket,
                                         energy_densities, energy_density, force, gibbs_sample,
                                         harmonic_covariance, integrated_autocorr_time,
                                         mala_log_ratio, potential, total_energy, verlet_evolve)
from sparsechain.disorder import DisorderRealization, DisorderSpec, sample_disorder


def chain(L, p=0.5, seed=0):
    return sample_disorder(DisorderSpec(L=L, p=p, seed=seed))


def random_state(L, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return PhaseState(scale * rng.normal(size=L), scale * rng.normal(size=L))


def test_params_validated():
    with pytest.raises(ValueError):
        ChainParams(g=-1)
    with pytest.raises(ValueError):
        ChainParams(g0=0)
    with pytest.raises(ValueError):
        ChainParams(beta=0)


def test_phase_state_rejects_nan():
    with pytest.raises(ValueError):
        PhaseState([0.0, np.nan], [0.0, 0.0])


def test_energy_density_zero_state():
    real = chain(5)
    st0 = PhaseState(np.zeros(5), np.zeros(5))
    assert all(energy_density(st0, real, ChainParams(), x) == 0 for x in range(5))


def test_energy_density_single_site():
    spec = DisorderSpec(L=1, p=0.5)
    real = DisorderRealization(np.array([1.0]), np.array([1]), spec)
    h = energy_density(PhaseState([1.0], [0.0]), real, ChainParams(g=4.0), 0)
    assert h == pytest.approx(1.5, abs=1e-15)


def test_energy_sum_matches_operator_oracle():
    real = chain(40, seed=2)
    params = ChainParams(g=0.7, g0=1.3)
    for seed in range(100):
        s = random_state(40, seed)
        h = energy_densities(s.q, s.p, real.omega, real.tau, params.g, params.g0)
        assert np.sum(h) == pytest.approx(total_energy(s, real, params), rel=1e-12, abs=1e-12)


def test_current_examples():
    params = ChainParams(g0=1.0)
    s = PhaseState([0.0, 1.0, 0.0], [0.0, 2.0, 0.0])
    assert current(s, params, 0) == -2.0
    assert current(s, params, 2) == 0.0
    assert current(s, params, -1) == 0.0
    with pytest.raises(IndexError):
        current(s, params, 3)


def test_force_zero_at_origin():
    real = chain(10)
    assert np.all(force(PhaseState(np.zeros(10), np.zeros(10)), real, ChainParams()) == 0)


def test_force_matches_finite_differences():
    real = chain(12, seed=4)
    params = ChainParams(g=1.5, g0=0.8)
    s = random_state(12, 9)
    F = force(s, real, params)
    h = 1e-6
    for x in range(12):
        e = np.zeros(12)
        e[x] = h
        fd = -(potential(s.q + e, real.omega, real.tau, params.g, params.g0)
               - potential(s.q - e, real.omega, real.tau, params.g, params.g0)) / (2 * h)
        assert fd == pytest.approx(F[x], rel=1e-7, abs=1e-8)


def test_harmonic_force_is_anderson_operator():
    real = chain(30, seed=1)
    params = ChainParams(g=0.0, g0=0.6)
    s = random_state(30, 3)
    op = build_operator(real, coupling=params.g0)
    assert np.allclose(force(s, real, params), -op.matvec(s.q), atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), L=st.integers(1, 30), g=st.floats(0, 3), g0=st.floats(0.05, 3))
def test_continuity_identity(seed, L, g, g0):
    real = chain(L, seed=seed)
    params = ChainParams(g=g, g0=g0)
    s = random_state(L, seed)
    assert np.allclose(energy_bracket(s, real, params), continuity_rhs(s, params), atol=1e-12)


def test_continuity_along_trajectory():
    real = chain(16, seed=5)
    params = ChainParams(g=1.0, g0=1.0)
    s = random_state(16, 1, 0.5)
    dt = 1e-3
    tr = verlet_evolve(s, real, params, 0.2, dt, stride=1, scheme="yoshida4")
    h = np.array([energy_densities(x.q, x.p, real.omega, real.tau, params.g, params.g0)
                  for x in tr.states])
    dh = (h[2:] - h[:-2]) / (2 * dt)
    rhs = np.array([continuity_rhs(x, params) for x in tr.states[1:-1]])
    assert np.max(np.abs(dh - rhs)) < 1e-5


def test_harmonic_oscillator_oracle():
    spec = DisorderSpec(L=1)
    real = DisorderRealization(np.array([1.0]), np.array([0]), spec)
    params = ChainParams(g=0.0, g0=1.0)
    errs = []
    for dt in (0.02, 0.01):
        tr = verlet_evolve(PhaseState([1.0], [0.0]), real, params, 10.0, dt, stride=10)
        q = np.array([x.q[0] for x in tr.states])
        errs.append(np.max(np.abs(q - np.cos(tr.times[::10][:len(q)]))))
    assert errs[0] < 0.02**2 * 10
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)  # second order


def test_reversibility():
    real = chain(20, seed=6)
    params = ChainParams(g=1.0, g0=1.0)
    s = random_state(20, 2, 0.7)
    fwd = verlet_evolve(s, real, params, 10.0, 0.005, stride=0)
    back = verlet_evolve(fwd.final, real, params, 10.0, -0.005, stride=0)
    assert np.max(np.abs(back.final.q - s.q)) < 1e-8
    assert np.max(np.abs(back.final.p - s.p)) < 1e-8


def test_energy_drift_budget():
    real = chain(64, seed=3)
    params = ChainParams(g=1.0, g0=1.0)
    s = random_state(64, 0, 0.8)
    tr = verlet_evolve(s, real, params, 20.0, 0.01, stride=100)
    assert tr.drift < 1e-8 * 20
    with pytest.raises(IntegrationError):
        verlet_evolve(s, real, params, 20.0, 0.01, stride=0, drift_budget=1e-16)


def test_dt_max_enforced():
    real = chain(8)
    s = random_state(8)
    with pytest.raises(ValueError):
        verlet_evolve(s, real, ChainParams(), 1.0, 1.0)
    assert dt_max(real, ChainParams(g=0.0)) == pytest.approx(
        0.05 / math.sqrt(np.max(real.omega**2) + 4))


def test_mode_energies_conserved_harmonic():
    from sparsechain.splitting import mode_energies
    from sparsechain.anderson import eigendecompose

    real = chain(64, p=0.0, seed=8)
    params = ChainParams(g=0.0, g0=1.0)
    basis = eigendecompose(build_operator(real, coupling=1.0))
    s = random_state(64, 4)
    tr = verlet_evolve(s, real, params, 10.0, 0.005, stride=200, scheme="yoshida4")
    e = np.array([mode_energies(x, basis) for x in tr.states])
    assert np.max(np.abs(e.sum(axis=1) - e[0].sum())) < 1e-8 * e[0].sum()
    assert np.max(np.abs(e - e[0])) < 1e-6


def test_trajectory_exports():
    real = chain(6)
    tr = verlet_evolve(random_state(6), real, ChainParams(), 0.1, 0.01, stride=5)
    lines = tr.summary_csv().splitlines()
    assert lines[0] == "t,current_sum,H"
    assert len(lines) == len(tr.energy_series) + 1
    assert '"dt"' in tr.snapshots_json()


# -- Gibbs sampling --------------------------------------------------------------

@pytest.fixture(scope="module")
def anharmonic_samples():
    real = chain(16, p=0.5, seed=11)
    params = ChainParams(g=1.0, g0=1.0, beta=1.0)
    return real, params, gibbs_sample(real, params, 4000, seed=5, method="mala", log_proposals=50)


def test_momentum_variance(anharmonic_samples):
    _, params, s = anharmonic_samples
    p2 = s.p**2
    assert abs(p2.mean() - 1 / params.beta) < 3 * p2.std() / math.sqrt(p2.size)


def test_current_mean_zero(anharmonic_samples):
    _, params, s = anharmonic_samples
    j = -params.g0 * s.p[:, 1:] * (s.q[:, 1:] - s.q[:, :-1])
    for x in range(j.shape[1]):
        assert abs(j[:, x].mean()) < 3.5 * j[:, x].std() / math.sqrt(len(j))


def test_detailed_balance_ratio_identity(anharmonic_samples):
    real, params, s = anharmonic_samples
    from sparsechain.classical_chain import MALA

    m = MALA(real.omega, real.tau, params, s.eps, np.random.default_rng(0))
    for q, q_new in s.proposals:
        fwd = mala_log_ratio(q, q_new, m.log_pi(q), m.grad_log_pi(q), m.log_pi(q_new),
                             m.grad_log_pi(q_new), s.eps)
        bwd = mala_log_ratio(q_new, q, m.log_pi(q_new), m.grad_log_pi(q_new), m.log_pi(q),
                             m.grad_log_pi(q), s.eps)
        assert abs(fwd + bwd) < 1e-12 * max(1.0, abs(fwd))


def test_odd_moments_vanish(anharmonic_samples):
    _, _, s = anharmonic_samples
    dec = check_correlation_decay(s)
    assert abs(dec.moments[3]) < 3 * dec.moment_stderr[3]
    assert all(abs(dec.moments[r]) < 1e3 for r in range(1, 9))


def test_harmonic_covariance_oracle():
    real = chain(12, p=0.0, seed=2)
    params = ChainParams(g=0.0, g0=1.0, beta=2.0)
    s = gibbs_sample(real, params, 20000, seed=1, method="mala")
    cov = harmonic_covariance(real, params)
    emp = s.q.T @ s.q / len(s.q)
    se = np.sqrt((cov.diagonal()[:, None] * cov.diagonal()[None, :] + cov**2) / s.ess)
    assert np.all(np.abs(emp - cov) < 3.5 * se)


def test_exact_method_only_for_harmonic():
    with pytest.raises(ValueError):
        gibbs_sample(chain(8, p=0.9, seed=1), ChainParams(g=1.0), 10, seed=0, method="exact")


def test_decay_vanishes_for_weak_coupling():
    real = chain(10, p=0.0, seed=3)
    params = ChainParams(g=0.0, g0=1e-6)
    s = gibbs_sample(real, params, 20000, seed=2)
    dec = check_correlation_decay(s)
    assert np.all(dec.values[1:] < 4 * dec.stderr[1:])


def test_decay_rate_matches_gaussian_oracle():
    real = chain(40, p=0.0, seed=6)
    params = ChainParams(g=0.0, g0=1.0)
    s = gibbs_sample(real, params, 40000, seed=3)
    dec = check_correlation_decay(s, range(10, 30), range(10, 30))
    cov = harmonic_covariance(real, params)
    exact = np.array([np.mean([abs(cov[a, a + d]) for a in range(10, 30 - d)]) for d in range(12)])
    zeta = -1 / np.polyfit(np.arange(12), np.log(exact), 1)[0]
    assert dec.decaying
    assert dec.zeta_hat == pytest.approx(zeta, rel=0.25)


def test_iat_of_white_noise_is_one():
    x = np.random.default_rng(0).normal(size=(5000, 4))
    assert integrated_autocorr_time(x) == pytest.approx(1.0, abs=0.2)


def test_iat_of_ar1():
    rng = np.random.default_rng(1)
    a, n = 0.8, 50000
    x = np.zeros(n)
    for i in range(1, n):
        x[i] = a * x[i - 1] + rng.normal()
    assert integrated_autocorr_time(x) == pytest.approx((1 + a) / (1 - a), rel=0.15)
