"""Acceptance criteria, one test each, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py`` (a PASS/FAIL line per
criterion is printed in the terminal summary) or as a script.
"""

import sys
import time

import numpy as np
import pytest

from sparsechain.anderson import localization_profile
from sparsechain.classical_chain import (ChainParams, PhaseState, gibbs_sample,
                                         harmonic_covariance, verlet_evolve)
from sparsechain.correlation import (audit_current_decomposition, estimate_C_classical,
                                     estimate_C_harmonic, fit_exponent, poisson_residual)
from sparsechain.disorder import DisorderSpec, condition_zero_stretch, ensemble_seeds, sample_disorder
from sparsechain.fermion import (QuantumParams, continuity_error, ed_build, ed_current_correlation,
                                 free_current_correlation, sparse_norm)
from sparsechain.griffiths import (compute_G, gap_tail, predict_exponent, subdiffusion_threshold)
from sparsechain.splitting import (boundary_decay_experiment, harmonic_flow, r_statistics,
                                   residuals, restricted_energy, splitting_coefficients, window,
                                   window_basis)

try:
    from conftest import ACCEPTANCE_RESULTS
except ImportError:  # script mode outside the tests directory
    ACCEPTANCE_RESULTS = {}

G0_WEAK = 0.3   # inter-site coupling used for the transport criteria


def record(k, ok, detail):
    ACCEPTANCE_RESULTS[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_splitting_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    sizes = rng.choice(np.arange(3, 32, 2), 500)
    worst_sum = worst_anti = worst_gamma = worst_flow = 0.0
    for i, n in enumerate(sizes):
        ell = int(n) // 2
        L = n + 4
        g0 = rng.uniform(0.2, 2.0)
        real = sample_disorder(DisorderSpec(L=L, p=rng.uniform(0, 0.9), seed=i))
        x = L // 2
        real = condition_zero_stretch(real, window(x, ell))
        c = splitting_coefficients(window_basis(real, x, ell, coupling=g0))
        B = c.B
        st = PhaseState(rng.normal(size=L), rng.normal(size=L))
        H_B = restricted_energy(st, real.omega[B.start:B.stop], g0, B)
        # quadratic identity: compare relative to the window energy
        worst_sum = max(worst_sum, abs(c.tilde_left(st) + c.tilde_right(st) - H_B) / H_B)
        # gamma^R from the right weights, built independently of gamma^L
        psi, mid = c.basis.psi, x - B.start
        wR = np.sum(psi[mid + 1:] ** 2, axis=0)
        PR = np.diag((np.arange(n) > mid).astype(float))
        gammaR = 0.5 * ((psi * wR) @ psi.T - PR)
        worst_anti = max(worst_anti, np.max(np.abs(c.gammaL + gammaR)))
        worst_gamma = max(worst_gamma, np.max(np.abs(c.gammaL)))
        # H~_L along the exact restricted flow
        q0, p0 = st.q[B.start:B.stop], st.p[B.start:B.stop]
        e0 = c.tilde_left(st)
        for t in (12.5, 25.0, 50.0):
            q, p = harmonic_flow(c.basis.operator, q0, p0, t)
            qf, pf = st.q.copy(), st.p.copy()
            qf[B.start:B.stop], pf[B.start:B.stop] = q, p
            worst_flow = max(worst_flow, abs(c.tilde_left(PhaseState(qf, pf)) - e0))
    wall = time.perf_counter() - t0
    ok = (worst_sum < 1e-12 and worst_anti < 1e-12 and worst_gamma <= 1 + 1e-12
          and worst_flow < 1e-8 and wall < 120)
    record(1, ok, f"relative sum error {worst_sum:.1e}, gammaL+gammaR {worst_anti:.1e}, max|gamma| "
                  f"{worst_gamma:.3f}, flow drift {worst_flow:.1e}, {wall:.0f}s")


def test_criterion_2_poisson_audit():
    t0 = time.perf_counter()
    params = ChainParams(g=1.0, g0=1.0, beta=1.0)
    ell = 2
    for seed in ensemble_seeds(0, 100):
        real = sample_disorder(DisorderSpec(L=64, p=0.5, seed=seed))
        gi = compute_G(real, ell, 24.0, coupling=params.g0)
        if len(gi.G) >= 2:
            break
    # the mean shift is a constant and drops out of both identities
    res = {int(g): residuals(splitting_coefficients(window_basis(real, int(g), ell)), params,
                             gibbs_oracle=np.eye(2 * ell + 1) / params.beta, real=real)
           for g in gi.G}
    init = gibbs_sample(real, params, 1, seed=1, method="mala")
    tr = verlet_evolve(PhaseState(init.q[0], init.p[0]), real, params, 50.0, 0.01, stride=1,
                       scheme="yoshida4", check_dt=False)
    poisson = max(np.max(np.abs(poisson_residual(tr, r, real, params))) for r in res.values())
    audit = audit_current_decomposition(tr, gi, res, real, params, tol=1e-6)
    wall = time.perf_counter() - t0
    ok = poisson < 1e-5 and audit.max_relative_residual < 1e-6 and wall < 300
    record(2, ok, f"|G|={len(gi.G)}, Poisson residual {poisson:.1e}, decomposition "
                  f"{audit.max_relative_residual:.1e}, {wall:.0f}s")


def test_criterion_3_localization_decay():
    t0 = time.perf_counter()
    xis = [localization_profile(DisorderSpec(L=64, p=0.0, seed=s), 64, 500,
                                coupling=G0_WEAK).fitted_xi for s in (0, 1)]
    spread = abs(xis[0] - xis[1]) / np.mean(xis)
    xi = xis[0]
    ells = list(range(3, 15))
    spec = DisorderSpec(L=64, p=0.0, seed=0)
    decay = boundary_decay_experiment(spec, ells, 500, G0_WEAK, xi)
    rst = r_statistics(spec, ells, 500, G0_WEAK, xi)
    a, b = decay.rate * xi, rst.rate * xi
    wall = time.perf_counter() - t0
    ok = spread < 0.10 and 0.5 <= a <= 2 and 0.5 <= b <= 2 and wall < 600
    record(3, ok, f"xi_hat {xis[0]:.3f}/{xis[1]:.3f} (spread {spread:.1%}), boundary rate "
                  f"x xi = {a:.2f}, E(r) rate x xi = {b:.2f}, {wall:.0f}s")


def test_criterion_4_harmonic_plateau():
    t0 = time.perf_counter()
    spec = DisorderSpec(L=256, p=0.0, seed=0)
    params = ChainParams(g=0.0, g0=G0_WEAK, beta=1.0)
    s = estimate_C_classical(spec, params, 256, 200.0, ensemble=200)
    ratio = s.at(200.0)[0] / s.at(50.0)[0]
    # same disorder members, initial conditions averaged exactly
    exact = estimate_C_harmonic(spec, params, 256, [50.0, 200.0], ensemble=200)
    ratio_exact = exact.C_hat[1] / exact.C_hat[0]
    wall = time.perf_counter() - t0
    ok = ratio < 1.5 and ratio_exact < 1.5 and wall < 1200
    record(4, ok, f"C(200)/C(50) = {ratio:.3f} (Monte Carlo), {ratio_exact:.3f} (Gaussian "
                  f"average), {wall:.0f}s")


def test_criterion_5_gap_tail():
    t0 = time.perf_counter()
    spec = DisorderSpec(L=100, p=0.5, seed=5)
    holds = {}
    for ell in range(2, 7):
        tail = gap_tail(spec, ell, 1000, use_filter=False)
        holds[ell] = tail.bound_holds()
    # at these l the r_x cut never removes a site, so G = G0
    real = sample_disorder(DisorderSpec(L=20000, p=0.5, seed=1))
    kept = compute_G(real, 6, localization_profile(DisorderSpec(L=64), 64, 500).fitted_xi)
    wall = time.perf_counter() - t0
    ok = holds[6] and kept.retained_fraction == 1.0 and wall < 120
    record(5, ok, f"bound holds by l: {holds}, G/G0 at l=6: {kept.retained_fraction:.2f}, "
                  f"{wall:.0f}s")


def test_criterion_6_exponent_formula():
    rng = np.random.default_rng(6)
    gam_err = match_err = 0.0
    for xi in rng.uniform(0.1, 100.0, 100):
        pred = predict_exponent(subdiffusion_threshold(xi), xi)
        gam_err = max(gam_err, abs(pred.gamma - 1))
        match_err = max(match_err, abs(2 + pred.a_opt * pred.b1 - pred.a_opt * pred.b2))
    record(6, gam_err < 1e-12 and match_err < 1e-12,
           f"|gamma - 1| {gam_err:.1e}, power matching {match_err:.1e}")


def test_criterion_7_quantum_oracle():
    t0 = time.perf_counter()
    params = QuantumParams(J=1.0, g=0.0, mu=1.0)
    grid = [1.0, 5.0, 10.0]
    diff = 0.0
    for s in ensemble_seeds(7, 3):
        real = sample_disorder(DisorderSpec(L=6, p=0.5, seed=s, model="quantum"))
        w = free_current_correlation(real, params, grid).C_hat
        e = ed_current_correlation(ed_build(real, params), params.mu, grid).C_hat
        diff = max(diff, np.max(np.abs(w - e)))
    hn = cont = 0.0
    for s in ensemble_seeds(8, 3):
        real = sample_disorder(DisorderSpec(L=8, p=0.5, seed=s, model="quantum"))
        system = ed_build(real, QuantumParams(J=1.0, g=1.0, mu=1.0))
        hn = max(hn, sparse_norm(system.H.commutator(system.N)))
        cont = max(cont, continuity_error(system))
    wall = time.perf_counter() - t0
    ok = diff < 1e-8 and hn < 1e-13 and cont < 1e-13 and wall < 300
    record(7, ok, f"Wick vs ED {diff:.1e}, [H,N] {hn:.1e}, continuity {cont:.1e}, {wall:.0f}s")


def test_criterion_8_directional_subdiffusion():
    t0 = time.perf_counter()
    params = ChainParams(g=1.0, g0=G0_WEAK, beta=1.0)
    spec = DisorderSpec(L=128, p=0.2, seed=8)
    window_ = (50.0, 500.0)
    sparse = fit_exponent(estimate_C_classical(spec, params, 128, 500.0, ensemble=200), window_)
    dense = fit_exponent(estimate_C_classical(spec, params, 128, 500.0, ensemble=200, dense=True),
                         window_)
    gap = dense.gamma_hat - sparse.gamma_hat
    sigma = np.hypot(sparse.stderr, dense.stderr)
    wall = time.perf_counter() - t0
    ok = gap > 2 * sigma and wall < 4 * 3600
    record(8, ok, f"gamma_hat p=0.2: {sparse.gamma_hat:.3f}+-{sparse.stderr:.3f}, dense: "
                  f"{dense.gamma_hat:.3f}+-{dense.stderr:.3f}, gap {gap:.3f} vs 2 sigma "
                  f"{2 * sigma:.3f}, {wall:.0f}s")


def test_criterion_9_sampler_validity():
    t0 = time.perf_counter()
    params = ChainParams(g=1.0, g0=G0_WEAK, beta=2.0)
    real = sample_disorder(DisorderSpec(L=16, p=0.5, seed=9))
    s = gibbs_sample(real, params, 20000, seed=9, method="mala")
    p2 = np.mean(s.p**2) * params.beta
    j = -params.g0 * s.p[:, 1:] * (s.q[:, 1:] - s.q[:, :-1])
    # q enters j, so the q-chain's effective sample size sets the error bar
    z_j = np.abs(j.mean(axis=0)) / (j.std(axis=0) / np.sqrt(s.ess))
    harm = ChainParams(g=0.0, g0=G0_WEAK, beta=2.0)
    real0 = sample_disorder(DisorderSpec(L=8, p=0.0, seed=9))
    h = gibbs_sample(real0, harm, 20000, seed=10, method="mala")
    C = harmonic_covariance(real0, harm)
    emp = h.q.T @ h.q / len(h.q)
    se = np.sqrt((np.outer(C.diagonal(), C.diagonal()) + C**2) / h.ess)
    z_c = np.abs(emp - C) / se
    wall = time.perf_counter() - t0
    ok = abs(p2 - 1) < 0.01 and np.all(z_j < 3) and np.all(z_c < 3) and wall < 300
    record(9, ok, f"beta<p^2> = {p2:.4f}, max |<j_x>|/sigma {z_j.max():.2f}, max covariance "
                  f"z {z_c.max():.2f} (MALA acceptance {h.acceptance:.2f}), {wall:.0f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
