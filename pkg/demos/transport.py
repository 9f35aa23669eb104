"""
Current fluctuations in the classical and quantum chains
========================================================

Estimates C(t) for a harmonic chain two ways (Monte Carlo over initial
states, and the exact Gaussian average), compares sparse and dense
interactions, and checks the free-fermion formula against exact
diagonalization.  Sizes are small so the script runs in about a minute.
"""

import numpy as np

from sparsechain.classical_chain import ChainParams
from sparsechain.correlation import estimate_C_classical, estimate_C_harmonic, fit_exponent
from sparsechain.disorder import DisorderSpec, sample_disorder
from sparsechain.fermion import (QuantumParams, ed_build, ed_current_correlation,
                                 free_current_correlation)

# Harmonic chain: C(t) levels off
spec = DisorderSpec(L=64, p=0.0, seed=0)
harm = ChainParams(g=0.0, g0=0.3)
mc = estimate_C_classical(spec, harm, 64, 100.0, ensemble=100, n_points=40)
exact = estimate_C_harmonic(spec, harm, 64, mc.t_grid[1::6], ensemble=100)
print("   t      C (Monte Carlo)      C (Gaussian)")
for t, c in zip(exact.t_grid, exact.C_hat):
    m, e = mc.at(t)
    print(f"{t:7.2f}   {m:7.3f} +- {e:5.3f}   {c:7.3f}")

# Sparse vs dense interactions
anh = ChainParams(g=1.0, g0=0.3)
for label, kw in (("p = 0.2", {}), ("dense", {"dense": True})):
    s = estimate_C_classical(DisorderSpec(L=64, p=0.2, seed=1), anh, 64, 100.0, ensemble=60, **kw)
    fit = fit_exponent(s, (10.0, 100.0))
    print(f"{label:8s} gamma_hat = {fit.gamma_hat:.3f} +- {fit.stderr:.3f}")

# Free fermions: Wick contraction vs exact diagonalization
real = sample_disorder(DisorderSpec(L=6, p=0.5, seed=2, model="quantum"))
qp = QuantumParams(J=1.0, g=0.0, mu=1.0)
t = [1.0, 5.0, 10.0]
w = free_current_correlation(real, qp, t).C_hat
e = ed_current_correlation(ed_build(real, qp), qp.mu, t).C_hat
print("\nWick", np.round(w, 10), "\nED  ", np.round(e, 10))
