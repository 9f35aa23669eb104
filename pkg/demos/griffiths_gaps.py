"""
Interaction-free stretches and their spacing
============================================

Counts the sites whose neighbourhood carries no interaction, looks at the
gaps between them, and evaluates the predicted transport exponent.
"""

import numpy as np

from sparsechain.disorder import DisorderSpec, sample_disorder
from sparsechain.griffiths import (compute_G, gap_scale, gap_tail, predict_exponent,
                                   subdiffusion_threshold)

p, ell, xi = 0.5, 3, 4.4

real = sample_disorder(DisorderSpec(L=100_000, p=p, seed=0))
idx = compute_G(real, ell, xi, coupling=0.3)
print(f"|G0| = {len(idx.G0)}, |G| = {len(idx.G)}, kept {idx.retained_fraction:.1%}")
print(f"expected density of G0: (1-p)^(2l+1) = {(1 - p) ** (2 * ell + 1):.4f}, "
      f"measured {len(idx.G0) / real.L:.4f}")
print("mean gap", idx.gaps.mean(), " largest gap", idx.gaps.max())

# Survival of the gaps against exp(-d / d0)
tail = gap_tail(DisorderSpec(L=100, p=p, seed=1), ell, 1000, use_filter=False)
print(f"\nd0 = {gap_scale(p, ell):.0f}; bound holds beyond d = 2l+2: {tail.bound_holds()}")
for d in (1, 8, 32, 128, 512):
    i = np.searchsorted(tail.d, d)
    if i < len(tail.d):
        print(f"  d = {tail.d[i]:4d}  P(gap >= d) = {tail.survival[i]:.4f}  bound = {tail.bound[i]:.4f}")
rho, band = tail.lag_correlation()
print(f"corr(d_i, d_i+{2 * ell + 2}) = {rho:+.4f}  (noise band {band:.4f})")

# Predicted exponent against p at the fitted localization length
print(f"\nsubdiffusive below p = {subdiffusion_threshold(xi):.5f}")
for pp in (1e-4, 1e-3, 1e-2, 0.1, 0.5):
    pred = predict_exponent(pp, xi)
    print(f"  p = {pp:<7g} gamma = {pred.gamma:.4f}  subdiffusive = {pred.subdiffusive}")
