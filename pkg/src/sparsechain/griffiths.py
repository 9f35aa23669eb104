"""Griffiths-region bookkeeping: interaction-free stretches and their gaps.

``G0(l)`` holds the sites whose l-neighbourhood carries no interaction,
``G(l)`` keeps those whose splitting residual bound ``r_x`` is small, and
``d_i = g_{i+1} - g_i`` are the gaps between consecutive points of ``G(l)``.
Sites whose window would leave the chain are never in ``G0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .disorder import DisorderRealization, DisorderSpec, ensemble_seeds, sample_disorder
from .splitting import window_r_values


class GriffithsContractError(ValueError):
    pass


def compute_G0(tau, ell: int) -> np.ndarray:
    """Sites x with tau_y = 0 for all |y - x| <= l and the window inside the chain."""
    if ell < 1:
        raise GriffithsContractError("ell must be >= 1")
    tau = np.asarray(tau).astype(np.int64)
    n = 2 * ell + 1
    if len(tau) < n:
        return np.empty(0, dtype=int)
    csum = np.concatenate([[0], np.cumsum(tau)])
    busy = csum[n:] - csum[:-n]          # interactions in window starting at s
    return np.flatnonzero(busy == 0) + ell


def r_threshold(ell: int, xi: float) -> float:
    return ell**2 * math.exp(-ell / xi)


RProvider = Callable[[DisorderRealization, np.ndarray, int], np.ndarray]


def default_r_provider(coupling: float = 1.0, model: str = "classical") -> RProvider:
    def provider(real, sites, ell):
        return window_r_values(real.omega, sites, ell, coupling, model)
    return provider


@dataclass
class GriffithsIndex:
    ell: int
    xi_used: float
    G0: np.ndarray
    G: np.ndarray
    r: np.ndarray = field(repr=False)
    threshold: float = 0.0

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.G)

    @property
    def n_L(self) -> int:
        return len(self.G)

    @property
    def retained_fraction(self) -> float:
        return len(self.G) / len(self.G0) if len(self.G0) else float("nan")


def compute_G(real: DisorderRealization, ell: int, xi_used: float,
              splitting_provider: RProvider | None = None, threshold: float | None = None,
              coupling: float = 1.0, model: str = "classical") -> GriffithsIndex:
    """Filter ``G0(l)`` by ``r_x <= l^2 exp(-l / xi_used)``.

    ``threshold`` overrides the cut; ``splitting_provider(real, sites, l)``
    returns r_x for each candidate site (default: batched eigensolves of the
    window operators with the given coupling).
    """
    if 2 * ell + 1 > real.L:
        raise GriffithsContractError(f"ell={ell} too large for L={real.L}")
    if not xi_used > 0:
        raise GriffithsContractError("xi_used must be positive")
    cut = r_threshold(ell, xi_used) if threshold is None else float(threshold)
    G0 = compute_G0(real.tau, ell)
    provider = splitting_provider or default_r_provider(coupling, model)
    r = np.asarray(provider(real, G0, ell), float) if len(G0) else np.empty(0)
    return GriffithsIndex(ell, float(xi_used), G0, G0[r <= cut], r, cut)


def nearest_in_G(x: int, index) -> int:
    """Closest point of G to x; ties go to the smaller site."""
    G = np.asarray(index.G if isinstance(index, GriffithsIndex) else index)
    if len(G) == 0:
        raise LookupError("G is empty")
    i = int(np.searchsorted(G, x))
    cands = [G[j] for j in (i - 1, i) if 0 <= j < len(G)]
    return int(min(cands, key=lambda g: (abs(g - x), g)))


def nearest_map(L: int, G) -> np.ndarray:
    """x_G for every site 0..L-1 (vectorized ``nearest_in_G``)."""
    G = np.asarray(G)
    if len(G) == 0:
        raise LookupError("G is empty")
    x = np.arange(L)
    i = np.clip(np.searchsorted(G, x), 1, len(G) - 1) if len(G) > 1 else np.zeros(L, int)
    if len(G) == 1:
        return np.full(L, G[0])
    left, right = G[i - 1], G[i]
    return np.where(np.abs(right - x) < np.abs(x - left), right, left)


# -- gap statistics ------------------------------------------------------------

def gap_scale(p: float, ell: int) -> float:
    """d0 = exp(3 l log(1/(1-p)))."""
    return math.exp(-3 * ell * math.log1p(-p))


def intermediate_rate(p: float, ell: int) -> float:
    return (1 - p) ** (2 * ell + 1) / (4 * (ell + 1))


@dataclass
class GapTail:
    p: float
    ell: int
    d: np.ndarray
    survival: np.ndarray
    bound: np.ndarray
    n_gaps: int
    tail_rate: float
    d0: float
    gaps: np.ndarray = field(repr=False)
    retained_fraction: float = float("nan")

    def bound_holds(self, d_min: int | None = None) -> bool:
        d_min = 2 * self.ell + 2 if d_min is None else d_min
        sel = self.d >= d_min
        return bool(np.all(self.survival[sel] <= self.bound[sel]))

    def to_csv(self) -> str:
        rows = ["d,empirical_survival,bound"]
        rows += [f"{d},{s:.17g},{b:.17g}" for d, s, b in zip(self.d, self.survival, self.bound)]
        return "\n".join(rows) + "\n"

    def lag_correlation(self, lag: int | None = None) -> tuple[float, float]:
        """Pearson correlation of (d_i, d_{i+lag}) and its 3/sqrt(N) band."""
        lag = 2 * self.ell + 2 if lag is None else lag
        a, b = self.gaps[:-lag], self.gaps[lag:]
        if len(a) < 3 or a.std() == 0 or b.std() == 0:
            return 0.0, float("inf")
        return float(np.corrcoef(a, b)[0, 1]), 3 / math.sqrt(len(a))


def default_length(p: float, ell: int, cap: int = 1 << 21) -> int:
    return int(min(cap, max(1000, 50 * (1 - p) ** -(2 * ell + 1))))


def gap_tail(spec: DisorderSpec, ell: int, n_realizations: int = 1000, xi_used: float | None = None,
             coupling: float = 1.0, use_filter: bool = True, L: int | None = None,
             n_points: int = 200) -> GapTail:
    """Empirical survival P(d_i >= d) pooled over independent realizations.

    Gaps are taken within each realization only (no gap straddles two
    chains).  ``use_filter=False`` uses G0 in place of G.  The survival is
    tabulated on ``n_points`` geometrically spaced values of d.
    """
    if n_realizations < 100:
        raise ValueError("n_realizations must be >= 100")
    L = default_length(spec.p, ell) if L is None else int(L)
    if use_filter and xi_used is None:
        raise GriffithsContractError("xi_used is required when the r_x filter is on")
    spec = spec.with_length(L)
    all_gaps, kept, total = [], 0, 0
    for s in ensemble_seeds(spec.seed, n_realizations):
        real = sample_disorder(spec.with_seed(s))
        if use_filter:
            idx = compute_G(real, ell, xi_used, coupling=coupling)
            G, n0 = idx.G, len(idx.G0)
        else:
            G = compute_G0(real.tau, ell)
            n0 = len(G)
        kept += len(G)
        total += n0
        all_gaps.append(np.diff(G))
    gaps = np.concatenate(all_gaps).astype(int)
    d0 = gap_scale(spec.p, ell)
    if len(gaps) == 0:
        d = np.array([1])
        surv = np.array([0.0])
    else:
        d = np.unique(np.geomspace(1, max(gaps.max(), 2) + 1, n_points).astype(int))
        srt = np.sort(gaps)
        surv = 1.0 - np.searchsorted(srt, d, side="left") / len(srt)
    # exponential MLE of the tail beyond the structural scale 2l+2
    d_min = 2 * ell + 2
    tail = gaps[gaps >= d_min]
    rate = 1.0 / np.mean(tail - d_min + 1) if len(tail) else float("nan")
    return GapTail(spec.p, ell, d, surv, np.exp(-d / d0), len(gaps), float(rate), d0, gaps,
                   kept / total if total else float("nan"))


def ell0_proxy(spec: DisorderSpec, ells, n_realizations: int = 1000, **kw) -> tuple[int | None, dict]:
    """Smallest l in ``ells`` from which the gap-tail bound holds empirically."""
    tables = {int(l): gap_tail(spec, int(l), n_realizations, **kw) for l in sorted(ells)}
    ell0 = None
    for l in sorted(tables, reverse=True):
        if not tables[l].bound_holds():
            break
        ell0 = l
    return ell0, tables


# -- exponent --------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentPrediction:
    p: float
    xi: float
    v: float
    gamma: float
    a_opt: float
    b1: float
    b2: float
    subdiffusive: bool
    degenerate: bool = False

    @property
    def threshold_p(self) -> float:
        return subdiffusion_threshold(self.xi)

    def ell_of_t(self, t, a: float | None = None):
        """l(t) = a log t, rounded up to an integer >= 1."""
        a = self.a_opt if a is None else a
        return np.maximum(1, np.ceil(a * np.log(np.asarray(t, float)))).astype(int)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def subdiffusion_threshold(xi: float) -> float:
    return -math.expm1(-1.0 / (9.0 * xi))


def predict_exponent(p: float, xi: float) -> ExponentPrediction:
    """gamma = 4 / (1 + (3 xi log(1/(1-p)))^-1) and the rates behind it.

    At p = 0 the chain is harmonic and no power law is predicted; the
    returned record has ``degenerate=True`` and gamma = 0.
    """
    if not 0 <= p < 1:
        raise ValueError("p must lie in [0, 1)")
    if not xi > 0:
        raise ValueError("xi must be positive")
    lg = -math.log1p(-p)
    v = 3 * lg
    b1 = -2 / xi + 6 * lg
    b2 = 12 * lg
    a = 1 / (v + 1 / xi)
    if p == 0:
        return ExponentPrediction(p, xi, 0.0, 0.0, a, b1, b2, True, degenerate=True)
    gamma = 4 / (1 + 1 / (3 * xi * lg))
    return ExponentPrediction(p, xi, v, gamma, a, b1, b2, gamma < 1)
