"""Restricted Anderson operators, their eigenbases and localization profiles.

Sites are 0-based throughout the package.  An index window ``B`` is a
``range`` of consecutive sites.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .disorder import DisorderRealization, DisorderSpec, ensemble_seeds, sample_disorder


class LocalizationFitError(RuntimeError):
    """The profile does not decay, so no localization length can be fitted."""


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AndersonOperator:
    """Symmetric tridiagonal operator on l^2(B).

    ``classical``: V - g0*Delta with Neumann Delta on B, so the diagonal is
    omega^2 + 2 g0 in the bulk of B and omega^2 + g0 at its two ends.
    ``quantum``: the one-body matrix J*(hopping) + 2J + V of the free
    fermion Hamiltonian restricted to B.
    """

    model: str
    diag: np.ndarray
    offdiag: np.ndarray
    B: range
    coupling: float

    @property
    def size(self) -> int:
        return len(self.diag)

    def dense(self) -> np.ndarray:
        n = self.size
        m = np.diag(self.diag).astype(float)
        if n > 1:
            m[np.arange(n - 1), np.arange(1, n)] = self.offdiag
            m[np.arange(1, n), np.arange(n - 1)] = self.offdiag
        return m

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Apply to ``v`` along its last axis."""
        out = self.diag * v
        if self.size > 1:
            out[..., :-1] += self.offdiag * v[..., 1:]
            out[..., 1:] += self.offdiag * v[..., :-1]
        return out

    def norm(self) -> float:
        return float(np.max(np.abs(self.diag)) + 2 * np.max(np.abs(self.offdiag), initial=0.0))


def _window(B, L: int) -> range:
    if not isinstance(B, range):
        B = list(B)
        if not B:
            raise IndexError("empty window")
        B = range(min(B), max(B) + 1)
    if len(B) == 0 or B.step != 1:
        raise IndexError("window must be a nonempty range of consecutive sites")
    if B.start < 0 or B.stop > L:
        raise IndexError(f"window {B} outside chain of length {L}")
    return B


def tridiagonal_arrays(omega, B: range, model: str, coupling: float):
    """Diagonal and off-diagonal of the restricted operator for ``omega[B]``."""
    w = np.asarray(omega, dtype=float)[B.start:B.stop]
    n = len(w)
    if model == "classical":
        degree = np.full(n, 2.0)
        degree[0] -= 1.0
        degree[-1] -= 1.0
        if n == 1:
            degree[:] = 0.0
        return w**2 + coupling * degree, np.full(n - 1, -coupling)
    if model == "quantum":
        return w + 2.0 * coupling, np.full(n - 1, coupling)
    raise ValueError(f"unknown model {model!r}")


def build_operator(real: DisorderRealization, B=None, model: str = "classical",
                   coupling: float = 1.0) -> AndersonOperator:
    if coupling < 0:
        raise ValueError("coupling must be nonnegative")
    B = _window(range(real.L) if B is None else B, real.L)
    diag, off = tridiagonal_arrays(real.omega, B, model, coupling)
    return AndersonOperator(model, diag, off, B, float(coupling))


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Orthonormal eigenpairs; column ``k`` of ``psi`` has eigenvalue ``nu2[k]``."""

    psi: np.ndarray
    nu2: np.ndarray
    operator: AndersonOperator

    @property
    def nu(self) -> np.ndarray:
        return np.sqrt(self.nu2)

    def orthonormality_error(self) -> float:
        n = self.psi.shape[1]
        return float(np.max(np.abs(self.psi.T @ self.psi - np.eye(n))))

    def residual(self) -> float:
        op = self.operator
        r = op.matvec(self.psi.T) - self.nu2[:, None] * self.psi.T
        return float(np.max(np.linalg.norm(r, axis=1)))


def fix_signs(psi: np.ndarray) -> np.ndarray:
    """Flip columns so that each one's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(psi), axis=-2)
    picked = np.take_along_axis(psi, idx[..., None, :], axis=-2)
    return psi * np.where(picked < 0, -1.0, 1.0)


def eigendecompose(op: AndersonOperator) -> EigenBasis:
    try:
        if op.size == 1:
            nu2, psi = op.diag.copy(), np.ones((1, 1))
        else:
            nu2, psi = scipy.linalg.eigh_tridiagonal(op.diag, op.offdiag)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise EigenSolverError(
            f"eigensolver failed on diag={op.diag.tolist()} offdiag={op.offdiag.tolist()}"
        ) from exc
    if op.model == "classical" and not np.all(nu2 > 0):
        raise EigenSolverError("classical operator is not positive definite")
    return EigenBasis(fix_signs(psi), nu2, op)


def batched_eigh(diag: np.ndarray, off: np.ndarray):
    """Eigenpairs of a stack of tridiagonal matrices (shape ``(m, n)``)."""
    m, n = diag.shape
    mats = np.zeros((m, n, n))
    i = np.arange(n)
    mats[:, i, i] = diag
    if n > 1:
        mats[:, i[:-1], i[1:]] = off
        mats[:, i[1:], i[:-1]] = off
    vals, vecs = np.linalg.eigh(mats)
    return vals, fix_signs(vecs)


@dataclass
class LocalizationProfile:
    distances: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    ensemble_size: int
    fitted_xi: float
    slope_stderr: float
    intercept: float
    r_squared: float
    fit_window: tuple
    meta: dict = field(default_factory=dict)

    @property
    def prefactor(self) -> float:
        return float(np.exp(self.intercept))

    def to_csv(self) -> str:
        rows = ["d,mean,stderr"]
        rows += [f"{d},{v:.17g},{s:.17g}" for d, v, s in zip(self.distances, self.values, self.stderr)]
        return "\n".join(rows) + "\n"

    def fit_record(self) -> dict:
        return {
            "xi_hat": self.fitted_xi,
            "slope_stderr": self.slope_stderr,
            "prefactor": self.prefactor,
            "r_squared": self.r_squared,
            "window": list(self.fit_window),
            "ensemble": self.ensemble_size,
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.fit_record(), indent=2, sort_keys=True)


def log_linear_fit(x, y):
    """Least squares of ``log y`` on ``x``: (slope, intercept, slope_stderr, R^2)."""
    x = np.asarray(x, float)
    ly = np.log(np.asarray(y, float))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    dof = max(len(x) - 2, 1)
    s2 = np.sum(resid**2) / dof
    slope_se = np.sqrt(s2 / np.sum((x - x.mean()) ** 2))
    return float(coef[0]), float(coef[1]), float(slope_se), float(r2)


def pair_profile(psi: np.ndarray, edge: int = 2) -> np.ndarray:
    """Mean over pairs at distance d of sum_k |psi_k(x) psi_k(y)|.

    ``psi`` has shape ``(..., n, n)``; sites within ``edge`` of either end of
    the window are left out.  Returns shape ``(..., n_eff)``, index = d.
    """
    n = psi.shape[-2]
    a = np.abs(psi[..., edge:n - edge, :])
    corr = a @ np.swapaxes(a, -1, -2)
    m = corr.shape[-1]
    return np.stack([np.diagonal(corr, offset=d, axis1=-2, axis2=-1).mean(axis=-1)
                     for d in range(m)], axis=-1)


def fit_profile(distances, values, d_min: int = 2, d_max: int | None = None,
                floor: float = 10 * np.finfo(float).eps):
    d = np.asarray(distances)
    v = np.asarray(values)
    d_max = d[-1] if d_max is None else d_max
    sel = (d >= d_min) & (d <= d_max) & (v > floor)
    if sel.sum() < 2:
        # decay faster than the floor allows inside the window: use d >= 0
        sel = (d <= d_max) & (v > floor)
    if sel.sum() < 2:
        raise LocalizationFitError("fewer than two usable points in the fit window")
    slope, icpt, se, r2 = log_linear_fit(d[sel], v[sel])
    if not slope < 0:
        raise LocalizationFitError(
            f"profile does not decay (slope {slope:.3g}); data look delocalized")
    return -1.0 / slope, se, icpt, r2, (int(d[sel][0]), int(d[sel][-1]))


def localization_profile(spec: DisorderSpec, B_size: int = 64, ensemble: int = 500,
                         model: str = "classical", coupling: float = 1.0,
                         edge: int = 2, chunk: int = 250) -> LocalizationProfile:
    """Disorder-averaged eigenvector-correlation profile and its decay length.

    Each member draws an independent window of ``B_size`` frequencies (the
    seeds derive from ``spec.seed``).  The fit is a log-linear least-squares
    over ``2 <= d <= B_size // 2`` restricted to values above 10 machine
    epsilons.
    """
    if ensemble < 100 or B_size < 16:
        raise ValueError("need ensemble >= 100 and B_size >= 16")
    member_spec = spec.with_length(B_size)
    seeds = ensemble_seeds(spec.seed, ensemble)
    rows = []
    for lo in range(0, ensemble, chunk):
        omegas = np.array([sample_disorder(member_spec.with_seed(s)).omega
                           for s in seeds[lo:lo + chunk]])
        diag, off = zip(*(tridiagonal_arrays(w, range(B_size), model, coupling) for w in omegas))
        _, psi = batched_eigh(np.array(diag), np.array(off))
        rows.append(pair_profile(psi, edge))
    prof = np.concatenate(rows)
    mean = prof.mean(axis=0)
    stderr = prof.std(axis=0, ddof=1) / np.sqrt(ensemble)
    distances = np.arange(len(mean))
    xi, se, icpt, r2, window = fit_profile(distances, mean, 2, B_size // 2)
    meta = {"B_size": B_size, "model": model, "coupling": coupling, "edge_excluded": edge,
            "omega_law": [spec.omega_law.kind, spec.omega_law.low, spec.omega_law.high],
            "seed": spec.seed}
    return LocalizationProfile(distances, mean, stderr, ensemble, xi, se, icpt, r2, window, meta)
