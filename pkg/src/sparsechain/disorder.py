"""Random disorder (omega_x, tau_x) for the sparse-interaction chains.

Both arrays are read off counter-based Philox streams, one stream per
variable, with the site index as the counter position.  A realization of
length L is therefore the prefix of a single infinite array: growing the
chain, conditioning a window, or reading a window somewhere far down the
chain never changes the value drawn at any other site.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

OMEGA_TAG = 0
TAU_TAG = 1
_MASK64 = (1 << 64) - 1


class DisorderConfigError(ValueError):
    """Raised for a disorder specification that violates its invariants."""


@dataclass(frozen=True)
class OmegaLaw:
    """Law of the on-site frequencies: uniform on ``[low, high]``."""

    low: float = 0.5
    high: float = 1.5
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind != "uniform":
            raise DisorderConfigError(f"unsupported omega law {self.kind!r}")
        if not self.high >= self.low:
            raise DisorderConfigError("omega law needs high >= low")


@dataclass(frozen=True)
class DisorderSpec:
    """Parameters of a disorder realization.

    Parameters
    ----------
    L : int
        Chain length.
    p : float
        Interaction probability, ``P(tau_x = 1)``.  Must lie in [0, 1).
    omega_law : OmegaLaw
        Law of omega_x.  For the classical chain ``low`` must be positive
        (strict convexity of the Hamiltonian).
    seed : int
        64-bit seed keying both streams.
    model : str
        ``"classical"`` or ``"quantum"``; only the classical model requires
        ``omega_law.low > 0``.
    """

    L: int
    p: float = 0.0
    omega_law: OmegaLaw = field(default_factory=OmegaLaw)
    seed: int = 0
    model: str = "classical"

    def __post_init__(self):
        if isinstance(self.omega_law, dict):
            object.__setattr__(self, "omega_law", OmegaLaw(**self.omega_law))
        if int(self.L) < 1:
            raise DisorderConfigError("L must be a positive integer")
        if not 0.0 <= self.p < 1.0:
            raise DisorderConfigError(f"p must lie in [0, 1), got {self.p}")
        if self.model not in ("classical", "quantum"):
            raise DisorderConfigError(f"unknown model {self.model!r}")
        if self.model == "classical" and not self.omega_law.low > 0:
            raise DisorderConfigError("classical chain needs omega_minus > 0")
        if not 0 <= int(self.seed) <= _MASK64:
            raise DisorderConfigError("seed must be a 64-bit unsigned integer")

    def with_seed(self, seed: int) -> "DisorderSpec":
        return replace(self, seed=int(seed) & _MASK64)

    def with_length(self, L: int) -> "DisorderSpec":
        return replace(self, L=int(L))


@dataclass(frozen=True, eq=False)
class DisorderRealization:
    omega: np.ndarray
    tau: np.ndarray
    spec: DisorderSpec

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        tau = np.asarray(self.tau, dtype=np.int8)
        if omega.shape != (self.spec.L,) or tau.shape != (self.spec.L,):
            raise DisorderConfigError("omega and tau must both have length L")
        omega.flags.writeable = False
        tau.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "tau", tau)

    @property
    def L(self) -> int:
        return self.spec.L

    def __eq__(self, other):
        if not isinstance(other, DisorderRealization):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.omega, other.omega)
            and np.array_equal(self.tau, other.tau)
        )

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "omega": self.omega.tolist(),
            "tau": self.tau.astype(int).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "DisorderRealization":
        spec = DisorderSpec(**data["spec"])
        return cls(np.array(data["omega"], float), np.array(data["tau"]), spec)

    @classmethod
    def from_json(cls, text: str) -> "DisorderRealization":
        return cls.from_dict(json.loads(text))


def site_stream(seed: int, tag: int, start: int = 0) -> np.random.Generator:
    """Generator whose n-th double is the value at site ``start + n``.

    Philox emits four 64-bit words per counter increment and every double
    consumes one word, so site ``s`` lives in block ``s // 4``.
    """
    bitgen = np.random.Philox(key=(int(seed) & _MASK64) | (int(tag) << 64))
    block, offset = divmod(int(start), 4)
    if block:
        bitgen.advance(block)
    gen = np.random.Generator(bitgen)
    if offset:
        gen.random(offset)
    return gen


def _omega_from_uniform(u: np.ndarray, law: OmegaLaw) -> np.ndarray:
    return law.low + (law.high - law.low) * u


def omega_window(spec: DisorderSpec, start: int, stop: int) -> np.ndarray:
    """omega at 0-based sites ``start..stop-1`` without drawing the prefix."""
    u = site_stream(spec.seed, OMEGA_TAG, start).random(stop - start)
    return _omega_from_uniform(u, spec.omega_law)


def sample_tau(spec: DisorderSpec) -> np.ndarray:
    u = site_stream(spec.seed, TAU_TAG).random(spec.L)
    return (u < spec.p).astype(np.int8)


def sample_disorder(spec: DisorderSpec) -> DisorderRealization:
    """Draw ``omega`` iid from the omega law and ``tau`` iid Bernoulli(p)."""
    omega = omega_window(spec, 0, spec.L)
    return DisorderRealization(omega, sample_tau(spec), spec)


def _as_index_array(B, L: int) -> np.ndarray:
    if isinstance(B, range):
        idx = np.arange(B.start, B.stop, B.step, dtype=int)
    else:
        idx = np.asarray(list(B) if not isinstance(B, np.ndarray) else B, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= L):
        raise IndexError(f"index set out of range for chain of length {L}")
    return idx


def condition_zero_stretch(real: DisorderRealization, B) -> DisorderRealization:
    """Copy of ``real`` with ``tau_y = 0`` for every 0-based site ``y`` in B."""
    idx = _as_index_array(B, real.L)
    tau = real.tau.copy()
    tau[idx] = 0
    return DisorderRealization(real.omega.copy(), tau, real.spec)


def ensemble_seeds(base_seed: int, n: int) -> list[int]:
    """Independent 64-bit seeds for ``n`` ensemble members."""
    ss = np.random.SeedSequence(int(base_seed))
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64)]
