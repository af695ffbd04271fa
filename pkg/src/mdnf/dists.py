"""Base and auxiliary distributions.

Categorical parameters, delta bases, seeded RNG plumbing, Gumbel noise,
symmetric Dirichlet draws for base-distribution sweeps, and the
Gumbel-Softmax density (evaluated fully in log space, which is the only
form that survives tau > 5 at K > 4).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .diffcore import Temperature

__all__ = [
    "CategoricalParams",
    "DeltaBase",
    "SeededRng",
    "sample_categorical",
    "gumbel_from_uniform",
    "sample_gumbel",
    "gumbel_softmax_sample",
    "gs_log_density",
    "sample_dirichlet_base",
    "categorical_entropy",
]

_UNIFORM_LO = 1e-12
_UNIFORM_HI = 1.0 - 1e-12


@dataclass(frozen=True)
class CategoricalParams:
    """Probabilities of a single categorical variable."""

    probs: np.ndarray

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probs must be nonnegative and finite")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probs must sum to 1 within 1e-9, got {p.sum()!r}")
        object.__setattr__(self, "probs", p)

    @property
    def cardinality(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class DeltaBase:
    """Categorical with all mass on one atom."""

    atom: int
    cardinality: int

    def __post_init__(self):
        if not (0 <= self.atom < self.cardinality):
            raise ValueError(f"atom {self.atom} outside [0, {self.cardinality})")


class SeededRng:
    """Deterministic random source: identical seed + call sequence, identical bits.

    Thin wrapper over a counter-based generator; `derive` hashes (seed, key)
    into an independent stream so experiment cells stay reproducible no matter
    what order a worker pool completes them in.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def gamma(self, shape, size=None):
        return self._gen.gamma(shape, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, p=None):
        return self._gen.choice(n, p=p)

    def gumbel(self, size=None):
        return gumbel_from_uniform(self.uniform(size))

    def derive(self, key: str) -> "SeededRng":
        digest = hashlib.sha256(f"{self.seed}/{key}".encode()).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))


def sample_categorical(p: CategoricalParams, rng: SeededRng, size=None):
    """Draw category indices distributed as p (inverse-CDF method)."""
    cdf = np.cumsum(p.probs)
    cdf[-1] = 1.0
    u = rng.uniform(size)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, p.cardinality - 1)


def gumbel_from_uniform(u):
    """Inverse-CDF Gumbel(0,1) transform with the uniform clamped off {0,1}."""
    u = np.clip(u, _UNIFORM_LO, _UNIFORM_HI)
    return -np.log(-np.log(u))


def sample_gumbel(rng: SeededRng, size=None):
    return rng.gumbel(size)


def gumbel_softmax_sample(logits, tau, rng: SeededRng):
    """One relaxed categorical sample: softmax((logits + g) / tau)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("gumbel_softmax_sample requires finite logits")
    t = tau.tau if isinstance(tau, Temperature) else Temperature(float(tau)).tau
    z = (logits + rng.gumbel(logits.shape)) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gs_log_density(x, p: CategoricalParams, tau) -> float:
    """Log Gumbel-Softmax density on the open simplex.

    (K-1) log tau + log((K-1)!) + sum_k [log p_k - (tau+1) log x_k]
                                - K log(sum_j p_j x_j^{-tau})
    Discrete points (any x_k = 0) are outside the support.
    """
    x = np.asarray(x, dtype=np.float64)
    t = tau.tau if isinstance(tau, Temperature) else Temperature(float(tau)).tau
    k = p.cardinality
    if x.shape != (k,):
        raise ValueError("x and p disagree on cardinality")
    if np.any(x <= 0.0):
        raise ValueError("gs density is defined only on the open simplex (all x_k > 0)")
    with np.errstate(divide="ignore"):
        logp = np.log(p.probs)
    logx = np.log(x)
    return float((k - 1) * math.log(t) + gammaln(k)
                 + (logp - (t + 1.0) * logx).sum()
                 - k * logsumexp(logp - t * logx))


def sample_dirichlet_base(alpha: float, k: int, rng: SeededRng) -> CategoricalParams:
    """One draw from the symmetric Dirichlet Dir(alpha, ..., alpha).

    alpha >= 1e6 returns the exact uniform (the limiting case).  Small shapes
    use the boosted-shape Gamma trick in log space, so draws at alpha ~ 1e-3
    come out as clean near-deltas instead of 0/0.
    """
    if not (alpha > 0):
        raise ValueError("alpha must be positive")
    if k < 1:
        raise ValueError("cardinality must be >= 1")
    if alpha >= 1e6:
        return CategoricalParams(np.full(k, 1.0 / k))
    if alpha < 1.0:
        boosted = rng.gamma(alpha + 1.0, size=k)
        u = np.clip(rng.uniform(k), _UNIFORM_LO, _UNIFORM_HI)
        log_g = np.log(boosted) + np.log(u) / alpha
    else:
        g = rng.gamma(alpha, size=k)
        with np.errstate(divide="ignore"):
            log_g = np.log(g)
    log_g = log_g - logsumexp(log_g)
    probs = np.exp(log_g)
    return CategoricalParams(probs / probs.sum())


def categorical_entropy(p: CategoricalParams) -> float:
    """Exact entropy in nats, with 0 log 0 = 0."""
    probs = p.probs
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())
