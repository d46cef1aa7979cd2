"""Exogenous-noise and data-generating distributions.

Every distribution exposes ``sample(rng, n)`` returning an ``(n, *event)``
array and ``log_prob(x)`` returning a :class:`~dscm.numerics.Tensor`, so the
base density term of a flow stays differentiable with respect to ``x``.
Out-of-support points of continuous laws get ``-inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .numerics import Tensor, as_tensor, log_softmax, where

__all__ = [
    "Distribution",
    "StandardNormal",
    "Gamma",
    "Uniform",
    "Gumbel",
    "Bernoulli",
    "Categorical",
    "gumbel_from_uniform",
    "gamma_entropy",
    "make_rng",
]

LOG_2PI = math.log(2.0 * math.pi)


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; ``seed`` may be an int, a sequence of ints, or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


class Distribution:
    event_size: int = 1

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def log_prob(self, x) -> Tensor:
        raise NotImplementedError

    @staticmethod
    def _check_n(n: int) -> None:
        if int(n) < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")


@dataclass(frozen=True)
class StandardNormal(Distribution):
    dim: int = 1

    @property
    def event_size(self) -> int:
        return self.dim

    def sample(self, rng, n):
        self._check_n(n)
        return rng.standard_normal((int(n), self.dim))

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        return x.square() * -0.5 - 0.5 * LOG_2PI

    def entropy(self) -> float:
        return 0.5 * self.dim * (1.0 + LOG_2PI)


@dataclass(frozen=True)
class Gamma(Distribution):
    """Gamma law with shape ``alpha`` and *rate* ``beta`` (mean alpha/beta)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Gamma needs alpha>0 and beta>0, got ({self.alpha}, {self.beta})")

    def sample(self, rng, n):
        self._check_n(n)
        return rng.standard_gamma(self.alpha, size=(int(n), 1)) / self.beta

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        inside = x.data > 0
        safe = where(inside, x, 1.0)
        const = self.alpha * math.log(self.beta) - math.lgamma(self.alpha)
        lp = safe.log() * (self.alpha - 1.0) - safe * self.beta + const
        return where(inside, lp, -np.inf)

    @property
    def mean(self) -> float:
        return self.alpha / self.beta

    @property
    def variance(self) -> float:
        return self.alpha / self.beta**2


@dataclass(frozen=True)
class Uniform(Distribution):
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"Uniform needs low < high, got ({self.low}, {self.high})")

    def sample(self, rng, n):
        self._check_n(n)
        return rng.uniform(self.low, self.high, size=(int(n), 1))

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        inside = (x.data >= self.low) & (x.data <= self.high)
        return Tensor(np.where(inside, -math.log(self.high - self.low), -np.inf))


def gumbel_from_uniform(u, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Inverse-CDF map ``loc - scale * log(-log u)``."""
    return loc - scale * np.log(-np.log(u))


@dataclass(frozen=True)
class Gumbel(Distribution):
    loc: float = 0.0
    scale: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Gumbel scale must be positive, got {self.scale}")

    @property
    def event_size(self) -> int:
        return self.dim

    def sample(self, rng, n):
        self._check_n(n)
        # open interval keeps log(-log u) finite
        u = rng.uniform(np.finfo(float).tiny, 1.0, size=(int(n), self.dim))
        return gumbel_from_uniform(u, self.loc, self.scale)

    def log_prob(self, x) -> Tensor:
        z = (as_tensor(x) - self.loc) * (1.0 / self.scale)
        return -(z + (-z).exp()) - math.log(self.scale)


@dataclass(frozen=True)
class Bernoulli(Distribution):
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"Bernoulli p must lie in [0, 1], got {self.p}")

    def sample(self, rng, n):
        self._check_n(n)
        return (rng.uniform(size=(int(n), 1)) < self.p).astype(float)

    def log_prob(self, x) -> Tensor:
        x = np.asarray(as_tensor(x).data)
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("Bernoulli values must be 0 or 1")
        with np.errstate(divide="ignore"):
            return Tensor(np.where(x == 1, np.log(self.p), np.log1p(-self.p)))


class Categorical(Distribution):
    """Categorical law over ``K`` classes parametrised by logits."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)
        if self.logits.ndim != 1 or not np.all(np.isfinite(self.logits)):
            raise ValueError("Categorical logits must be a finite 1-D vector")

    @property
    def probs(self) -> np.ndarray:
        return special.softmax(self.logits)

    def sample(self, rng, n):
        self._check_n(n)
        g = Gumbel(dim=len(self.logits)).sample(rng, n)
        return np.argmax(g + self.logits, axis=1)[:, None].astype(float)

    def log_prob(self, x) -> Tensor:
        idx = np.asarray(as_tensor(x).data).reshape(-1).astype(int)
        K = len(self.logits)
        if np.any((idx < 0) | (idx >= K)):
            raise IndexError(f"category index out of range for K={K}")
        return Tensor(log_softmax(Tensor(self.logits)).data[idx][:, None])


def gamma_entropy(alpha: float, beta: float) -> float:
    """Differential entropy of Gamma(shape alpha, rate beta)."""
    return float(alpha - math.log(beta) + special.gammaln(alpha) + (1.0 - alpha) * special.digamma(alpha))
