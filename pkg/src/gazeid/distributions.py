"""Gamma and multinomial primitives: log-densities, scores, MLE, sampling.

All saccade feature channels are modeled with shape/scale Gamma
distributions; saccade types with a 4-way multinomial. This module keeps
those primitives in one place so that model code only composes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

# Floor applied to multinomial entries so score terms K_u / pi_u stay
# finite when a type never occurs in training but shows up at test time.
PROB_FLOOR = 1e-6

N_SACCADE_TYPES = 4


class DegenerateSampleError(ValueError):
    """Sample set carries no information for the requested estimate."""


class ConvergenceError(RuntimeError):
    """Iterative estimator failed to converge; carries the last iterate."""

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class GammaParams:
    """Shape/scale parameterization; mean = shape * scale."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and np.isfinite(self.shape)):
            raise ValueError(f"shape must be positive and finite, got {self.shape}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class MultinomialParams:
    """Probability vector over the four saccade types."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if pi.shape != (N_SACCADE_TYPES,):
            raise ValueError(f"pi must have shape ({N_SACCADE_TYPES},), got {pi.shape}")
        if np.any(pi < PROB_FLOOR):
            raise ValueError(f"pi entries must be >= {PROB_FLOOR}, got {pi}")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError(f"pi must sum to 1 within 1e-12, got sum {pi.sum()!r}")


def gamma_logpdf(x, params: GammaParams):
    """Log-density of the shape/scale Gamma at x (scalar or array), x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("gamma_logpdf requires strictly positive finite x")
    a, b = params.shape, params.scale
    return (a - 1.0) * np.log(x) - x / b - gammaln(a) - a * np.log(b)


def gamma_score(x, params: GammaParams):
    """Per-observation derivatives of the Gamma log-density.

    Returns (d/d shape, d/d scale). The shape derivative uses the digamma
    function: ln x - psi(shape) - ln scale; the scale derivative is
    (x / scale - shape) / scale.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("gamma_score requires strictly positive finite x")
    a, b = params.shape, params.scale
    d_shape = np.log(x) - digamma(a) - np.log(b)
    d_scale = (x / b - a) / b
    return d_shape, d_scale


def gamma_mle(xs, tol: float = 1e-10, max_iter: int = 100) -> GammaParams:
    """Maximum-likelihood Gamma fit by Newton iteration on the shape.

    Solves ln(a) - psi(a) = ln(mean(x)) - mean(ln x), then sets
    scale = mean(x) / a. Requires at least two distinct positive samples.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1 or xs.size < 2:
        raise DegenerateSampleError("need at least 2 samples for a Gamma fit")
    if np.any(xs <= 0) or not np.all(np.isfinite(xs)):
        raise DegenerateSampleError("Gamma samples must be strictly positive and finite")
    mean = xs.mean()
    s = np.log(mean) - np.mean(np.log(xs))
    # s -> 0 as the sample spread vanishes; the shape then diverges.
    if not np.isfinite(s) or s <= 1e-12:
        raise DegenerateSampleError("samples are (numerically) all identical; shape is unidentifiable")

    a = 0.5 / s
    for _ in range(max_iter):
        f = np.log(a) - digamma(a) - s
        fprime = 1.0 / a - polygamma(1, a)
        step = f / fprime
        a_new = a - step
        if a_new <= 0:
            a_new = a / 2.0
        if abs(a_new - a) < tol * max(1.0, a):
            return GammaParams(shape=float(a_new), scale=float(mean / a_new))
        a = a_new
    raise ConvergenceError(
        f"Gamma shape Newton iteration did not converge in {max_iter} steps (last shape {a!r})",
        last_iterate=a,
    )


def multinomial_mle(counts) -> MultinomialParams:
    """Floored multinomial MLE: pi_u = max(K_u / sum K, floor), renormalized.

    Floored entries are pinned at exactly PROB_FLOOR and the remaining mass
    is distributed proportionally over the others, so counts (5,0,0,0) map
    to (1 - 3*floor, floor, floor, floor).
    """
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (N_SACCADE_TYPES,):
        raise ValueError(f"expected {N_SACCADE_TYPES} counts, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise DegenerateSampleError("all type counts are zero")

    pi = counts / total
    floored = pi < PROB_FLOOR
    # Rescaling the free entries can push borderline ones under the floor;
    # repeat until the floored set is stable (at most 3 passes for 4 bins).
    while True:
        free_mass = 1.0 - PROB_FLOOR * floored.sum()
        scaled = pi.copy()
        scaled[floored] = PROB_FLOOR
        scaled[~floored] = pi[~floored] * free_mass / pi[~floored].sum()
        newly = (scaled < PROB_FLOOR) & ~floored
        if not newly.any():
            return MultinomialParams(pi=scaled)
        floored |= newly


def multinomial_score(counts, params: MultinomialParams) -> np.ndarray:
    """Per-coordinate derivative K_u / pi_u of the categorical log-likelihood."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != params.pi.shape:
        raise ValueError("counts and pi shapes differ")
    return counts / params.pi


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept an int seed or a caller-owned Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def gamma_sample(params: GammaParams, n: int, seed_or_rng) -> np.ndarray:
    """Draw n values; deterministic for a given seed."""
    rng = as_rng(seed_or_rng)
    return rng.gamma(shape=params.shape, scale=params.scale, size=n)


def multinomial_sample(params: MultinomialParams, seed_or_rng) -> int:
    """Draw one saccade type in {1, 2, 3, 4}; deterministic for a given seed."""
    rng = as_rng(seed_or_rng)
    cum = np.cumsum(params.pi)
    u = rng.random() * cum[-1]
    return int(min(np.searchsorted(cum, u, side="right"), N_SACCADE_TYPES - 1)) + 1
