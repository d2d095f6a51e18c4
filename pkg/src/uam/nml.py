"""Incremental normalized maximum likelihood machinery.

Online Gaussian (and Gaussian mixture) density estimates over an activation
history, a log-domain accumulator for the NML denominator (COMP), and the
per-sample code length derived from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

NEG_INF = float("-inf")
LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_SIGMA_FLOOR = 1e-3


def log_sum_exp(a: float, b: float) -> float:
    """Return log(exp(a) + exp(b)) without overflow; -inf is the identity."""
    if math.isnan(a) or math.isnan(b):
        return math.nan
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


@dataclass(frozen=True)
class RunningGaussian:
    """Population mean/variance of everything seen so far, in O(1) memory."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    sigma_floor: float = DEFAULT_SIGMA_FLOOR

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")
        if self.count == 0 and (self.mean != 0.0 or self.m2 != 0.0):
            raise ValueError("an empty RunningGaussian must have mean = m2 = 0")
        if self.m2 < 0:
            raise ValueError("m2 must be nonnegative")

    @classmethod
    def from_moments(cls, mean: float, sigma: float, count: int = 1,
                     sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> "RunningGaussian":
        """Build a state that reports the given mean and sigma."""
        if count < 1:
            raise ValueError("count must be at least 1")
        return cls(count, float(mean), float(sigma) ** 2 * count, sigma_floor)

    @property
    def variance(self) -> float:
        if self.count == 0:
            raise ValueError("variance of an empty RunningGaussian is undefined")
        return self.m2 / self.count

    @property
    def sigma(self) -> float:
        return max(math.sqrt(self.variance), self.sigma_floor)

    def update(self, x: float) -> "RunningGaussian":
        return welford_update(self, x)

    def update_batch(self, xs) -> "RunningGaussian":
        """Absorb many samples at once (Chan et al. pairwise merge)."""
        xs = np.asarray(xs, dtype=np.float64).ravel()
        if xs.size == 0:
            return self
        if not np.all(np.isfinite(xs)):
            raise ValueError("non-finite sample")
        count, mean, m2 = merge_moments(
            self.count, self.mean, self.m2, xs.size, float(xs.mean()),
            float(((xs - xs.mean()) ** 2).sum()))
        return replace(self, count=count, mean=mean, m2=m2)


def merge_moments(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    """Combine two (count, mean, m2) summaries; works elementwise on arrays."""
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta * delta * (n_a * n_b / n)
    return n, mean, m2


def welford_update(state: RunningGaussian, x: float) -> RunningGaussian:
    if not math.isfinite(x):
        raise ValueError(f"non-finite sample {x!r}")
    count = state.count + 1
    delta = x - state.mean
    mean = state.mean + delta / count
    m2 = state.m2 + delta * (x - mean)
    return replace(state, count=count, mean=mean, m2=max(m2, 0.0))


def gaussian_log_pdf(x, mean, sigma):
    """Log density of N(mean, sigma^2); broadcasts over numpy arrays."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(x, dtype=np.float64) - mean) / sigma
    out = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class CompAccumulator:
    """log sum_j P(x_j | theta_j(x_j)) over every absorbed term."""

    log_sum: float = NEG_INF
    count: int = 0

    def __post_init__(self):
        if (self.count == 0) != (self.log_sum == NEG_INF):
            raise ValueError("count == 0 iff log_sum == -inf")

    def increment(self, log_likelihoods) -> "CompAccumulator":
        return comp_increment(self, log_likelihoods)


def log_sum_exp_terms(log_sum: float, terms: np.ndarray) -> float:
    """log(exp(log_sum) + sum(exp(terms))) in one shift-by-max pass."""
    hi = max(log_sum, float(terms.max()))
    total = np.exp(terms - hi).sum()
    if log_sum != NEG_INF:
        total += math.exp(log_sum - hi)
    return hi + math.log(total)


def comp_increment(acc: CompAccumulator, log_likelihoods) -> CompAccumulator:
    terms = np.asarray(log_likelihoods, dtype=np.float64).ravel()
    if terms.size == 0:
        return acc
    if not np.all(np.isfinite(terms)):
        raise ValueError("non-finite log-likelihood term")
    log_sum = log_sum_exp_terms(acc.log_sum, terms)
    # guard against the last-ulp rounding making COMP appear to shrink
    return CompAccumulator(max(log_sum, acc.log_sum), acc.count + terms.size)


def code_length(acc_after: CompAccumulator, log_likelihood):
    """NML code length L = COMP - log P(x | theta(x))."""
    if acc_after.count == 0:
        raise ValueError("code length against an empty accumulator")
    return acc_after.log_sum - log_likelihood


@dataclass(frozen=True)
class SaliencyTable:
    """Static data prior s(x) keyed by a discrete label."""

    entries: Mapping[Hashable, float] = field(default_factory=dict)
    default_weight: float = 1.0

    def __post_init__(self):
        if self.default_weight <= 0 or any(w <= 0 for w in self.entries.values()):
            raise ValueError("saliency weights must be strictly positive")

    def log_weight(self, key) -> float:
        return math.log(self.entries.get(key, self.default_weight))

    def log_weights(self, keys: Iterable) -> np.ndarray:
        return np.array([self.log_weight(k) for k in keys], dtype=np.float64)

    def scaled(self, factor: float) -> "SaliencyTable":
        return SaliencyTable({k: w * factor for k, w in self.entries.items()},
                             self.default_weight * factor)


def saliency_log_weight(table: SaliencyTable, key) -> float:
    return table.log_weight(key)


@dataclass(frozen=True)
class PriorModel:
    """Gaussian or Gaussian-mixture density used to score activations."""

    kind: str
    components: tuple  # of (weight, RunningGaussian)

    def __post_init__(self):
        if not self.components:
            raise ValueError("a prior needs at least one component")
        if self.kind not in ("gaussian", "mixture"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        weights = [w for w, _ in self.components]
        if any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("component weights must be positive and sum to 1")
        if self.kind == "gaussian" and len(self.components) != 1:
            raise ValueError("a Gaussian prior has exactly one component")

    @classmethod
    def gaussian(cls, g: RunningGaussian) -> "PriorModel":
        return cls("gaussian", ((1.0, g),))

    @classmethod
    def mixture(cls, components: Sequence) -> "PriorModel":
        return cls("mixture", tuple(components))

    def log_pdf(self, x):
        return prior_log_pdf(self, x)


def prior_log_pdf(prior: PriorModel, x):
    if prior.kind == "gaussian":
        g = prior.components[0][1]
        return gaussian_log_pdf(x, g.mean, g.sigma)
    x = np.asarray(x, dtype=np.float64)
    parts = np.stack([math.log(w) + gaussian_log_pdf(x, g.mean, g.sigma)
                      for w, g in prior.components])
    hi = parts.max(axis=0)
    out = hi + np.log(np.exp(parts - hi).sum(axis=0))
    return float(out) if out.ndim == 0 else out


def mixture_log_likelihood(weights, means, sigmas, xs) -> float:
    parts = (np.log(weights)[:, None]
             + gaussian_log_pdf(xs[None, :], means[:, None], sigmas[:, None]))
    hi = parts.max(axis=0)
    return float((hi + np.log(np.exp(parts - hi).sum(axis=0))).sum())


def fit_mixture_em(history, k: int, iterations: int,
                   sigma_floor: float = DEFAULT_SIGMA_FLOOR):
    """Fit a k-component 1-D Gaussian mixture by EM.

    Initialization uses quantile-spaced means, equal weights and the pooled
    standard deviation. Returns ``(PriorModel, log_likelihood_per_iteration)``;
    the first entry of the trace is the log-likelihood at initialization.
    """
    xs = np.asarray(history, dtype=np.float64).ravel()
    if k < 1 or iterations < 1:
        raise ValueError("k and iterations must be positive")
    if xs.size < k:
        raise ValueError(f"need at least {k} samples, got {xs.size}")

    means = np.quantile(xs, (np.arange(k) + 0.5) / k)
    sigmas = np.full(k, max(xs.std(), sigma_floor))
    weights = np.full(k, 1.0 / k)
    trace = [mixture_log_likelihood(weights, means, sigmas, xs)]
    for _ in range(iterations):
        # E-step
        log_r = (np.log(weights)[:, None]
                 + gaussian_log_pdf(xs[None, :], means[:, None], sigmas[:, None]))
        log_r -= log_r.max(axis=0)
        resp = np.exp(log_r)
        resp /= resp.sum(axis=0)
        # M-step
        nk = resp.sum(axis=1)
        nk = np.maximum(nk, 1e-12)
        weights = nk / nk.sum()
        means = (resp @ xs) / nk
        var = (resp * (xs[None, :] - means[:, None]) ** 2).sum(axis=1) / nk
        sigmas = np.maximum(np.sqrt(var), sigma_floor)
        trace.append(mixture_log_likelihood(weights, means, sigmas, xs))

    weights = weights / weights.sum()
    components = tuple(
        (float(w), RunningGaussian.from_moments(m, s, max(1, int(round(n))), sigma_floor))
        for w, m, s, n in zip(weights, means, sigmas, nk))
    if k == 1:
        return PriorModel("gaussian", ((1.0, components[0][1]),)), trace
    return PriorModel.mixture(components), trace


def mixture_em_refit(prior: PriorModel, history_buffer, k: int, iterations: int) -> PriorModel:
    """Refit ``prior`` on a history buffer; keeps the prior's sigma floor."""
    floor = prior.components[0][1].sigma_floor
    return fit_mixture_em(history_buffer, k, iterations, floor)[0]
