"""Cross-entropy method with importance mixing (CEIM).

A diagonal Gaussian over real vectors is refined by rank-weighted
recombination.  Samples from the previous population are kept when they
remain likely under the updated distribution, which saves fitness budget
when the distribution moves slowly.  Fitness is maximised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError

log = logging.getLogger(__name__)

FRESH = "fresh"
REUSED = "reused"

_MAX_RATIO = 1e12


@dataclass
class ArchDistribution:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64).copy()
        if self.mu.shape != self.sigma2.shape or self.mu.ndim != 1:
            raise ConfigurationError("mu and sigma2 must be 1-d arrays of equal length")
        if np.any(self.sigma2 <= 0):
            raise ConfigurationError("sigma2 entries must be positive")

    @property
    def dim(self) -> int:
        return self.mu.size

    def log_pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = x - self.mu
        return -0.5 * (np.sum(d * d / self.sigma2, axis=-1) + np.sum(np.log(2 * np.pi * self.sigma2)))

    def sample(self, rng, n: Optional[int] = None) -> np.ndarray:
        size = (self.dim,) if n is None else (n, self.dim)
        return self.mu + np.sqrt(self.sigma2) * rng.standard_normal(size)

    def copy(self) -> "ArchDistribution":
        return ArchDistribution(self.mu, self.sigma2)


@dataclass
class FitSample:
    alpha: np.ndarray
    fitness: float = float("nan")
    origin: str = FRESH


@dataclass
class CEIMConfig:
    population: int = 50
    epochs: int = 70
    warmup_epochs: int = 20
    epsilon_start: float = 1e-2
    epsilon_end: float = 1e-5
    eval_fraction: float = 1.0 / 3.0
    seed: int = 0
    cache_fitness: bool = False
    init_mu: float = 0.0
    init_sigma2: float = 1.0
    max_redraws: int = 100

    def __post_init__(self):
        if self.population < 1:
            raise ConfigurationError("population must be positive")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must lie in [0, epochs)")
        if self.epsilon_start < 0 or self.epsilon_end < 0:
            raise ConfigurationError("epsilon must be nonnegative")
        if not 0 < self.eval_fraction <= 1:
            raise ConfigurationError("eval_fraction must lie in (0, 1]")

    @property
    def search_iterations(self) -> int:
        return self.epochs - self.warmup_epochs

    def epsilon(self, iteration: int) -> float:
        """Noise floor for the 0-based post-warmup ``iteration`` (linear decay)."""
        n = self.search_iterations
        if n <= 1:
            return self.epsilon_end
        frac = min(max(iteration / (n - 1), 0.0), 1.0)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


def sample_population(dist: ArchDistribution, n: int, rng) -> List[FitSample]:
    if n < 1:
        raise ConfigurationError("population size must be positive")
    return [FitSample(a) for a in dist.sample(rng, n)]


def _density_ratio(x, num: ArchDistribution, den: ArchDistribution) -> float:
    r = float(np.exp(min(num.log_pdf(x)[0] - den.log_pdf(x)[0], math.log(_MAX_RATIO))))
    return min(max(r, 0.0), _MAX_RATIO)


def importance_mix(old: Sequence[FitSample], pi_old: Optional[ArchDistribution],
                   pi_new: ArchDistribution, n: int, rng) -> List[FitSample]:
    """Next population of exactly ``n`` samples.

    For each slot an old sample is kept if ``min(1, p_new/p_old) > r1`` and a
    fresh draw from ``pi_new`` is admitted if ``max(0, 1 - p_old/p_new) > r2``,
    with ``r1``, ``r2`` uniform and drawn per test.  The pool is then trimmed
    by uniform random removal or topped up with unconditional fresh draws.
    """
    if n < 1:
        raise ConfigurationError("population size must be positive")
    if not old or pi_old is None:
        return sample_population(pi_new, n, rng)
    pool: List[FitSample] = []
    for i in range(n):
        if i < len(old):
            s = old[i]
            if min(1.0, _density_ratio(s.alpha, pi_new, pi_old)) > rng.random():
                pool.append(FitSample(s.alpha.copy(), s.fitness, REUSED))
        a = pi_new.sample(rng)
        if max(0.0, 1.0 - _density_ratio(a, pi_old, pi_new)) > rng.random():
            pool.append(FitSample(a))
    while len(pool) > n:
        pool.pop(int(rng.integers(len(pool))))
    while len(pool) < n:
        pool.append(FitSample(pi_new.sample(rng)))
    return pool


def reuse_fraction(population: Sequence[FitSample]) -> float:
    return sum(s.origin == REUSED for s in population) / max(len(population), 1)


def rank_weights(n: int) -> np.ndarray:
    """Weights ``log(1+n)/i`` normalised over ranks ``i = 1..n``."""
    if n < 1:
        raise ConfigurationError("rank_weights needs at least one sample")
    raw = math.log(1 + n) / np.arange(1, n + 1, dtype=np.float64)
    return raw / raw.sum()


def sort_by_fitness(samples: Sequence[FitSample]) -> List[FitSample]:
    """Best first; stable, so equal fitness keeps sampling order."""
    return sorted(samples, key=lambda s: -s.fitness)


def update_distribution(dist: ArchDistribution, sorted_samples: Sequence[FitSample], lam, eps: float) -> ArchDistribution:
    """Rank-weighted mean, and diagonal variance about the *previous* mean plus ``eps``."""
    X = np.stack([s.alpha for s in sorted_samples])
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (X.shape[0],):
        raise ConfigurationError("weights and samples differ in length")
    mu_new = lam @ X
    sigma2_new = lam @ (X - dist.mu) ** 2 + eps
    return ArchDistribution(mu_new, sigma2_new)


@dataclass
class SearchResult:
    best: FitSample
    distribution: ArchDistribution
    population: List[FitSample]
    trace: List[dict] = field(default_factory=list)


def search(fitness: Callable[[np.ndarray], float], dim: int, cfg: CEIMConfig,
           trainer: Optional[Callable[..., None]] = None,
           on_iteration: Optional[Callable[[dict], None]] = None) -> SearchResult:
    """Alternate weight training and distribution updates for ``cfg.epochs`` epochs.

    ``trainer(epoch, mu, warmup)`` is called at the start of every epoch
    (1-based); during the first ``warmup_epochs`` nothing else happens.
    Afterwards each epoch mixes, evaluates, ranks and updates.  Returns the
    best sample of the last evaluated population.
    """
    rng = np.random.default_rng(cfg.seed)
    dist = ArchDistribution(np.full(dim, cfg.init_mu), np.full(dim, cfg.init_sigma2))
    pi_old: Optional[ArchDistribution] = None
    old: List[FitSample] = []
    population: List[FitSample] = []
    trace: List[dict] = []
    best_so_far = -math.inf

    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        if trainer is not None:
            trainer(epoch, dist.mu.copy(), warm)
        if warm:
            continue
        it = epoch - cfg.warmup_epochs - 1
        population = importance_mix(old, pi_old, dist, cfg.population, rng)
        reused = reuse_fraction(population)
        for k, s in enumerate(population):
            if s.origin == REUSED and cfg.cache_fitness and math.isfinite(s.fitness):
                continue
            f = float(fitness(s.alpha))
            redraws = 0
            while not math.isfinite(f):
                redraws += 1
                if redraws > cfg.max_redraws:
                    raise NumericalError(f"fitness stayed non-finite after {cfg.max_redraws} redraws")
                log.warning("non-finite fitness at epoch %d, redrawing sample %d", epoch, k)
                s = FitSample(dist.sample(rng))
                population[k] = s
                f = float(fitness(s.alpha))
            s.fitness = f
        ranked = sort_by_fitness(population)
        lam = rank_weights(len(ranked))
        eps = cfg.epsilon(it)
        pi_old = dist
        dist = update_distribution(dist, ranked, lam, eps)
        old = population
        fits = np.array([s.fitness for s in population])
        best_so_far = max(best_so_far, float(fits.max()))
        record = {
            "iteration": it + 1,
            "epoch": epoch,
            "best_fitness": float(fits.max()),
            "mean_fitness": float(fits.mean()),
            "running_best": best_so_far,
            "reuse_fraction": reused,
            "epsilon": eps,
            "mu": dist.mu.tolist(),
            "sigma2_mean": float(dist.sigma2.mean()),
            "best_alpha": ranked[0].alpha.tolist(),
        }
        trace.append(record)
        if on_iteration is not None:
            on_iteration(record)

    best = sort_by_fitness(population)[0]
    return SearchResult(best, dist, population, trace)
