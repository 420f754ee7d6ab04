"""
Population-based metaheuristics for box-bounded minimisation.

Two algorithms share one configuration type and one result type:

- Backtracking Search Optimization Algorithm (BSA), with a historical
  population that steers the mutation direction and a single amplitude
  factor ``F`` drawn as ``3 * N(0, 1)`` each generation.
- Global-best Particle Swarm Optimization (PSO) with inertia weight.

Both run a fixed iteration budget and are fully determined by
``OptimizerConfig.seed``.  Fitness functions are expected to be pure;
non-finite values are scored as ``+inf``.  Candidate fitnesses within a
generation are computed through ``evaluator`` (default: builtin ``map``),
so a thread or process pool ``map`` can be passed in; results are always
reduced in population-index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "CandidateSolution",
    "OptimizerConfig",
    "bsa_minimize",
    "pso_minimize",
    "minimize",
    "ALGORITHMS",
]


@dataclass
class CandidateSolution:
    position: np.ndarray
    fitness: float
    history: tuple = ()
    n_evaluations: int = 0


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Settings shared by both optimizers.

    Parameters
    ----------
    population_size : int
        Number of individuals (BSA) or particles (PSO), at least 2.
    max_iterations : int
        Number of generations; there is no early stop.
    bounds : sequence of (low, high), optional
        Search box, one pair per dimension.  Callers that know the problem
        dimension may leave it ``None`` and fill it in with :meth:`with_bounds`.
    seed : int
        Seed of the generator driving every random draw.
    mix_rate : float
        BSA crossover mix rate in (0, 1].
    amplitude_scale : float
        BSA amplitude factor scale, ``F = amplitude_scale * N(0, 1)``.
    inertia, cognitive, social : float
        PSO velocity update weights.
    velocity_clamp : float
        PSO maximum speed as a fraction of each dimension's span.
    """

    population_size: int = 30
    max_iterations: int = 300
    bounds: Optional[tuple] = None
    seed: int = 0
    mix_rate: float = 1.0
    amplitude_scale: float = 3.0
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    velocity_clamp: float = 0.5

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError(f"population_size must be >= 2, got {self.population_size}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 < self.mix_rate <= 1.0:
            raise ValueError(f"mix_rate must be in (0, 1], got {self.mix_rate}")
        if not 0.0 < self.velocity_clamp:
            raise ValueError("velocity_clamp must be positive")
        if self.bounds is not None:
            b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            for lo, hi in b:
                if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                    raise ValueError(f"invalid bound pair ({lo}, {hi})")
            object.__setattr__(self, "bounds", b)

    def with_bounds(self, bounds) -> "OptimizerConfig":
        return replace(self, bounds=tuple(bounds))

    def limits(self):
        if self.bounds is None:
            raise ValueError("optimizer bounds are not set")
        arr = np.asarray(self.bounds, dtype=float)
        return arr[:, 0], arr[:, 1]


def _evaluate(fitness, population, evaluator) -> np.ndarray:
    values = np.fromiter(
        evaluator(fitness, [row.copy() for row in population]),
        dtype=float,
        count=len(population),
    )
    values[~np.isfinite(values)] = np.inf
    return values


def _initial_population(rng, low, high, size, initial_population):
    if initial_population is None:
        return rng.uniform(low, high, (size, low.size))
    pop = np.array(initial_population, dtype=float)
    if pop.shape != (size, low.size):
        raise ValueError(f"initial population must have shape {(size, low.size)}, got {pop.shape}")
    if np.any(pop < low) or np.any(pop > high):
        raise ValueError("initial population lies outside the bounds")
    return pop


def bsa_minimize(
    fitness: Callable[[np.ndarray], float],
    config: OptimizerConfig,
    initial_population=None,
    evaluator=map,
) -> CandidateSolution:
    """Minimise ``fitness`` with the Backtracking Search Optimization Algorithm."""
    low, high = config.limits()
    rng = np.random.default_rng(config.seed)
    n_pop, dim = config.population_size, low.size

    pop = _initial_population(rng, low, high, n_pop, initial_population)
    fit = _evaluate(fitness, pop, evaluator)
    historical = rng.uniform(low, high, (n_pop, dim))
    n_eval = n_pop

    i_best = int(np.argmin(fit))
    best_pos, best_fit = pop[i_best].copy(), float(fit[i_best])
    history = [best_fit]

    for _ in range(config.max_iterations):
        # selection-I: occasionally refresh the memory, then shuffle it
        if rng.random() < rng.random():
            historical = pop.copy()
        historical = historical[rng.permutation(n_pop)]

        amplitude = config.amplitude_scale * rng.standard_normal()

        mask = np.zeros((n_pop, dim), dtype=bool)
        if rng.random() < rng.random():
            for i in range(n_pop):
                n_mix = math.ceil(config.mix_rate * rng.random() * dim)
                mask[i, rng.permutation(dim)[:n_mix]] = True
        else:
            mask[np.arange(n_pop), rng.integers(0, dim, n_pop)] = True

        trial = pop + (mask * amplitude) * (historical - pop)

        outside = (trial < low) | (trial > high)
        redraw = rng.uniform(low, high, (n_pop, dim))
        trial = np.where(outside, redraw, trial)

        trial_fit = _evaluate(fitness, trial, evaluator)
        n_eval += n_pop

        # selection-II: greedy, strict improvement only
        better = trial_fit < fit
        pop[better] = trial[better]
        fit[better] = trial_fit[better]

        i_best = int(np.argmin(fit))
        if fit[i_best] < best_fit:
            best_fit = float(fit[i_best])
            best_pos = pop[i_best].copy()
        history.append(best_fit)

    return CandidateSolution(best_pos, best_fit, tuple(history), n_eval)


def pso_minimize(
    fitness: Callable[[np.ndarray], float],
    config: OptimizerConfig,
    initial_population=None,
    evaluator=map,
) -> CandidateSolution:
    """Minimise ``fitness`` with global-best Particle Swarm Optimization."""
    low, high = config.limits()
    rng = np.random.default_rng(config.seed)
    n_pop, dim = config.population_size, low.size
    vmax = config.velocity_clamp * (high - low)

    x = _initial_population(rng, low, high, n_pop, initial_population)
    v = rng.uniform(-vmax, vmax, (n_pop, dim))
    f = _evaluate(fitness, x, evaluator)
    n_eval = n_pop

    pbest, pbest_fit = x.copy(), f.copy()
    i_best = int(np.argmin(pbest_fit))
    gbest, gbest_fit = pbest[i_best].copy(), float(pbest_fit[i_best])
    history = [gbest_fit]

    for _ in range(config.max_iterations):
        r1 = rng.random((n_pop, dim))
        r2 = rng.random((n_pop, dim))
        v = (
            config.inertia * v
            + config.cognitive * r1 * (pbest - x)
            + config.social * r2 * (gbest - x)
        )
        v = np.clip(v, -vmax, vmax)
        x = x + v

        outside = (x < low) | (x > high)
        x = np.clip(x, low, high)
        v[outside] = 0.0

        f = _evaluate(fitness, x, evaluator)
        n_eval += n_pop

        better = f < pbest_fit
        pbest[better] = x[better]
        pbest_fit[better] = f[better]

        i_best = int(np.argmin(pbest_fit))
        if pbest_fit[i_best] < gbest_fit:
            gbest_fit = float(pbest_fit[i_best])
            gbest = pbest[i_best].copy()
        history.append(gbest_fit)

    return CandidateSolution(gbest, gbest_fit, tuple(history), n_eval)


ALGORITHMS = {"BSA": bsa_minimize, "PSO": pso_minimize}


def minimize(fitness, config: OptimizerConfig, algorithm: str = "BSA", **kwargs) -> CandidateSolution:
    try:
        method = ALGORITHMS[algorithm.upper()]
    except KeyError:
        raise ValueError(f"unknown optimizer {algorithm!r}; expected one of {sorted(ALGORITHMS)}") from None
    return method(fitness, config, **kwargs)
