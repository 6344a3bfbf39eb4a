"""Reference solvers on the same task interface: a simple GA and CMA-ES.

Both emit the same per-generation records as the diffusion-driven loop so
runs are directly comparable (same metrics, same seed conventions). Fitness
is always maximized.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .evolution import RunHistory, RunRecord, _EVAL, _INIT, _SEEDS, _stream
from .metrics import PeakTracker, fitness_stats, grid_entropy


@dataclass(frozen=True)
class SimpleGaConfig:
    """Truncation selection, uniform elite crossover, Gaussian mutation."""

    N_p: int = 256
    sigma_I: float = 1.0
    elite_frac: float = 0.1
    sigma_m: float = 0.1
    elitism: bool = True

    def __post_init__(self):
        if not 0.0 < self.elite_frac <= 1.0:
            raise UsageError("elite_frac must lie in (0, 1]")
        if self.N_p < 2:
            raise UsageError("population size must be >= 2")

    @property
    def n_elites(self):
        return max(1, int(round(self.elite_frac * self.N_p)))


def simplega_step(genomes, fitnesses, cfg: SimpleGaConfig, rng: np.random.Generator):
    """Next generation: best kept verbatim, rest bred from random elite pairs."""
    g = np.atleast_2d(np.asarray(genomes, dtype=float))
    f = np.asarray(fitnesses, dtype=float)
    if g.shape[0] != f.size:
        raise UsageError("genomes and fitnesses disagree in length")
    order = np.argsort(-f, kind="stable")  # descending, ties keep input order
    elites = g[order[:cfg.n_elites]]
    nxt = np.empty_like(g)
    start = 0
    if cfg.elitism:
        nxt[0] = g[order[0]]
        start = 1
    for i in range(start, g.shape[0]):
        pa, pb = elites[rng.integers(0, len(elites), size=2)]
        child = np.where(rng.random(g.shape[1]) < 0.5, pa, pb)
        nxt[i] = child + rng.normal(0.0, cfg.sigma_m, g.shape[1])
    return nxt


@dataclass(frozen=True)
class CmaConfig:
    """(mu/mu_w, lambda) strategy with the canonical constants for dim D."""

    N_p: int = 256
    sigma_I: float = 1.0


class CmaState:
    """Mean, step size, covariance, and evolution paths of one CMA-ES run."""

    EIG_FLOOR = 1e-12

    def __init__(self, dim: int, lam: int, sigma0: float, mean0=None):
        if lam < 4:
            raise UsageError("CMA-ES needs a population of at least 4")
        self.dim = dim
        self.lam = lam
        mu = lam // 2
        raw = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
        self.weights = raw / raw.sum()
        self.mu = mu
        self.mu_eff = 1.0 / np.sum(self.weights ** 2)
        n, mu_eff = dim, self.mu_eff
        self.c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
        self.d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (n + 1.0))
                                       - 1.0) + self.c_sigma
        self.c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
        self.c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
        self.c_mu = min(1.0 - self.c_1,
                        2.0 * (mu_eff - 2.0 + 1.0 / mu_eff)
                        / ((n + 2.0) ** 2 + mu_eff))
        self.chi_n = np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

        self.mean = np.zeros(dim) if mean0 is None else np.asarray(mean0, float)
        self.sigma = float(sigma0)
        self.cov = np.eye(dim)
        self.p_sigma = np.zeros(dim)
        self.p_c = np.zeros(dim)
        self.generation = 0
        self._decompose()
        self._pending = None

    def _decompose(self):
        cov = (self.cov + self.cov.T) / 2.0
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, self.EIG_FLOOR)
        self.cov = (vecs * vals) @ vecs.T
        self._eigvecs = vecs
        self._eig_sqrt = np.sqrt(vals)

    def cov_eigenvalues(self):
        return self._eig_sqrt ** 2


def cmaes_ask(state: CmaState, lam: int, rng: np.random.Generator):
    """Sample lam candidates m + sigma * C^(1/2) z."""
    if lam != state.lam:
        raise UsageError("ask size must match the configured population")
    z = rng.standard_normal((lam, state.dim))
    y = z @ (state._eigvecs * state._eig_sqrt).T
    x = state.mean + state.sigma * y
    state._pending = x
    return x


def cmaes_tell(state: CmaState, candidates, fitnesses):
    """Rank-mu update from the last ask's candidates (maximization)."""
    x = np.atleast_2d(np.asarray(candidates, dtype=float))
    if state._pending is None or x.shape != state._pending.shape \
            or not np.array_equal(x, state._pending):
        raise UsageError("tell must receive exactly the last ask's candidates")
    state._pending = None
    f = np.asarray(fitnesses, dtype=float)
    order = np.argsort(-f, kind="stable")  # descending, ties keep ask order
    top = x[order[:state.mu]]

    old_mean = state.mean
    state.mean = state.weights @ top
    y_w = (state.mean - old_mean) / state.sigma

    inv_sqrt = (state._eigvecs / state._eig_sqrt) @ state._eigvecs.T
    state.p_sigma = ((1.0 - state.c_sigma) * state.p_sigma
                     + np.sqrt(state.c_sigma * (2.0 - state.c_sigma)
                               * state.mu_eff) * (inv_sqrt @ y_w))
    state.generation += 1
    expected = np.sqrt(1.0 - (1.0 - state.c_sigma) ** (2 * state.generation))
    h_sigma = float(np.linalg.norm(state.p_sigma) / expected
                    < (1.4 + 2.0 / (state.dim + 1.0)) * state.chi_n)
    state.p_c = ((1.0 - state.c_c) * state.p_c
                 + h_sigma * np.sqrt(state.c_c * (2.0 - state.c_c)
                                     * state.mu_eff) * y_w)

    ys = (top - old_mean) / state.sigma
    rank_mu = (ys.T * state.weights) @ ys
    delta_h = (1.0 - h_sigma) * state.c_c * (2.0 - state.c_c)
    state.cov = ((1.0 - state.c_1 - state.c_mu) * state.cov
                 + state.c_1 * (np.outer(state.p_c, state.p_c)
                                + delta_h * state.cov)
                 + state.c_mu * rank_mu)
    state.sigma *= np.exp((state.c_sigma / state.d_sigma)
                          * (np.linalg.norm(state.p_sigma) / state.chi_n - 1.0))
    state._decompose()
    return state


def _record(generation, population, fits, tracker):
    stats = fitness_stats(fits, population)
    entropy = grid_entropy(population) if population.shape[1] == 2 else None
    peaks = tracker.update(population) if tracker is not None else None
    return RunRecord(generation, stats.f_max, stats.f_mean, stats.f_std,
                     entropy, peaks, None, None)


def _run_loop(task, n_generations, seed, init_pop, step_fn, solve_threshold,
              stop_on_solve):
    history = RunHistory()
    centers = task.peak_centers() if hasattr(task, "peak_centers") else None
    tracker = PeakTracker(centers) if centers is not None else None
    population = init_pop
    for tau in range(n_generations + 1):
        fits, _ = task.evaluate(population, tau, (seed, _EVAL, tau))
        fits = np.asarray(fits, dtype=float)
        record = _record(tau, population, fits, tracker)
        history.records.append(record)
        history.populations.append(population.copy())
        history.fitnesses.append(fits)
        history.conditions.append(np.zeros((len(fits), 0)))
        solved = solve_threshold is not None and record.f_max >= solve_threshold
        if tau == n_generations or (stop_on_solve and solved):
            break
        population = step_fn(tau, population, fits)
    return history


def run_simplega(cfg: SimpleGaConfig, task, n_generations: int, seed: int,
                 solve_threshold=None, stop_on_solve=False) -> RunHistory:
    init = cfg.sigma_I * _stream(seed, _INIT).standard_normal((cfg.N_p, task.dim))

    def step(tau, population, fits):
        return simplega_step(population, fits, cfg, _stream(seed, _SEEDS, tau))

    return _run_loop(task, n_generations, seed, init, step, solve_threshold,
                     stop_on_solve)


def run_cmaes(cfg: CmaConfig, task, n_generations: int, seed: int,
              solve_threshold=None, stop_on_solve=False) -> RunHistory:
    state = CmaState(task.dim, cfg.N_p, cfg.sigma_I)
    first = cmaes_ask(state, cfg.N_p, _stream(seed, _INIT))

    def step(tau, population, fits):
        cmaes_tell(state, population, fits)
        return cmaes_ask(state, cfg.N_p, _stream(seed, _SEEDS, tau))

    return _run_loop(task, n_generations, seed, first, step, solve_threshold,
                     stop_on_solve)
