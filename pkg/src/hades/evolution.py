"""Generational loop: evaluate, weight, buffer, retrain, sample, mutate.

One generation turns population P_tau into P_tau+1 by (1) evaluating fitness
and conditions, (2) roulette-remapping fitness to training weights,
(3) merging the cohort into the dataset buffer, (4) (re)training the denoiser
on the buffer, (5) assembling crossover children plus Gaussian proto-genomes,
(6) denoising them into the next population, and (7) diffusion-mutating a
random fraction. Every random draw comes from a stream keyed on
(seed, phase, generation), so runs are reproducible regardless of evaluation
order or parallelism.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffusion as df
from . import nn
from .conditioning import ConditionScheme
from .errors import UsageError
from .metrics import PeakTracker, fitness_stats, grid_entropy

WEIGHT_MODES = ("w_N", "w_f")
RETRAIN_MODES = ("warm_start", "reinit")

# rng stream ids
_INIT, _EVAL, _TRAIN, _TARGET, _SEEDS, _SAMPLE, _MUTATE = range(7)


def _stream(seed, phase, generation=0):
    return np.random.default_rng(np.random.SeedSequence((seed, phase, generation)))


@dataclass(eq=False)
class Individual:
    """One evaluated genome: the buffer's unit of storage (identity semantics)."""

    genome: np.ndarray
    fitness: float
    weight: float
    condition: np.ndarray
    generation: int

    def __post_init__(self):
        if self.weight < 0:
            raise UsageError("individual weight must be >= 0")


class DatasetBuffer:
    """Rolling store of evaluated individuals — the epigenetic memory."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise UsageError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[Individual] = []

    def __len__(self):
        return len(self.entries)

    def as_arrays(self):
        """(genomes, weights, conditions, fitnesses, generations) matrices."""
        g = np.stack([e.genome for e in self.entries])
        w = np.array([e.weight for e in self.entries])
        c = np.stack([e.condition for e in self.entries])
        f = np.array([e.fitness for e in self.entries])
        gen = np.array([e.generation for e in self.entries])
        return g, w, c, f, gen


def buffer_update(buffer: DatasetBuffer, newcomers):
    """Insert newcomers, evicting only the lowest-fitness incumbents.

    Ties are broken by evicting the oldest generation first. Newcomers are
    always inserted, even if they are worse than every incumbent.
    """
    newcomers = list(newcomers)
    if len(newcomers) > buffer.capacity:
        raise UsageError("more newcomers than buffer capacity")
    overflow = len(buffer.entries) + len(newcomers) - buffer.capacity
    if overflow > 0:
        ranked = sorted(range(len(buffer.entries)),
                        key=lambda i: (buffer.entries[i].fitness,
                                       buffer.entries[i].generation, i))
        evict = set(ranked[:overflow])
        buffer.entries = [e for i, e in enumerate(buffer.entries) if i not in evict]
    buffer.entries.extend(newcomers)
    return buffer


def roulette_weights(fitnesses, s: float, weight_mode: str = "w_N",
                     literal_form: bool = False):
    """Rank-cumulative fitness remapping h[f_i] (roulette-wheel style).

    Relative fitness is F = exp(s * (f - f_min) / (f_max - f_min)); equal
    fitness degenerates to F = 1. h is the normalized cumulative sum of F in
    rank order, scaled by 1 (mode "w_N", weights sum to 1) or by sum|f|
    (mode "w_f"). `literal_form` switches to the singular source formula
    exp(s * (f - f_min) / (f - f_max)) for audit, with the top rank at its
    limit from below (F -> 0).
    """
    f = np.asarray(fitnesses, dtype=float)
    if f.size < 1:
        raise UsageError("need at least one fitness value")
    if weight_mode not in WEIGHT_MODES:
        raise UsageError(f"weight_mode must be one of {WEIGHT_MODES}")
    order = np.argsort(f, kind="stable")
    fs = f[order]
    fmin, fmax = fs[0], fs[-1]
    if fmax == fmin:
        rel = np.ones_like(fs)
    elif literal_form:
        with np.errstate(divide="ignore"):
            expo = s * (fs - fmin) / (fs - fmax)
        rel = np.exp(np.where(fs == fmax, -np.inf, expo))
    else:
        rel = np.exp(s * (fs - fmin) / (fmax - fmin))
    cums = np.cumsum(rel)
    h_sorted = cums / cums.sum()
    if weight_mode == "w_f":
        h_sorted = h_sorted * np.abs(f).sum()
    h = np.empty_like(h_sorted)
    h[order] = h_sorted
    return h


def select_parents(elites, s: float, rng: np.random.Generator):
    """Two parents drawn independently by roulette weight over the elites.

    Ranks of exactly tied fitnesses are randomized per draw, so equal-fitness
    elites are selected symmetrically. Duplicates are allowed.
    """
    elites = list(elites)
    if len(elites) < 2:
        raise UsageError("need at least 2 elites for crossover")
    fits = np.array([e.fitness for e in elites])

    def draw():
        perm = rng.permutation(len(elites))
        probs = roulette_weights(fits[perm], s, "w_N")
        return elites[perm[rng.choice(len(elites), p=probs)]]

    return draw(), draw()


def crossover_uniform(a, b, rng: np.random.Generator):
    """Child takes each coordinate from either parent with probability 1/2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise UsageError("parent genomes differ in length")
    return np.where(rng.random(a.shape) < 0.5, a, b)


def mutate_diffuse(genome, t_mu: int, schedule: df.NoiseSchedule,
                   rng: np.random.Generator):
    """One forward-diffusion application at step t_mu (identity at 0)."""
    x_t, _ = df.forward_diffuse(genome, t_mu, schedule, rng)
    return x_t


@dataclass(frozen=True)
class EvoConfig:
    """All evolutionary and denoiser knobs for one solver instance."""

    N_p: int = 256
    sigma_I: float = 1.0
    N_B_ratio: float = 1.0
    N_e_ratio: float = 0.15
    N_c_ratio: float = 0.0
    N_mu_ratio: float = 0.0
    t_mu_over_T: float = 0.0
    t_a: int = 0
    s: float = 10.0
    weight_mode: str = "w_N"
    retrain_mode: str = "warm_start"
    hidden_layers: int = 3
    hidden_units: int = 24
    activation: str = "leaky_relu"
    time_features: int = 1
    steps: int = 100
    sigma_rule: str = "paper_default"
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    weight_decay: float = 1e-5
    guidance_weight: float = 0.0
    cond_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.N_p < 2:
            raise UsageError("population size must be >= 2")
        for name in ("N_B_ratio", "N_e_ratio", "N_c_ratio", "N_mu_ratio",
                     "t_mu_over_T"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        for name in ("N_e_ratio", "N_c_ratio", "N_mu_ratio", "t_mu_over_T"):
            if getattr(self, name) > 1:
                raise UsageError(f"{name} must be <= 1")
        if self.n_crossover >= self.N_p:
            raise UsageError("crossover count must stay below the population size")
        if self.weight_mode not in WEIGHT_MODES:
            raise UsageError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.retrain_mode not in RETRAIN_MODES:
            raise UsageError(f"retrain_mode must be one of {RETRAIN_MODES}")
        if not 0 <= self.t_a <= self.steps:
            raise UsageError("t_a must lie in [0, steps]")

    @property
    def buffer_capacity(self):
        return max(self.N_p, int(round(self.N_B_ratio * self.N_p)))

    @property
    def n_elites(self):
        return max(2, math.ceil(self.N_e_ratio * self.N_p))

    @property
    def n_crossover(self):
        return int(round(self.N_c_ratio * self.N_p))

    @property
    def n_mutate(self):
        return int(round(self.N_mu_ratio * self.N_p))

    @property
    def t_mu(self):
        return int(round(self.t_mu_over_T * self.steps))

    def train_opts(self):
        return df.TrainOpts(lr=self.lr, epochs=self.epochs,
                            batch_size=self.batch_size,
                            weight_decay=self.weight_decay,
                            sample_by_weight=(self.weight_mode == "w_N"))

    def guidance(self):
        return df.GuidanceConfig(self.guidance_weight, self.cond_dropout_prob)

    def echo(self):
        return asdict(self)


@dataclass
class RunRecord:
    """Per-generation statistics emitted to the run CSV."""

    generation: int
    f_max: float
    f_mean: float
    f_std: float
    entropy_bits: float | None
    peaks_cum: int | None
    condition_target: np.ndarray | None
    condition_mean: np.ndarray | None


@dataclass
class EvoState:
    """Everything the loop carries between generations."""

    generation: int
    population: np.ndarray
    buffer: DatasetBuffer
    model: df.DenoiserNet | None
    schedule: df.NoiseSchedule
    last_target: np.ndarray | None = None


@dataclass
class RunHistory:
    """Full run output: records plus per-generation snapshots."""

    records: list = field(default_factory=list)
    populations: list = field(default_factory=list)
    fitnesses: list = field(default_factory=list)
    conditions: list = field(default_factory=list)
    final_model: df.DenoiserNet | None = None
    noise_schedule: df.NoiseSchedule | None = None


def init_state(cfg: EvoConfig, genome_dim: int, seed: int) -> EvoState:
    """Initial sigma_I-Gaussian population plus an empty buffer and model."""
    rng = _stream(seed, _INIT)
    population = cfg.sigma_I * rng.standard_normal((cfg.N_p, genome_dim))
    return EvoState(generation=0, population=population,
                    buffer=DatasetBuffer(cfg.buffer_capacity), model=None,
                    schedule=df.schedule_cosine(cfg.steps))


def _evaluate_and_buffer(state, cfg, task, scheme, seed):
    """Steps 1-3: evaluate, weight, cache; returns the cohort's entries."""
    tau = state.generation
    fits, extras = task.evaluate(state.population, tau, (seed, _EVAL, tau))
    fits = np.asarray(fits, dtype=float)
    conds = scheme.assign(state.population, fits, extras)
    weights = roulette_weights(fits, cfg.s, cfg.weight_mode)
    cohort = [Individual(state.population[i].copy(), float(fits[i]),
                         float(weights[i]), conds[i].copy(), tau)
              for i in range(cfg.N_p)]
    buffer_update(state.buffer, cohort)
    if scheme.needs_refresh:
        g, _, c, f, _ = state.buffer.as_arrays()
        scheme.refresh_columns(g, f, c)
        for entry, row in zip(state.buffer.entries, c):
            entry.condition = row
    return fits, extras, cohort


def _retrain(state, cfg, scheme, seed):
    """Step 4: (re)train the denoiser on the buffer."""
    tau = state.generation
    rng = _stream(seed, _TRAIN, tau)
    genome_dim = state.population.shape[1]
    if state.model is None or cfg.retrain_mode == "reinit":
        state.model = df.build_denoiser(genome_dim, scheme.cond_dim,
                                        cfg.hidden_layers, cfg.hidden_units,
                                        cfg.activation, rng,
                                        time_features=cfg.time_features)
    g, w, c, _, _ = state.buffer.as_arrays()
    state.model, losses = df.dm_train(state.model, g, w,
                                      c if scheme.cond_dim else None,
                                      state.schedule, cfg.guidance(),
                                      cfg.train_opts(), rng)
    return losses


def _next_population(state, cfg, scheme, cohort, target, seed):
    """Steps 5-7: seeds, denoise, mutate; returns the next population matrix."""
    tau = state.generation
    rng_seeds = _stream(seed, _SEEDS, tau)
    rng_sample = _stream(seed, _SAMPLE, tau)
    rng_mutate = _stream(seed, _MUTATE, tau)
    genome_dim = state.population.shape[1]
    guidance = cfg.guidance()

    chunks = []
    n_c = cfg.n_crossover
    if n_c > 0:
        by_fit = sorted(cohort, key=lambda e: e.fitness, reverse=True)
        elites = by_fit[:cfg.n_elites]
        children = np.empty((n_c, genome_dim))
        for i in range(n_c):
            pa, pb = select_parents(elites, cfg.s, rng_seeds)
            children[i] = crossover_uniform(pa.genome, pb.genome, rng_seeds)
        if cfg.t_a > 0:
            children = mutate_diffuse(children, cfg.t_mu, state.schedule, rng_seeds)
            children = df.partial_denoise(state.model, state.schedule, children,
                                          max(cfg.t_a, cfg.t_mu), rng_sample,
                                          condition=target, guidance=guidance,
                                          sigma_rule=cfg.sigma_rule)
        chunks.append(children)

    n_dm = cfg.N_p - n_c
    if n_dm > 0:
        proto = cfg.sigma_I * rng_seeds.standard_normal((n_dm, genome_dim))
        sampler = df.SamplerConfig(cfg.sigma_rule, cfg.steps, cfg.sigma_I)
        fresh = df.ddim_sample(state.model, state.schedule, sampler, n_dm,
                               rng_sample, condition=target, init=proto,
                               guidance=guidance)
        chunks.append(fresh)

    nxt = np.vstack(chunks)
    if cfg.n_mutate > 0 and cfg.t_mu > 0:
        idx = rng_mutate.choice(cfg.N_p, size=cfg.n_mutate, replace=False)
        nxt[idx] = mutate_diffuse(nxt[idx], cfg.t_mu, state.schedule, rng_mutate)
    return nxt


def _cohort_conditions(cohort, scheme):
    if scheme.cond_dim:
        return np.stack([e.condition for e in cohort])
    return np.zeros((len(cohort), 0))


def _make_record(state, fits, conds):
    stats = fitness_stats(fits, state.population)
    entropy = None
    if state.population.shape[1] == 2:
        entropy = grid_entropy(state.population)
    cond_mean = conds.mean(axis=0) if conds.size else None
    return RunRecord(state.generation, stats.f_max, stats.f_mean, stats.f_std,
                     entropy, None, state.last_target, cond_mean)


def hades_generation(state: EvoState, cfg: EvoConfig, task,
                     scheme: ConditionScheme, seed: int,
                     reproduce: bool = True):
    """Advance one generation; returns (new state, record, fits, conds).

    With reproduce=False only the evaluate/weight/buffer steps run (used for
    the final generation, which is recorded but produces no offspring).
    """
    tau = state.generation
    fits, extras, cohort = _evaluate_and_buffer(state, cfg, task, scheme, seed)
    conds = _cohort_conditions(cohort, scheme)
    record = _make_record(state, fits, conds)
    if not reproduce:
        return state, record, fits, conds
    _retrain(state, cfg, scheme, seed)
    target = scheme.target(fits, conds, tau + 1, _stream(seed, _TARGET, tau))
    nxt = _next_population(state, cfg, scheme, cohort, target, seed)
    new_state = EvoState(tau + 1, nxt, state.buffer, state.model, state.schedule,
                         last_target=target)
    return new_state, record, fits, conds


def run_evolution(cfg: EvoConfig, task, scheme: ConditionScheme, n_generations: int,
                  seed: int, solve_threshold: float | None = None,
                  stop_on_solve: bool = False) -> RunHistory:
    """Run the full loop; emits one record per generation 0..n_generations.

    Generation 0 is the initial Gaussian population. Identical (cfg, seed)
    produce identical histories.
    """
    state = init_state(cfg, task.dim, seed)
    history = RunHistory(noise_schedule=state.schedule)
    centers = task.peak_centers() if hasattr(task, "peak_centers") else None
    tracker = PeakTracker(centers) if centers is not None else None

    for tau in range(n_generations + 1):
        fits, extras, cohort = _evaluate_and_buffer(state, cfg, task, scheme, seed)
        conds = _cohort_conditions(cohort, scheme)
        record = _make_record(state, fits, conds)
        if tracker is not None:
            record.peaks_cum = tracker.update(state.population)
        history.records.append(record)
        history.populations.append(state.population.copy())
        history.fitnesses.append(fits)
        history.conditions.append(conds)
        solved = solve_threshold is not None and record.f_max >= solve_threshold
        if tau == n_generations or (stop_on_solve and solved):
            break
        _retrain(state, cfg, scheme, seed)
        target = scheme.target(fits, conds, tau + 1, _stream(seed, _TARGET, tau))
        nxt = _next_population(state, cfg, scheme, cohort, target, seed)
        state = EvoState(tau + 1, nxt, state.buffer, state.model, state.schedule,
                         last_target=target)

    history.final_model = state.model
    return history
