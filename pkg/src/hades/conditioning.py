"""Classifier functions c(g) and target-condition samplers.

A condition scheme does three jobs: tag each evaluated individual with a
numeric condition vector, optionally recompute population-dynamic conditions
over the whole dataset buffer (novelty), and draw the target condition that
steers the next sampling phase.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import UsageError

DEFAULT_KNN_K = 128
DEFAULT_BOLTZMANN_BETA = 10.0
DEFAULT_DIST_PAD = 1e-8


def quadrant_classify(genome):
    """Quadrant label of a 2D genome: Q1 -> 1, Q3 -> -1, else (incl. axes) 0."""
    g = np.asarray(genome, dtype=float)
    if g.shape != (2,):
        raise UsageError("quadrant_classify needs a 2D genome")
    x, y = g
    if x > 0 and y > 0:
        return 1.0
    if x < 0 and y < 0:
        return -1.0
    return 0.0


def _fitness_std(fitnesses):
    f = np.asarray(fitnesses, dtype=float)
    return float(f.std())  # population convention (divide by N)


def fisher_target(fitnesses, rng: np.random.Generator):
    """Target fitness mu_f + |N(0, sigma_f)| (never below the population mean)."""
    f = np.asarray(fitnesses, dtype=float)
    if f.size < 2:
        raise UsageError("need at least 2 fitness values")
    return float(f.mean() + abs(rng.normal(0.0, _fitness_std(f))))


def greedy_target(fitnesses, rng: np.random.Generator):
    """Target fitness N(f_max, sigma_f) centered on the population best."""
    f = np.asarray(fitnesses, dtype=float)
    if f.size < 2:
        raise UsageError("need at least 2 fitness values")
    return float(rng.normal(f.max(), _fitness_std(f)))


def knn_diversity(genomes, k: int, dist_floor: float = DEFAULT_DIST_PAD):
    """Log mean distance to the neighbors beyond the k nearest, per point.

    For each point the k smallest of its N-1 neighbor distances are dropped
    and the rest averaged; the mean is floored at dist_floor before the log
    (duplicates would otherwise produce log 0).
    """
    g = np.atleast_2d(np.asarray(genomes, dtype=float))
    n = g.shape[0]
    if not 1 <= k < n:
        raise UsageError(f"need N > k >= 1, got N={n}, k={k}")
    d = cdist(g, g)
    d_sorted = np.sort(d, axis=1)  # column 0 is the self-distance 0
    far = d_sorted[:, k + 1:]  # drop self and the k nearest neighbors
    mean_far = far.mean(axis=1) if far.shape[1] else np.zeros(n)
    return np.log(np.maximum(mean_far, dist_floor))


def novelty_probs(fitnesses, deltas, beta: float, pad: float):
    """Boltzmann selection probabilities over the population's deltas.

    Energy of point i is f_tilde_i / (delta_i + delta_0) where f_tilde rescales
    fitness to [0, 1] with 0 at the maximum, and delta_0 = |min(delta) + pad|
    shifts the deltas positive; denominators are clamped at pad from below.
    """
    f = np.asarray(fitnesses, dtype=float)
    d = np.asarray(deltas, dtype=float)
    if f.shape != d.shape or f.size < 1:
        raise UsageError("fitnesses and deltas must be same-length, non-empty")
    fmin, fmax = f.min(), f.max()
    if fmax > fmin:
        f_tilde = 1.0 - (f - fmin) / (fmax - fmin)
    else:
        f_tilde = np.zeros_like(f)
    delta_0 = abs(d.min() + pad)
    denom = np.maximum(d + delta_0, pad)
    logits = -beta * f_tilde / denom
    p = np.exp(logits - logits.max())
    return p / p.sum()


def novelty_target(fitnesses, deltas, beta: float, pad: float,
                   rng: np.random.Generator):
    """Draw a target diversity value from the Boltzmann distribution."""
    d = np.asarray(deltas, dtype=float)
    p = novelty_probs(fitnesses, d, beta, pad)
    return float(d[rng.choice(d.size, p=p)])


def phenotype_condition(summaries):
    """Pack (resting position, resting velocity, fitness), episode-averaged."""
    xs = np.array([s.x_resting for s in summaries], dtype=float)
    vs = np.array([s.xdot_resting for s in summaries], dtype=float)
    fs = np.array([s.steps for s in summaries], dtype=float)
    return np.array([xs.mean(), vs.mean(), fs.mean()])


@dataclass(frozen=True)
class ConditionSchedule:
    """Piecewise-constant target schedule over generation ranges (inclusive)."""

    segments: tuple  # of (first_gen, last_gen, target vector)

    def __post_init__(self):
        segs = tuple((int(lo), int(hi), np.atleast_1d(np.asarray(v, dtype=float)))
                     for lo, hi, v in self.segments)
        object.__setattr__(self, "segments", segs)
        spans = sorted((lo, hi) for lo, hi, _ in segs)
        for (lo, hi), (lo2, _) in zip(spans, spans[1:]):
            if lo2 <= hi:
                raise UsageError("schedule segments overlap")

    def covers(self, first, last):
        covered = set()
        for lo, hi, _ in self.segments:
            covered.update(range(lo, hi + 1))
        return set(range(first, last + 1)) <= covered


def schedule_target(schedule: ConditionSchedule, generation: int):
    """Target vector of the segment containing `generation`."""
    for lo, hi, v in schedule.segments:
        if lo <= generation <= hi:
            return v
    raise UsageError(f"generation {generation} not covered by the schedule")


class ConditionScheme:
    """Base: no conditioning (plain fitness-driven evolution)."""

    kind = "none"
    cond_dim = 0
    needs_refresh = False

    def assign(self, genomes, fitnesses, extras):
        """Condition vectors [N, cond_dim] for freshly evaluated individuals."""
        return np.zeros((np.atleast_2d(genomes).shape[0], 0))

    def refresh_columns(self, genomes, fitnesses, cond_block):
        """Recompute population-dynamic conditions in place (novelty only)."""

    def target(self, fitnesses, conditions, generation, rng):
        """Target condition vector for sampling generation `generation`."""
        return None


class QuadrantScheme(ConditionScheme):
    """Quadrant label of a 2D genome; targets follow a schedule or are fixed."""

    kind = "quadrant"
    cond_dim = 1

    def __init__(self, target=None, schedule: ConditionSchedule | None = None):
        if (target is None) == (schedule is None):
            raise UsageError("QuadrantScheme needs a fixed target or a schedule")
        self.fixed_target = None if target is None else float(target)
        self.schedule = schedule

    def assign(self, genomes, fitnesses, extras):
        g = np.atleast_2d(genomes)
        return np.array([[quadrant_classify(row)] for row in g])

    def target(self, fitnesses, conditions, generation, rng):
        if self.schedule is not None:
            return schedule_target(self.schedule, generation)
        return np.array([self.fixed_target])


class FitnessScheme(ConditionScheme):
    """Condition on raw fitness; target drawn Fisher- or greedy-style."""

    cond_dim = 1

    def __init__(self, flavor):
        if flavor not in ("fisher", "greedy"):
            raise UsageError("fitness conditioning flavor must be fisher or greedy")
        self.flavor = flavor
        self.kind = f"fitness_{flavor}"

    def assign(self, genomes, fitnesses, extras):
        return np.asarray(fitnesses, dtype=float)[:, None]

    def target(self, fitnesses, conditions, generation, rng):
        draw = fisher_target if self.flavor == "fisher" else greedy_target
        return np.array([draw(fitnesses, rng)])


class NoveltyScheme(ConditionScheme):
    """Condition on k-NN diversity over the buffer; Boltzmann-sampled targets."""

    kind = "novelty"
    cond_dim = 1
    needs_refresh = True

    def __init__(self, k=DEFAULT_KNN_K, beta=DEFAULT_BOLTZMANN_BETA,
                 pad=DEFAULT_DIST_PAD):
        self.k = int(k)
        self.beta = float(beta)
        self.pad = float(pad)

    def assign(self, genomes, fitnesses, extras):
        # placeholder; refreshed against the whole buffer each generation
        return np.zeros((np.atleast_2d(genomes).shape[0], 1))

    def refresh_columns(self, genomes, fitnesses, cond_block):
        k = min(self.k, len(genomes) - 1)
        if k < 1:
            cond_block[:, 0] = np.log(self.pad)
            return
        cond_block[:, 0] = knn_diversity(genomes, k, self.pad)

    def target(self, fitnesses, conditions, generation, rng):
        deltas = np.asarray(conditions, dtype=float)[:, 0]
        return np.array([novelty_target(fitnesses, deltas, self.beta, self.pad, rng)])


class PhenotypeCartpoleScheme(ConditionScheme):
    """Condition on (resting position, resting velocity, fitness) of an agent."""

    kind = "phenotype_cartpole"
    cond_dim = 3

    def __init__(self, target_position, target_velocity=0.0, target_fitness=500.0):
        self.target_triple = np.array([float(target_position),
                                       float(target_velocity),
                                       float(target_fitness)])

    def assign(self, genomes, fitnesses, extras):
        triple = extras.get("condition_triple") if extras else None
        if triple is None:
            raise UsageError("task does not report phenotype condition triples")
        return np.asarray(triple, dtype=float)

    def target(self, fitnesses, conditions, generation, rng):
        return self.target_triple.copy()


class CompositeScheme(ConditionScheme):
    """Concatenation of sub-scheme conditions in declaration order."""

    kind = "composite"

    def __init__(self, parts):
        if not parts:
            raise UsageError("composite scheme needs at least one part")
        self.parts = list(parts)
        self.cond_dim = sum(p.cond_dim for p in self.parts)
        self.needs_refresh = any(p.needs_refresh for p in self.parts)

    def _slices(self):
        off = 0
        for p in self.parts:
            yield p, slice(off, off + p.cond_dim)
            off += p.cond_dim

    def assign(self, genomes, fitnesses, extras):
        return np.concatenate([p.assign(genomes, fitnesses, extras)
                               for p in self.parts], axis=1)

    def refresh_columns(self, genomes, fitnesses, cond_block):
        for p, sl in self._slices():
            if p.needs_refresh:
                p.refresh_columns(genomes, fitnesses, cond_block[:, sl])

    def target(self, fitnesses, conditions, generation, rng):
        chunks = []
        for p, sl in self._slices():
            t = p.target(fitnesses, np.asarray(conditions)[:, sl], generation, rng)
            chunks.append(t if t is not None else np.zeros(p.cond_dim))
        return np.concatenate(chunks)
