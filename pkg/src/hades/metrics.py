"""Diversity and success metrics: grid entropy, peaks found, fitness stats,
and the offline trait-predictor regression."""

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import UsageError

GRID_CELLS = 101
GRID_RANGE = (-6.0, 6.0)


def grid_entropy(points, cells: int = GRID_CELLS, lo: float = GRID_RANGE[0],
                 hi: float = GRID_RANGE[1]):
    """Shannon entropy (bits) of 2D point counts over a cells x cells grid.

    Out-of-range points are clamped to the edge cells, so the result is
    bounded by log2(cells^2) and is 0 iff all points share a cell.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[0] < 1 or p.shape[1] != 2:
        raise UsageError("grid_entropy needs at least one 2D point")
    ix = np.clip(((p[:, 0] - lo) / (hi - lo) * cells).astype(int), 0, cells - 1)
    iy = np.clip(((p[:, 1] - lo) / (hi - lo) * cells).astype(int), 0, cells - 1)
    counts = np.bincount(ix * cells + iy, minlength=cells * cells)
    probs = counts[counts > 0] / p.shape[0]
    return float(-(probs * np.log2(probs)).sum())


class PeakTracker:
    """Cumulative found-peak counter over a stream of populations.

    A peak counts as found once any single generation holds at least
    `min_count` distinct genomes within `radius` of its center; the count
    never decreases afterwards.
    """

    def __init__(self, centers, radius: float = 0.25, min_count: int = 10):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radius = radius
        self.min_count = min_count
        self.found = np.zeros(len(self.centers), dtype=bool)

    def update(self, population):
        pop = np.unique(np.atleast_2d(np.asarray(population, dtype=float)), axis=0)
        for i, center in enumerate(self.centers):
            if self.found[i]:
                continue
            near = np.linalg.norm(pop - center, axis=1) <= self.radius
            if near.sum() >= self.min_count:
                self.found[i] = True
        return int(self.found.sum())


def peaks_found(populations, centers, radius: float = 0.25, min_count: int = 10):
    """Cumulative peaks-found count per generation for a whole run."""
    tracker = PeakTracker(centers, radius, min_count)
    return np.array([tracker.update(pop) for pop in populations])


@dataclass(frozen=True)
class FitnessStats:
    f_max: float
    f_mean: float
    f_std: float
    argmax_genome: np.ndarray


def fitness_stats(fitnesses, genomes) -> FitnessStats:
    """Exact max/mean/std (population convention); argmax ties -> lowest index."""
    f = np.asarray(fitnesses, dtype=float)
    if f.size < 1:
        raise UsageError("empty population")
    g = np.atleast_2d(np.asarray(genomes, dtype=float))
    best = int(np.argmax(f))
    return FitnessStats(float(f.max()), float(f.mean()), float(f.std()),
                        g[best].copy())


def train_trait_predictor(genomes, traits, weights, fitnesses=None,
                          hidden_layers: int = 4, hidden_units: int = 48,
                          activation: str = "leaky_relu", lr: float = 1e-3,
                          epochs: int = 200, batch_size: int = 256,
                          val_fraction: float = 0.2, seed: int = 0):
    """Weighted regression from genomes to a phenotypic trait.

    Trains a dense net minimizing the fitness-weighted squared error and
    returns (net params, report). The report carries the validation MSE and,
    when raw fitnesses are supplied, the error stratified by fitness bands.
    """
    x = np.atleast_2d(np.asarray(genomes, dtype=float))
    y = np.asarray(traits, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    w = np.asarray(weights, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise UsageError("empty trait dataset")
    if y.shape[0] != n or w.shape != (n,):
        raise UsageError("dataset row counts disagree")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 97)))
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order

    spec = nn.NetSpec(x.shape[1], hidden_layers, hidden_units, y.shape[1],
                      activation)
    params = nn.net_init(spec, rng)
    opt = nn.AdamState.fresh(spec.param_count(), lr=lr, weight_decay=1e-5)
    data = nn.WeightedBatch(x[train_idx], y[train_idx], w[train_idx])
    params, _, losses = nn.train(params, opt, data, epochs, batch_size, rng)

    def mse(idx):
        if idx.size == 0:
            return float("nan")
        pred, _ = nn.forward_batch(params, x[idx])
        return float(np.mean(np.sum((pred - y[idx]) ** 2, axis=1)))

    report = {
        "n_train": int(train_idx.size),
        "n_val": int(val_idx.size),
        "train_loss": losses[-1] if losses else float("nan"),
        "val_mse": mse(val_idx) if n_val else float("nan"),
    }
    if fitnesses is not None:
        f = np.asarray(fitnesses, dtype=float)
        edges = np.quantile(f, [0.0, 0.5, 0.9, 1.0])
        strata = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            idx = np.flatnonzero((f >= lo) & (f <= hi))
            strata.append({"f_lo": float(lo), "f_hi": float(hi),
                           "n": int(idx.size), "mse": mse(idx)})
        report["fitness_strata"] = strata
        top = np.flatnonzero(f >= edges[2])
        report["high_fitness_mse"] = mse(top)
        report["all_mse"] = mse(np.arange(n))
    return params, report
