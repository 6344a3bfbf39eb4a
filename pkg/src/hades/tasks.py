"""Fitness landscapes: static/dynamic double-peak and (twisted) Rastrigin.

Tasks expose `dim`, `evaluate(genomes, generation, seed_key) -> (fitnesses,
extras)`, and optionally `peak_centers()` for the peaks-found metric. All
landscape evaluations are pure and ignore the seed key.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

PEAK_PLUS = np.array([1.0, 1.0])
PEAK_MINUS = np.array([-1.0, -1.0])


@dataclass(frozen=True)
class DoublePeakParams:
    """Two Gaussian peaks at (+-1, +-1) with oscillating amplitudes."""

    sigma: float = 0.1
    omega: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise UsageError("peak std must be > 0")


def double_peak_fitness(genome, generation: int, p: DoublePeakParams):
    """cos(w*tau) * exp(-|g-mu_minus|^2 / 2s^2) + cos(w*tau+phi) * (mu_plus term)."""
    g = np.asarray(genome, dtype=float)
    if g.shape != (2,):
        raise UsageError("double peak is a 2D landscape")
    return float(_double_peak_batch(g[None, :], generation, p)[0])


def _double_peak_batch(genomes, generation, p):
    d_minus = np.sum((genomes - PEAK_MINUS) ** 2, axis=1)
    d_plus = np.sum((genomes - PEAK_PLUS) ** 2, axis=1)
    two_s2 = 2.0 * p.sigma ** 2
    return (np.cos(p.omega * generation) * np.exp(-d_minus / two_s2)
            + np.cos(p.omega * generation + p.phi) * np.exp(-d_plus / two_s2))


class DoublePeakTask:
    dim = 2

    def __init__(self, params: DoublePeakParams = DoublePeakParams()):
        self.params = params

    def evaluate(self, genomes, generation, seed_key=None):
        g = np.atleast_2d(np.asarray(genomes, dtype=float))
        return _double_peak_batch(g, generation, self.params), {}

    def peak_centers(self):
        return np.stack([PEAK_PLUS, PEAK_MINUS])


@dataclass(frozen=True)
class RastriginParams:
    """Inverted, truncated Rastrigin: maxima ~64.625 near |x_i| = 3.5."""

    amplitude: float = 10.0
    bound: float = 4.0
    twist: float = 0.0  # spiral transform strength; 0 disables

    def __post_init__(self):
        if self.bound <= 0:
            raise UsageError("bound must be > 0")


def _spiral_transform(genomes, twist):
    r = np.linalg.norm(genomes, axis=1)
    theta = np.arctan2(genomes[:, 1], genomes[:, 0])
    ang = theta + twist * r
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def _rastrigin_batch(genomes, p):
    x = _spiral_transform(genomes, p.twist) if p.twist != 0.0 else genomes
    a = p.amplitude
    vals = 2.0 * a + np.sum(x * x - a * np.cos(2.0 * np.pi * x), axis=1)
    vals[np.any(np.abs(x) > p.bound, axis=1)] = 0.0
    return vals


def rastrigin_fitness(genome, p: RastriginParams = RastriginParams()):
    """Truncated Rastrigin value (to maximize); 0 outside the bound box."""
    g = np.asarray(genome, dtype=float)
    if g.shape != (2,):
        raise UsageError("the Rastrigin landscape here is 2D")
    return float(_rastrigin_batch(g[None, :], p)[0])


# local maxima of x^2 - 10 cos(2 pi x) sit just past 3.5; solved numerically
RASTRIGIN_PEAK_COORD = 3.517859127953249


class RastriginTask:
    dim = 2

    def __init__(self, params: RastriginParams = RastriginParams()):
        self.params = params

    def evaluate(self, genomes, generation, seed_key=None):
        g = np.atleast_2d(np.asarray(genomes, dtype=float))
        return _rastrigin_batch(g, self.params), {}

    def max_fitness(self):
        c = RASTRIGIN_PEAK_COORD
        return rastrigin_fitness(np.array([c, c]),
                                 RastriginParams(self.params.amplitude,
                                                 self.params.bound, 0.0))

    def peak_centers(self):
        """The four maxima, pulled back through the spiral when twisted."""
        c = RASTRIGIN_PEAK_COORD
        base = np.array([[c, c], [-c, c], [-c, -c], [c, -c]])
        if self.params.twist == 0.0:
            return base
        r = np.linalg.norm(base, axis=1)
        theta = np.arctan2(base[:, 1], base[:, 0]) - self.params.twist * r
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])
