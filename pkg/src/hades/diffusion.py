"""Noise schedule, forward diffusion, denoiser training, and DDIM sampling.

The denoiser is a small dense net predicting the injected noise from
(noisy genome, time feature(s), condition values, condition presence mask).
Conditions are z-scored over the training data; the standardization is part
of the model. Dropping the condition (classifier-free training) replaces it
with the null token: zero values with a zero mask.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import DegenerateBatchError, UsageError

ALPHA_ZERO = 1e-12  # below this, a step carries no recoverable signal


@dataclass(frozen=True)
class NoiseSchedule:
    """Blend coefficients alpha_bar[0..T]: 1 at step 0, 0 at step T, decreasing."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.steps + 1,):
            raise UsageError("alpha_bar must have length steps+1")
        if abs(ab[0] - 1.0) > 1e-12 or abs(ab[-1]) > 1e-12:
            raise UsageError("alpha_bar endpoints must be 1 and 0")
        if np.any(np.diff(ab) >= 0):
            raise UsageError("alpha_bar must be strictly decreasing")


def schedule_cosine(steps: int) -> NoiseSchedule:
    """Cosine-squared blend schedule with exact 1/0 endpoints."""
    if steps < 2:
        raise UsageError("schedule needs at least 2 steps")
    t = np.arange(steps + 1) / steps
    ab = np.cos(t * np.pi / 2.0) ** 2
    ab[0] = 1.0
    ab[-1] = 0.0
    return NoiseSchedule(steps, ab)


def forward_diffuse(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator):
    """Blend a clean point with fresh Gaussian noise at step t.

    Returns (x_t, injected noise). x0 may be a vector or a [batch, D] matrix;
    noise is drawn i.i.d. per entry.
    """
    if not 0 <= t <= schedule.steps:
        raise UsageError(f"step {t} outside [0, {schedule.steps}]")
    x0 = np.asarray(x0, dtype=float)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def diffuse_with_noise(x0, t_arr, schedule: NoiseSchedule, eps):
    """Row-wise blend with given per-row steps and noise (training helper)."""
    ab = schedule.alpha_bar[np.asarray(t_arr)]
    return np.sqrt(ab)[:, None] * x0 + np.sqrt(1.0 - ab)[:, None] * eps


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance knobs."""

    guidance_weight: float = 0.0
    cond_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.guidance_weight < 0:
            raise UsageError("guidance_weight must be >= 0")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise UsageError("cond_dropout_prob must lie in [0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    """DDIM sampling options; start_step < steps resumes from partial noise."""

    sigma_rule: str = "paper_default"
    start_step: int | None = None  # None -> full chain from step T
    sigma_init: float = 1.0

    def __post_init__(self):
        if self.sigma_rule not in ("paper_default", "deterministic"):
            raise UsageError("sigma_rule must be paper_default or deterministic")


@dataclass
class DenoiserNet:
    """Noise-prediction net with its time/condition input layout."""

    net: nn.NetParams
    time_features: int = 1
    cond_dim: int = 0
    cond_mean: np.ndarray = field(default=None)
    cond_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cond_mean is None:
            self.cond_mean = np.zeros(self.cond_dim)
        if self.cond_std is None:
            self.cond_std = np.ones(self.cond_dim)
        self.cond_mean = np.asarray(self.cond_mean, dtype=float)
        self.cond_std = np.asarray(self.cond_std, dtype=float)
        expected = self.genome_dim + self.time_features + 2 * self.cond_dim
        if self.net.spec.input_dim != expected:
            raise UsageError(
                f"denoiser input_dim {self.net.spec.input_dim} != "
                f"D + time + 2*cond = {expected}")

    @property
    def genome_dim(self):
        return self.net.spec.output_dim

    def standardize(self, cond):
        return (cond - self.cond_mean) / self.cond_std


def build_denoiser(genome_dim, cond_dim, hidden_layers, hidden_units, activation,
                   rng, time_features=1):
    """Random-initialized denoiser for the given genome/condition layout."""
    spec = nn.NetSpec(genome_dim + time_features + 2 * cond_dim, hidden_layers,
                      hidden_units, genome_dim, activation)
    return DenoiserNet(nn.net_init(spec, rng), time_features, cond_dim)


def time_encoding(t_arr, steps, time_features):
    """[batch, time_features] encoding; scalar t/T, or sinusoidal features."""
    frac = np.asarray(t_arr, dtype=float) / steps
    if time_features == 1:
        return frac[:, None]
    if time_features % 2:
        raise UsageError("sinusoidal time encoding needs an even feature count")
    freqs = 2.0 ** np.arange(time_features // 2)
    ang = np.pi * frac[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _net_inputs(model: DenoiserNet, x_t, t_arr, cond, mask, steps):
    """Assemble [x_t | time | standardized cond * mask | mask] rows."""
    tf = time_encoding(t_arr, steps, model.time_features)
    if model.cond_dim == 0:
        return np.concatenate([x_t, tf], axis=1)
    z = model.standardize(cond) * mask
    return np.concatenate([x_t, tf, z, mask], axis=1)


@dataclass(frozen=True)
class TrainOpts:
    """Denoiser optimization settings."""

    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    weight_decay: float = 1e-5
    sample_by_weight: bool = False  # True: weights drive example selection


def dm_train(model: DenoiserNet, genomes, weights, conditions,
             schedule: NoiseSchedule, guidance: GuidanceConfig, opts: TrainOpts,
             rng: np.random.Generator):
    """Train the denoiser on (genome, weight, condition) tuples.

    Each visit of a sample draws a fresh step t ~ U{1..T} and noise target.
    With sample_by_weight the weights select training rows (uniform loss);
    otherwise they weight the loss directly. Returns (model, loss trace).
    """
    x = np.atleast_2d(np.asarray(genomes, dtype=float))
    w = np.asarray(weights, dtype=float)
    n, d = x.shape
    if n == 0:
        raise UsageError("training set is empty")
    if d != model.genome_dim:
        raise UsageError(f"genome dim {d} != model dim {model.genome_dim}")
    if w.shape != (n,):
        raise UsageError("weights length mismatch")
    if not np.any(w > 0):
        raise DegenerateBatchError("all training weights are zero")

    if model.cond_dim:
        c = np.atleast_2d(np.asarray(conditions, dtype=float))
        if c.shape != (n, model.cond_dim):
            raise UsageError("condition shape mismatch")
        mean = c.mean(axis=0)
        std = c.std(axis=0)
        std[std == 0.0] = 1.0
        model = replace(model, cond_mean=mean, cond_std=std)
    else:
        c = np.zeros((n, 0))

    params = model.net
    opt = nn.AdamState.fresh(params.spec.param_count(), lr=opts.lr,
                             weight_decay=opts.weight_decay)
    if opts.sample_by_weight:
        probs = w / w.sum()

    losses = []
    for _ in range(opts.epochs):
        if opts.sample_by_weight:
            order = rng.choice(n, size=n, replace=True, p=probs)
        else:
            order = rng.permutation(n)
        epoch_num = 0.0
        epoch_den = 0.0
        for start in range(0, n, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            b = idx.size
            t_arr = rng.integers(1, schedule.steps + 1, size=b)
            eps = rng.standard_normal((b, d))
            x_t = diffuse_with_noise(x[idx], t_arr, schedule, eps)
            if model.cond_dim:
                mask = np.ones((b, model.cond_dim))
                drop = rng.random(b) < guidance.cond_dropout_prob
                mask[drop] = 0.0
                inputs = _net_inputs(model, x_t, t_arr, c[idx], mask, schedule.steps)
            else:
                inputs = _net_inputs(model, x_t, t_arr, None, None, schedule.steps)
            bw = np.ones(b) if opts.sample_by_weight else w[idx]
            wsum = bw.sum()
            if wsum <= 0.0:
                continue
            loss, grads = nn.weighted_mse_grad(
                params, nn.WeightedBatch(inputs, eps, bw))
            params, opt = nn.adam_step(opt, params, grads)
            epoch_num += loss * wsum
            epoch_den += wsum
        losses.append(epoch_num / max(epoch_den, 1e-300))
    return replace(model, net=params), losses


def cfg_epsilon(model: DenoiserNet, x_t, t: int, condition, guidance: GuidanceConfig,
                schedule: NoiseSchedule):
    """Predicted noise for a batch, optionally guided.

    condition=None gives the unconditional (null token) pass. With a condition
    and guidance_weight w > 0 the result is (1+w)*eps_cond - w*eps_null.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    b = x_t.shape[0]
    t_arr = np.full(b, t)
    if condition is None or model.cond_dim == 0:
        null = (np.zeros((b, model.cond_dim)),) * 2 if model.cond_dim else (None, None)
        out, _ = nn.forward_batch(
            model.net, _net_inputs(model, x_t, t_arr, *null, schedule.steps))
        return out
    cond = np.asarray(condition, dtype=float)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (b, cond.size))
    if cond.shape != (b, model.cond_dim):
        raise UsageError("condition length mismatch")
    ones = np.ones((b, model.cond_dim))
    eps_c, _ = nn.forward_batch(
        model.net, _net_inputs(model, x_t, t_arr, cond, ones, schedule.steps))
    w = guidance.guidance_weight if guidance is not None else 0.0
    if w == 0.0:
        return eps_c
    zeros = np.zeros((b, model.cond_dim))
    eps_u, _ = nn.forward_batch(
        model.net, _net_inputs(model, x_t, t_arr, zeros, zeros, schedule.steps))
    return (1.0 + w) * eps_c - w * eps_u


def ddim_sample(model: DenoiserNet, schedule: NoiseSchedule, sampler: SamplerConfig,
                n: int, rng: np.random.Generator, condition=None, init=None,
                guidance: GuidanceConfig | None = None):
    """Iterative denoising from noise (or given seeds) down to clean samples.

    Without init, starts from x_T ~ N(0, sigma_init^2 I) at the full chain;
    with init, iterates from sampler.start_step. At steps where alpha_bar is
    exactly 0 the clean-sample prediction is taken as 0 (no signal survives).
    """
    guidance = guidance or GuidanceConfig()
    d = model.genome_dim
    ab = schedule.alpha_bar
    if init is not None:
        x = np.array(np.atleast_2d(np.asarray(init, dtype=float)))
        if x.shape != (n, d):
            raise UsageError(f"init must be [{n}, {d}]")
        start = sampler.start_step if sampler.start_step is not None else schedule.steps
    else:
        x = sampler.sigma_init * rng.standard_normal((n, d))
        start = schedule.steps
    if not 0 <= start <= schedule.steps:
        raise UsageError(f"start_step {start} outside schedule range")

    for t in range(start, 0, -1):
        eps_hat = cfg_epsilon(model, x, t, condition, guidance, schedule)
        ab_t, ab_prev = ab[t], ab[t - 1]
        if ab_t > ALPHA_ZERO:
            x0_pred = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        else:
            x0_pred = np.zeros_like(x)
        if sampler.sigma_rule == "deterministic":
            sigma_t = 0.0
        else:
            ratio = ab_t / ab_prev  # ab_prev > ab_t >= 0, so ratio in [0, 1)
            sigma_t = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ratio)
        dir_coef = np.sqrt(max(1.0 - ab_prev - sigma_t ** 2, 0.0))
        x = np.sqrt(ab_prev) * x0_pred + dir_coef * eps_hat
        if sigma_t > 0.0:
            x = x + sigma_t * rng.standard_normal((n, d))
    return x


def partial_denoise(model: DenoiserNet, schedule: NoiseSchedule, genomes, t_a: int,
                    rng: np.random.Generator, condition=None,
                    guidance: GuidanceConfig | None = None,
                    sigma_rule: str = "paper_default"):
    """Re-denoise given genomes for t_a steps (identity at t_a = 0)."""
    if not 0 <= t_a <= schedule.steps:
        raise UsageError(f"t_a {t_a} outside [0, {schedule.steps}]")
    g = np.atleast_2d(np.asarray(genomes, dtype=float))
    if t_a == 0:
        return g.copy()
    sampler = SamplerConfig(sigma_rule=sigma_rule, start_step=t_a)
    return ddim_sample(model, schedule, sampler, g.shape[0], rng,
                       condition=condition, init=g, guidance=guidance)


SNAPSHOT_VERSION = 1


def save_denoiser(model: DenoiserNet, schedule: NoiseSchedule, path,
                  sigma_init=1.0, extra=None):
    """Write a versioned JSON snapshot (spec + flat params + standardization)."""
    spec = model.net.spec
    doc = {
        "format_version": SNAPSHOT_VERSION,
        "kind": "denoiser",
        "net_spec": {
            "input_dim": spec.input_dim,
            "hidden_layers": spec.hidden_layers,
            "hidden_units": spec.hidden_units,
            "output_dim": spec.output_dim,
            "activation": spec.activation,
            "recurrent": spec.recurrent,
        },
        "values": model.net.values.tolist(),
        "time_features": model.time_features,
        "cond_dim": model.cond_dim,
        "cond_mean": model.cond_mean.tolist(),
        "cond_std": model.cond_std.tolist(),
        "schedule_steps": schedule.steps,
        "sigma_init": sigma_init,
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_denoiser(path):
    """Load a snapshot; returns (model, schedule, sigma_init)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SNAPSHOT_VERSION or doc.get("kind") != "denoiser":
        raise UsageError(f"unsupported snapshot format in {path}")
    s = doc["net_spec"]
    spec = nn.NetSpec(s["input_dim"], s["hidden_layers"], s["hidden_units"],
                      s["output_dim"], s["activation"], s["recurrent"])
    model = DenoiserNet(nn.NetParams(np.array(doc["values"]), spec),
                        doc["time_features"], doc["cond_dim"],
                        np.array(doc["cond_mean"]), np.array(doc["cond_std"]))
    schedule = schedule_cosine(doc["schedule_steps"])
    return model, schedule, doc["sigma_init"]
