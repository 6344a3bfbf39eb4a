"""Cart-pole control environment with evolvable FF/RNN policies.

One vectorized simulator advances all (genome, episode) pairs in lockstep;
the single-episode API wraps it with batch size 1, so both paths share the
same arithmetic. Episode randomness is limited to the initial state, drawn
from a per-episode rng stream, which keeps results independent of
evaluation order.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import NumericError, UsageError

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
HALF_POLE_LENGTH = 0.5
FORCE_MAG = 10.0
TIME_STEP = 0.02
INIT_RANGE = 0.05  # initial state components uniform in [-0.05, 0.05]


@dataclass(frozen=True)
class CartPoleParams:
    """Episode limits and the resting-average window."""

    x_lim: float = 2.4
    angle_lim_deg: float = 12.0
    max_steps: int = 500
    resting_window: int = 100
    episodes: int = 16

    @property
    def angle_lim(self):
        return np.deg2rad(self.angle_lim_deg)


def agent_spec(kind: str = "rnn", hidden_layers: int = 1, hidden_units: int = 8):
    """Policy network shape: 4 state inputs, 2 direction logits."""
    if kind == "ff":
        return nn.NetSpec(4, hidden_layers, hidden_units, 2, "relu",
                          recurrent=False)
    if kind == "rnn":
        return nn.NetSpec(4, hidden_layers, hidden_units, 2, "relu",
                          recurrent=True)
    raise UsageError("agent kind must be ff or rnn")


@dataclass
class EpisodeSummary:
    steps: int
    x_resting: float
    xdot_resting: float
    trajectory: np.ndarray | None = None


def _slice_weights(genomes, spec: nn.NetSpec):
    """Per-layer weight tensors [(Wx [n,fi,fo], Wh or None, b [n,fo]), ...]."""
    g = np.atleast_2d(np.asarray(genomes, dtype=float))
    n = g.shape[0]
    layers = []
    off = 0
    for fan_in, units, rec in spec.layer_shapes():
        wx = g[:, off:off + fan_in * units].reshape(n, fan_in, units)
        off += fan_in * units
        wh = None
        if rec:
            wh = g[:, off:off + units * units].reshape(n, units, units)
            off += units * units
        b = g[:, off:off + units]
        off += units
        layers.append((wx, wh, b))
    if off != g.shape[1]:
        raise UsageError("genome length does not match the agent spec")
    return layers


def _policy_forward(layers, spec, obs, hidden):
    """obs [n, e, 4] -> logits [n, e, 2]; hidden updated in place per layer."""
    a = obs
    for li in range(spec.hidden_layers):
        wx, wh, b = layers[li]
        z = np.einsum("nei,nio->neo", a, wx) + b[:, None, :]
        if wh is not None:
            z = z + np.einsum("nei,nio->neo", hidden[li], wh)
        a = np.maximum(z, 0.0) if spec.activation == "relu" else nn._act(
            z, spec.activation)
        if wh is not None:
            hidden[li] = a
    wx, _, b = layers[-1]
    return np.einsum("nei,nio->neo", a, wx) + b[:, None, :]


def simulate(genomes, spec: nn.NetSpec, init_states, p: CartPoleParams):
    """Run one episode per (genome, episode) pair from the given initial states.

    genomes: [n, D]; init_states: [n, e, 4] rows (x, xdot, angle, angvel).
    Returns (steps [n, e], x_resting [n, e], xdot_resting [n, e]).
    """
    g = np.atleast_2d(np.asarray(genomes, dtype=float))
    init = np.asarray(init_states, dtype=float)
    n, e = init.shape[0], init.shape[1]
    if init.shape != (n, e, 4) or g.shape[0] != n:
        raise UsageError("init_states must be [n_genomes, n_episodes, 4]")
    layers = _slice_weights(g, spec)
    hidden = [np.zeros((n, e, spec.hidden_units))
              for _ in range(spec.hidden_layers)] if spec.recurrent else None

    state = init.copy()
    active = np.ones((n, e), dtype=bool)
    steps = np.zeros((n, e), dtype=int)
    win = p.resting_window
    buf_x = np.zeros((win, n, e))
    buf_v = np.zeros((win, n, e))
    sum_x = np.zeros((n, e))
    sum_v = np.zeros((n, e))

    pole_ml = POLE_MASS * HALF_POLE_LENGTH
    total_mass = CART_MASS + POLE_MASS

    for step in range(p.max_steps):
        if not active.any():
            break
        logits = _policy_forward(layers, spec, state, hidden)
        if not np.isfinite(logits[active]).all():
            bad = np.argwhere(~np.isfinite(logits).all(axis=2) & active)[0]
            raise NumericError(
                f"policy produced non-finite output for genome {bad[0]}",
                index=int(bad[0]))
        push_right = logits[:, :, 1] >= logits[:, :, 0]  # ties push right
        force = np.where(push_right, FORCE_MAG, -FORCE_MAG)

        x, v, th, w = state[:, :, 0], state[:, :, 1], state[:, :, 2], state[:, :, 3]
        cos_t, sin_t = np.cos(th), np.sin(th)
        temp = (force + pole_ml * w * w * sin_t) / total_mass
        th_acc = (GRAVITY * sin_t - cos_t * temp) / (
            HALF_POLE_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t * cos_t / total_mass))
        x_acc = temp - pole_ml * th_acc * cos_t / total_mass

        x_new = x + TIME_STEP * v
        v_new = v + TIME_STEP * x_acc
        th_new = th + TIME_STEP * w
        w_new = w + TIME_STEP * th_acc
        new_state = np.stack([x_new, v_new, th_new, w_new], axis=2)
        state = np.where(active[:, :, None], new_state, state)

        if not np.isfinite(state[active]).all():
            bad = np.argwhere(~np.isfinite(state).all(axis=2) & active)[0]
            raise NumericError(
                f"policy produced a non-finite state for genome {bad[0]}",
                index=int(bad[0]))

        # rolling resting-window sums (only active episodes advance)
        ptr = step % win
        sum_x += np.where(active, state[:, :, 0] - buf_x[ptr], 0.0)
        sum_v += np.where(active, state[:, :, 1] - buf_v[ptr], 0.0)
        buf_x[ptr] = np.where(active, state[:, :, 0], buf_x[ptr])
        buf_v[ptr] = np.where(active, state[:, :, 1], buf_v[ptr])

        steps += active
        out = (np.abs(state[:, :, 0]) > p.x_lim) | (np.abs(state[:, :, 2])
                                                    > p.angle_lim)
        active &= ~out

    n_win = np.minimum(steps, win)
    safe = np.maximum(n_win, 1)
    return steps, sum_x / safe, sum_v / safe


def initial_state(rng: np.random.Generator):
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=4)


def cartpole_episode(policy: nn.NetParams, p: CartPoleParams,
                     rng: np.random.Generator, record_trajectory: bool = False):
    """One episode for one policy; fitness is the surviving step count."""
    if policy.spec.input_dim != 4 or policy.spec.output_dim != 2:
        raise UsageError("cart-pole policies need 4 inputs and 2 outputs")
    init = initial_state(rng)[None, None, :]
    traj = None
    if record_trajectory:
        traj = _trace_episode(policy, init[0, 0], p)
    steps, xr, vr = simulate(policy.values[None, :], policy.spec, init, p)
    return EpisodeSummary(int(steps[0, 0]), float(xr[0, 0]), float(vr[0, 0]), traj)


def _trace_episode(policy, init, p):
    """Step-by-step replay that also logs (step, x, xdot, angle, angvel, action)."""
    layers = _slice_weights(policy.values[None, :], policy.spec)
    hidden = [np.zeros((1, 1, policy.spec.hidden_units))
              for _ in range(policy.spec.hidden_layers)] \
        if policy.spec.recurrent else None
    state = np.asarray(init, dtype=float)[None, None, :].copy()
    rows = []
    for step in range(p.max_steps):
        logits = _policy_forward(layers, policy.spec, state, hidden)
        action = int(logits[0, 0, 1] >= logits[0, 0, 0])
        rows.append([step, *state[0, 0], action])
        force = FORCE_MAG if action else -FORCE_MAG
        x, v, th, w = state[0, 0]
        temp = (force + POLE_MASS * HALF_POLE_LENGTH * w * w * np.sin(th)) \
            / (CART_MASS + POLE_MASS)
        th_acc = (GRAVITY * np.sin(th) - np.cos(th) * temp) / (
            HALF_POLE_LENGTH * (4.0 / 3.0 - POLE_MASS * np.cos(th) ** 2
                                / (CART_MASS + POLE_MASS)))
        x_acc = temp - POLE_MASS * HALF_POLE_LENGTH * th_acc * np.cos(th) \
            / (CART_MASS + POLE_MASS)
        state = np.array([[[x + TIME_STEP * v, v + TIME_STEP * x_acc,
                            th + TIME_STEP * w, w + TIME_STEP * th_acc]]])
        if abs(state[0, 0, 0]) > p.x_lim or abs(state[0, 0, 2]) > p.angle_lim:
            break
    return np.array(rows)


def episode_rngs(seed_key, n_genomes, n_episodes):
    """[n, e] grid of initial states keyed by (seed_key..., genome, episode)."""
    init = np.empty((n_genomes, n_episodes, 4))
    for i in range(n_genomes):
        for ep in range(n_episodes):
            rng = np.random.default_rng(
                np.random.SeedSequence(tuple(seed_key) + (i, ep)))
            init[i, ep] = initial_state(rng)
    return init


def evaluate_policy(genome, spec: nn.NetSpec, p: CartPoleParams, n_episodes: int,
                    rng: np.random.Generator):
    """Mean fitness and mean condition triple over n_episodes episodes."""
    g = np.asarray(genome, dtype=float)
    init = np.stack([initial_state(r) for r in rng.spawn(n_episodes)])[None, :, :]
    steps, xr, vr = simulate(g[None, :], spec, init, p)
    fitness = float(steps[0].mean())
    triple = np.array([float(xr[0].mean()), float(vr[0].mean()), fitness])
    return fitness, triple


class CartPoleTask:
    """Population-level cart-pole evaluation for the evolutionary loop."""

    def __init__(self, spec: nn.NetSpec = None, params: CartPoleParams = None):
        self.spec = spec if spec is not None else agent_spec()
        self.params = params if params is not None else CartPoleParams()
        self.dim = self.spec.param_count()

    def evaluate(self, genomes, generation, seed_key):
        g = np.atleast_2d(np.asarray(genomes, dtype=float))
        init = episode_rngs(seed_key, g.shape[0], self.params.episodes)
        steps, xr, vr = simulate(g, self.spec, init, self.params)
        fits = steps.mean(axis=1)
        triple = np.column_stack([xr.mean(axis=1), vr.mean(axis=1), fits])
        return fits, {"condition_triple": triple}
