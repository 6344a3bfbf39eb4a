"""Minimal dense feed-forward / recurrent networks with manual backprop.

Everything operates on flat float64 parameter vectors so that a network's
weights can double as a genome. The canonical layer order is: for each
hidden layer, input weights (row-major, shape fan_in x units), then the
recurrent weights (units x units, recurrent nets only), then the biases;
the final linear output layer follows the same order. Hidden layers apply
the configured activation, the output layer is linear.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateBatchError, NumericError, UsageError

ACTIVATIONS = ("relu", "leaky_relu", "elu")
LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z >= 0.0, z, LEAKY_SLOPE * z)
    if kind == "elu":
        return np.where(z >= 0.0, z, ELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    raise UsageError(f"unknown activation {kind!r}")


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0.0).astype(float)
    if kind == "leaky_relu":
        return np.where(z >= 0.0, 1.0, LEAKY_SLOPE)
    if kind == "elu":
        return np.where(z >= 0.0, 1.0, ELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    raise UsageError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class NetSpec:
    """Shape of a dense network; parameter count is a pure function of this."""

    input_dim: int
    hidden_layers: int
    hidden_units: int
    output_dim: int
    activation: str = "relu"
    recurrent: bool = False

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_units", "output_dim"):
            if getattr(self, name) < 1:
                raise UsageError(f"NetSpec.{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"activation must be one of {ACTIVATIONS}")

    def layer_shapes(self):
        """[(fan_in, units, recurrent), ...] for hidden layers plus output layer."""
        shapes = []
        fan_in = self.input_dim
        for _ in range(self.hidden_layers):
            shapes.append((fan_in, self.hidden_units, self.recurrent))
            fan_in = self.hidden_units
        shapes.append((fan_in, self.output_dim, False))
        return shapes

    def param_count(self):
        n = 0
        for fan_in, units, rec in self.layer_shapes():
            n += fan_in * units + (units * units if rec else 0) + units
        return n


@dataclass(frozen=True)
class NetParams:
    """Flat parameter vector in canonical layer order plus its spec."""

    values: np.ndarray
    spec: NetSpec

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size != self.spec.param_count():
            raise UsageError(
                f"parameter vector length {values.size} != "
                f"spec count {self.spec.param_count()}"
            )

    def with_values(self, values):
        return replace(self, values=np.asarray(values, dtype=float))


def unflatten(params: NetParams):
    """Views into the flat vector as [(Wx, Wh_or_None, b), ...] per layer."""
    out = []
    v = params.values
    off = 0
    for fan_in, units, rec in params.spec.layer_shapes():
        wx = v[off:off + fan_in * units].reshape(fan_in, units)
        off += fan_in * units
        wh = None
        if rec:
            wh = v[off:off + units * units].reshape(units, units)
            off += units * units
        b = v[off:off + units]
        off += units
        out.append((wx, wh, b))
    return out


def flatten(layers, spec: NetSpec) -> NetParams:
    """Inverse of :func:`unflatten`; concatenates layer arrays in canonical order."""
    chunks = []
    for (wx, wh, b), (fan_in, units, rec) in zip(layers, spec.layer_shapes()):
        if wx.shape != (fan_in, units) or b.shape != (units,):
            raise UsageError("layer array shape does not match spec")
        chunks.append(np.asarray(wx, dtype=float).ravel())
        if rec:
            if wh is None or wh.shape != (units, units):
                raise UsageError("recurrent layer missing its hidden weights")
            chunks.append(np.asarray(wh, dtype=float).ravel())
        b = np.asarray(b, dtype=float)
        chunks.append(b.ravel())
    return NetParams(np.concatenate(chunks), spec)


def net_init(spec: NetSpec, rng: np.random.Generator) -> NetParams:
    """He-style initialization: W ~ N(0, sqrt(2/fan_in)), zero biases."""
    chunks = []
    for fan_in, units, rec in spec.layer_shapes():
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), fan_in * units))
        if rec:
            chunks.append(rng.normal(0.0, np.sqrt(1.0 / units), units * units))
        chunks.append(np.zeros(units))
    return NetParams(np.concatenate(chunks), spec)


def zeros_state(spec: NetSpec, batch=None):
    """Fresh all-zero hidden state ([layers, units] or [layers, batch, units])."""
    if not spec.recurrent:
        return None
    if batch is None:
        return np.zeros((spec.hidden_layers, spec.hidden_units))
    return np.zeros((spec.hidden_layers, batch, spec.hidden_units))


def forward_batch(params: NetParams, inputs, state=None):
    """Batched forward pass.

    inputs: [batch, input_dim]; state: [layers, batch, units] for recurrent
    nets (zeros when omitted). Returns (outputs [batch, output_dim], new state).
    """
    spec = params.spec
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise UsageError(f"inputs must be [batch, {spec.input_dim}], got {x.shape}")
    if state is not None and not spec.recurrent:
        raise UsageError("hidden state passed to a non-recurrent network")
    if spec.recurrent and state is None:
        state = zeros_state(spec, batch=x.shape[0])
    layers = unflatten(params)
    a = x
    new_state = np.empty_like(state) if spec.recurrent else None
    for li in range(spec.hidden_layers):
        wx, wh, b = layers[li]
        z = a @ wx + b
        if wh is not None:
            z = z + state[li] @ wh
        a = _act(z, spec.activation)
        if spec.recurrent:
            new_state[li] = a
    wx, _, b = layers[-1]
    return a @ wx + b, new_state


def net_forward(params: NetParams, input_vec, state=None):
    """Single-sample forward pass; returns (output vector, new hidden state)."""
    x = np.asarray(input_vec, dtype=float)
    if x.ndim != 1 or x.size != params.spec.input_dim:
        raise UsageError(f"input length {x.size} != input_dim {params.spec.input_dim}")
    batched_state = None
    if state is not None:
        batched_state = np.asarray(state, dtype=float)[:, None, :]
    out, new_state = forward_batch(params, x[None, :], batched_state)
    if new_state is not None:
        new_state = new_state[:, 0, :]
    return out[0], new_state


@dataclass
class WeightedBatch:
    """(inputs, targets, nonnegative per-sample weights) with matching rows."""

    inputs: np.ndarray
    targets: np.ndarray
    sample_weights: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        self.sample_weights = np.asarray(self.sample_weights, dtype=float)
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n or self.sample_weights.shape != (n,):
            raise UsageError("batch row counts disagree")
        if not np.all(np.isfinite(self.sample_weights)) or np.any(self.sample_weights < 0):
            raise UsageError("sample weights must be finite and >= 0")

    def __len__(self):
        return self.inputs.shape[0]


def weighted_mse_grad(params: NetParams, batch: WeightedBatch, state=None):
    """Weight-normalized MSE loss and its gradient w.r.t. the flat parameters.

    loss = sum_i w_i ||out_i - target_i||^2 / sum_i w_i. Recurrent nets are
    differentiated through a single step from the given (default zero) state.
    """
    spec = params.spec
    w = batch.sample_weights
    wsum = w.sum()
    if wsum <= 0.0:
        raise DegenerateBatchError("all sample weights are zero")
    if batch.inputs.shape[1] != spec.input_dim or batch.targets.shape[1] != spec.output_dim:
        raise UsageError("batch dimensions do not match the net spec")

    layers = unflatten(params)
    nb = len(batch)
    if spec.recurrent and state is None:
        state = zeros_state(spec, batch=nb)

    # forward, caching pre-activations and activations
    a = batch.inputs
    acts = [a]
    zs = []
    for li in range(spec.hidden_layers):
        wx, wh, b = layers[li]
        z = a @ wx + b
        if wh is not None:
            z = z + state[li] @ wh
        zs.append(z)
        a = _act(z, spec.activation)
        acts.append(a)
    wx_out, _, b_out = layers[-1]
    out = a @ wx_out + b_out

    diff = out - batch.targets
    loss = float((w * np.sum(diff * diff, axis=1)).sum() / wsum)

    # backward
    grads = [None] * (spec.hidden_layers + 1)
    delta = 2.0 * (w[:, None] * diff) / wsum
    grads[-1] = (acts[-1].T @ delta, None, delta.sum(axis=0))
    delta = delta @ wx_out.T
    for li in range(spec.hidden_layers - 1, -1, -1):
        wx, wh, _ = layers[li]
        delta = delta * _act_grad(zs[li], spec.activation)
        gwh = state[li].T @ delta if wh is not None else None
        grads[li] = (acts[li].T @ delta, gwh, delta.sum(axis=0))
        delta = delta @ wx.T

    flat = []
    for (gwx, gwh, gb), (_, _, rec) in zip(grads, spec.layer_shapes()):
        flat.append(gwx.ravel())
        if rec:
            flat.append(gwh.ravel())
        flat.append(gb)
    return loss, np.concatenate(flat)


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; weight decay is decoupled."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, n_params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps,
                   weight_decay)


def adam_step(state: AdamState, params: NetParams, grads):
    """One Adam update with decoupled L2 decay; returns (new params, new state)."""
    g = np.asarray(grads, dtype=float)
    if g.shape != params.values.shape:
        raise UsageError("gradient length does not match parameter length")
    bad = ~np.isfinite(g)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NumericError(f"non-finite gradient at index {idx}", index=idx)
    t = state.step_count + 1
    v = params.values * (1.0 - state.lr * state.weight_decay)
    m1 = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    m2 = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m1_hat = m1 / (1.0 - state.beta1 ** t)
    m2_hat = m2 / (1.0 - state.beta2 ** t)
    v = v - state.lr * m1_hat / (np.sqrt(m2_hat) + state.eps)
    return params.with_values(v), replace(state, first_moment=m1, second_moment=m2,
                                           step_count=t)


def train(params: NetParams, opt: AdamState, data: WeightedBatch, epochs: int,
          batch_size: int, rng: np.random.Generator):
    """Mini-batch Adam training on one weighted dataset.

    Shuffling is driven solely by `rng`, so identical (seed, spec, data) give
    bit-identical results. Returns (params, opt state, per-epoch loss trace).
    """
    if len(data) == 0:
        raise UsageError("dataset is empty")
    n = len(data)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_num = 0.0
        epoch_den = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            sub = WeightedBatch(data.inputs[idx], data.targets[idx],
                                data.sample_weights[idx])
            wsum = sub.sample_weights.sum()
            if wsum <= 0.0:
                continue  # skip all-zero-weight slices; they carry no signal
            loss, grads = weighted_mse_grad(params, sub)
            params, opt = adam_step(opt, params, grads)
            epoch_num += loss * wsum
            epoch_den += wsum
        if epoch_den <= 0.0:
            raise DegenerateBatchError("dataset weights sum to zero")
        losses.append(epoch_num / epoch_den)
    return params, opt, losses
