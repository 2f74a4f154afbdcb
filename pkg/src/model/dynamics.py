"""
Autoregressive LSTM dynamics for the concentration vector.

At every interval the network consumes the previous frequency vector
``z_{t-1}`` (``m/n`` in finite mode, ``p`` in asymptotic mode) and the
covariates ``x_t``, updates its per-layer ``(h, c)`` state and projects the
top hidden vector to ``alpha_t = softplus(W h_t + b) + alpha_floor``.

Gradients are computed by hand with backpropagation through time; the
trainer truncates it to randomly placed windows of ``context_length``
steps and selects epochs on the loss of whole series unrolled the same way
the streaming detector unrolls them.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from exceptions import InvalidArgumentError, TrainingDivergedError
from model.dist import (
    ALPHA_FLOOR,
    ConcentrationVector,
    LikelihoodKind,
    dirichlet_grad_batch,
    dirichlet_logpdf_batch,
    dirichlet_sample,
    dirmult_grad_batch,
    dirmult_logpmf_batch,
    dirmult_sample,
)
from model.grid import BinnedObservation
from model.optimizer import Adam

Z_TOLERANCE = 1e-6

# Per-step target kinds inside an encoded sequence
_MISSING, _DIRICHLET, _DIRMULT = 0, 1, 2


def softplus(u):
    return np.logaddexp(0.0, u)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class ModelDims:
    bin_count: int
    covariate_width: int
    hidden_width: int = 40
    num_layers: int = 2
    alpha_floor: float = ALPHA_FLOOR

    def __post_init__(self):
        if self.bin_count < 2 or self.covariate_width < 0:
            raise InvalidArgumentError("model needs at least 2 bins and a non-negative covariate width")
        if self.hidden_width < 1 or self.num_layers < 1:
            raise InvalidArgumentError("hidden width and layer count must be positive")
        if not self.alpha_floor > 0:
            raise InvalidArgumentError("alpha floor must be positive", "alpha_floor")

    @property
    def input_width(self) -> int:
        return self.bin_count + self.covariate_width

    def layer_input_width(self, layer: int) -> int:
        return self.input_width if layer == 0 else self.hidden_width

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        H = self.hidden_width
        blocks = []
        for layer in range(self.num_layers):
            blocks.append((f"lstm{layer}.weight", (4 * H, self.layer_input_width(layer) + H)))
            blocks.append((f"lstm{layer}.bias", (4 * H,)))
        blocks.append(("projection.weight", (self.bin_count, H)))
        blocks.append(("projection.bias", (self.bin_count,)))
        return blocks

    @property
    def parameter_count(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.layout()))

    def to_dict(self):
        return asdict(self)


class ModelParams:
    """
    Flat parameter vector with named views.

    LSTM gate blocks are stacked in the order input, forget, cell, output.
    """

    def __init__(self, dims: ModelDims, vector: Optional[np.ndarray] = None):
        self.dims = dims
        size = dims.parameter_count
        if vector is None:
            vector = np.zeros(size)
        vector = np.ascontiguousarray(vector, dtype=np.float64)
        if vector.shape != (size,):
            raise InvalidArgumentError(f"expected {size} parameters, got {vector.shape}", "vector")
        if not np.all(np.isfinite(vector)):
            raise InvalidArgumentError("model parameters must be finite", "vector")
        self.vector = vector
        self._views = {}
        offset = 0
        for name, shape in dims.layout():
            count = int(np.prod(shape))
            self._views[name] = self.vector[offset:offset + count].reshape(shape)
            offset += count

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def names(self) -> List[str]:
        return list(self._views)

    def weight(self, layer: int) -> np.ndarray:
        return self._views[f"lstm{layer}.weight"]

    def bias(self, layer: int) -> np.ndarray:
        return self._views[f"lstm{layer}.bias"]

    @property
    def projection_weight(self) -> np.ndarray:
        return self._views["projection.weight"]

    @property
    def projection_bias(self) -> np.ndarray:
        return self._views["projection.bias"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.vector.copy())

    @classmethod
    def initialize(cls, dims: ModelDims, rng: np.random.Generator,
                   initial_alpha: Optional[np.ndarray] = None) -> "ModelParams":
        """Uniform(+-1/sqrt(H)) weights, forget-gate bias 1, projection bias at ``initial_alpha``."""
        params = cls(dims)
        H = dims.hidden_width
        bound = 1.0 / np.sqrt(H)
        for name, shape in dims.layout():
            if name.endswith("weight"):
                params[name][...] = rng.uniform(-bound, bound, size=shape)
        for layer in range(dims.num_layers):
            params.bias(layer)[H:2 * H] = 1.0
        if initial_alpha is not None:
            target = np.maximum(np.asarray(initial_alpha, dtype=np.float64) - dims.alpha_floor, 1e-3)
            params.projection_bias[...] = softplus_inverse(target)
        return params


@dataclass
class HiddenState:
    """Per-layer ``(h, c)``; arrays are ``(H,)`` or ``(batch, H)``."""

    h: List[np.ndarray]
    c: List[np.ndarray]

    @classmethod
    def zeros(cls, dims: ModelDims, batch: Optional[int] = None) -> "HiddenState":
        shape = (dims.hidden_width,) if batch is None else (batch, dims.hidden_width)
        return cls([np.zeros(shape) for _ in range(dims.num_layers)],
                   [np.zeros(shape) for _ in range(dims.num_layers)])

    def copy(self) -> "HiddenState":
        return HiddenState([h.copy() for h in self.h], [c.copy() for c in self.c])

    def check(self, dims: ModelDims) -> None:
        if len(self.h) != dims.num_layers or len(self.c) != dims.num_layers:
            raise InvalidArgumentError("hidden state layer count does not match the model", "state")
        for array in self.h + self.c:
            if array.shape[-1] != dims.hidden_width:
                raise InvalidArgumentError("hidden state width does not match the model", "state")
            if not np.all(np.isfinite(array)):
                raise InvalidArgumentError("hidden state must be finite", "state")

    def to_dict(self):
        return {"h": [h.tolist() for h in self.h], "c": [c.tolist() for c in self.c]}

    @classmethod
    def from_dict(cls, data) -> "HiddenState":
        return cls([np.asarray(h, dtype=np.float64) for h in data["h"]],
                   [np.asarray(c, dtype=np.float64) for c in data["c"]])


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    batch_size: int = 16
    batches_per_epoch: int = 32
    context_length: int = 48
    seed: int = 0
    num_layers: int = 2
    hidden_width: int = 40
    alpha_floor: float = ALPHA_FLOOR

    def __post_init__(self):
        for name in ("epochs", "batch_size", "batches_per_epoch", "context_length", "num_layers", "hidden_width"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be positive", name)
        for name in ("learning_rate", "clip_norm", "alpha_floor"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive", name)
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative", "seed")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingSeries:
    """One series of the corpus: observations (``None`` = missing) and covariate rows."""

    observations: Sequence[Optional[BinnedObservation]]
    covariates: np.ndarray
    name: str = ""


class LossResult(NamedTuple):
    total: float
    per_step: np.ndarray
    final_state: HiddenState


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _layer_forward(W, b, inp, h_prev, c_prev, H):
    joint = np.concatenate([inp, h_prev], axis=-1)
    gates = joint @ W.T + b
    i = expit(gates[..., :H])
    f = expit(gates[..., H:2 * H])
    g = np.tanh(gates[..., 2 * H:3 * H])
    o = expit(gates[..., 3 * H:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (joint, i, f, g, o, c_prev, tanh_c)


def _cell_forward(params: ModelParams, h: List[np.ndarray], c: List[np.ndarray], inp: np.ndarray):
    H = params.dims.hidden_width
    new_h, new_c, caches = [], [], []
    layer_input = inp
    for layer in range(params.dims.num_layers):
        h_l, c_l, cache = _layer_forward(params.weight(layer), params.bias(layer),
                                         layer_input, h[layer], c[layer], H)
        new_h.append(h_l)
        new_c.append(c_l)
        caches.append(cache)
        layer_input = h_l
    u = layer_input @ params.projection_weight.T + params.projection_bias
    alpha = softplus(u) + params.dims.alpha_floor
    return new_h, new_c, caches, u, alpha


def _check_step_inputs(params: ModelParams, state: HiddenState, z_prev, x):
    dims = params.dims
    z_prev = np.asarray(z_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z_prev.shape != (dims.bin_count,):
        raise InvalidArgumentError(f"z_prev must have {dims.bin_count} components", "z_prev")
    if x.shape != (dims.covariate_width,):
        raise InvalidArgumentError(f"covariates must have {dims.covariate_width} components", "x")
    if not (np.all(np.isfinite(z_prev)) and np.all(np.isfinite(x))):
        raise InvalidArgumentError("step inputs must be finite", "x")
    if np.any(z_prev < -Z_TOLERANCE) or abs(z_prev.sum() - 1.0) > Z_TOLERANCE:
        raise InvalidArgumentError("z_prev must lie on the simplex", "z_prev")
    state.check(dims)
    return z_prev, x


def step(params: ModelParams, state: HiddenState, z_prev, x) -> Tuple[HiddenState, ConcentrationVector]:
    """One recurrent update; returns the new state and ``alpha_t``."""
    z_prev, x = _check_step_inputs(params, state, z_prev, x)
    h, c, _, _, alpha = _cell_forward(params, state.h, state.c, np.concatenate([z_prev, x]))
    return HiddenState(h, c), ConcentrationVector(alpha)


def predict_alpha(params: ModelParams, state: HiddenState, z_prev, x) -> ConcentrationVector:
    """One-step-ahead predictive concentration; identical to ``step(...)[1]``."""
    return step(params, state, z_prev, x)[1]


class RolloutResult(NamedTuple):
    samples: np.ndarray
    alphas: np.ndarray


def rollout(params: ModelParams, state: HiddenState, z_prev, covariates, horizon: int,
            kind: LikelihoodKind, rng: np.random.Generator, num_paths: int = 1,
            sample_count: Optional[int] = None) -> RolloutResult:
    """
    Multi-step sample paths: each sampled ``z`` is fed back as the next input.

    ``samples`` and ``alphas`` have shape ``(num_paths, horizon, d)``;
    finite-mode samples are returned as frequency vectors.
    """
    covariates = np.asarray(covariates, dtype=np.float64)
    if horizon < 1 or covariates.shape[0] < horizon:
        raise InvalidArgumentError("need one covariate row per forecast step", "covariates")
    if kind is LikelihoodKind.DIR_MULT and not sample_count:
        raise InvalidArgumentError("finite-mode rollout needs a sample count", "sample_count")

    d = params.dims.bin_count
    samples = np.empty((num_paths, horizon, d))
    alphas = np.empty((num_paths, horizon, d))
    for path in range(num_paths):
        path_state, z = state.copy(), np.asarray(z_prev, dtype=np.float64)
        for t in range(horizon):
            path_state, alpha = step(params, path_state, z, covariates[t])
            if kind is LikelihoodKind.DIR_MULT:
                z = dirmult_sample(sample_count, alpha, rng) / float(sample_count)
            else:
                z = dirichlet_sample(alpha, rng)
                z = z / z.sum()
            samples[path, t] = z
            alphas[path, t] = alpha.alpha
    return RolloutResult(samples, alphas)


# ---------------------------------------------------------------------------
# Sequence encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedSequence:
    """
    Arrays for one series of length L. Step ``t`` (1..L-1) reads ``z[t-1]``
    and ``x[t]`` and is scored against target ``t``.
    """

    z: np.ndarray
    x: np.ndarray
    kind: np.ndarray
    probs: np.ndarray
    counts: np.ndarray
    sample_count: np.ndarray

    @property
    def length(self) -> int:
        return self.z.shape[0]

    def digest(self) -> str:
        sha = hashlib.sha256()
        for array in (self.z, self.x, self.kind, self.probs, self.counts, self.sample_count):
            sha.update(np.ascontiguousarray(array).tobytes())
        return sha.hexdigest()


def encode_series(observations: Sequence[Optional[BinnedObservation]], covariates,
                  bin_count: int) -> EncodedSequence:
    covariates = np.asarray(covariates, dtype=np.float64)
    L = len(observations)
    if covariates.ndim != 2 or covariates.shape[0] != L:
        raise InvalidArgumentError("need one covariate row per observation", "covariates")
    if not np.all(np.isfinite(covariates)):
        raise InvalidArgumentError("covariates must be finite", "covariates")

    z = np.empty((L, bin_count))
    kind = np.zeros(L, dtype=np.int64)
    probs = np.zeros((L, bin_count))
    counts = np.zeros((L, bin_count))
    sample_count = np.zeros(L)
    previous = np.full(bin_count, 1.0 / bin_count)
    for t, obs in enumerate(observations):
        if obs is None:
            z[t] = previous
            continue
        if obs.bin_count != bin_count:
            raise InvalidArgumentError(
                f"observation {t} has {obs.bin_count} bins, model expects {bin_count}", "series"
            )
        previous = obs.frequencies()
        z[t] = previous
        if obs.is_asymptotic:
            kind[t] = _DIRICHLET
            probs[t] = obs.probs
        else:
            kind[t] = _DIRMULT
            counts[t] = obs.counts
            sample_count[t] = obs.sample_count
    return EncodedSequence(z, covariates, kind, probs, counts, sample_count)


@dataclass
class _Batch:
    """Time-major arrays ``(T, B, ...)`` for a group of sequence slices."""

    z_prev: np.ndarray
    x: np.ndarray
    kind: np.ndarray
    probs: np.ndarray
    counts: np.ndarray
    sample_count: np.ndarray

    @property
    def steps(self) -> int:
        return self.kind.shape[0]

    def window(self, start: int, stop: int) -> "_Batch":
        return _Batch(self.z_prev[start:stop], self.x[start:stop], self.kind[start:stop],
                      self.probs[start:stop], self.counts[start:stop], self.sample_count[start:stop])


def _slice_batch(sequences: Sequence[EncodedSequence], ranges: Sequence[Tuple[int, int, int]]) -> _Batch:
    """Stack slices ``(sequence, first_step, last_step)`` padded with missing steps."""
    T = max(last - first + 1 for _, first, last in ranges)
    B = len(ranges)
    d = sequences[0].z.shape[1]
    C = sequences[0].x.shape[1]
    batch = _Batch(np.full((T, B, d), 1.0 / d), np.zeros((T, B, C)), np.zeros((T, B), dtype=np.int64),
                   np.zeros((T, B, d)), np.zeros((T, B, d)), np.zeros((T, B)))
    for b, (s, first, last) in enumerate(ranges):
        seq = sequences[s]
        n = last - first + 1
        batch.z_prev[:n, b] = seq.z[first - 1:last]
        batch.x[:n, b] = seq.x[first:last + 1]
        batch.kind[:n, b] = seq.kind[first:last + 1]
        batch.probs[:n, b] = seq.probs[first:last + 1]
        batch.counts[:n, b] = seq.counts[first:last + 1]
        batch.sample_count[:n, b] = seq.sample_count[first:last + 1]
    return batch


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------

def _step_loglik(batch: _Batch, t: int, alpha: np.ndarray) -> np.ndarray:
    values = np.zeros(alpha.shape[0])
    kind = batch.kind[t]
    rows = kind == _DIRICHLET
    if np.any(rows):
        values[rows] = dirichlet_logpdf_batch(batch.probs[t][rows], alpha[rows])
    rows = kind == _DIRMULT
    if np.any(rows):
        values[rows] = dirmult_logpmf_batch(batch.counts[t][rows], batch.sample_count[t][rows], alpha[rows])
    return values


def _step_loglik_grad(batch: _Batch, t: int, alpha: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(alpha)
    kind = batch.kind[t]
    rows = kind == _DIRICHLET
    if np.any(rows):
        grad[rows] = dirichlet_grad_batch(batch.probs[t][rows], alpha[rows])
    rows = kind == _DIRMULT
    if np.any(rows):
        grad[rows] = dirmult_grad_batch(batch.counts[t][rows], batch.sample_count[t][rows], alpha[rows])
    return grad


def _forward_backward(params: ModelParams, batch: _Batch, state: HiddenState,
                      compute_gradient: bool = True):
    """
    Forward pass over ``batch`` from ``state``, fed the observed previous frequencies.

    Returns ``(total_nll, per_step_loglik (T, B), gradient_vector, final_state)``;
    missing steps contribute nothing and report ``nan``.
    """
    dims = params.dims
    H, L = dims.hidden_width, dims.num_layers
    T = batch.steps
    h, c = list(state.h), list(state.c)
    caches, tops, us, alphas = [], [], [], []
    per_step = np.full(batch.kind.shape, np.nan)
    total = 0.0

    for t in range(T):
        inp = np.concatenate([batch.z_prev[t], batch.x[t]], axis=-1)
        h, c, cache, u, alpha = _cell_forward(params, h, c, inp)
        loglik = _step_loglik(batch, t, alpha)
        observed = batch.kind[t] != _MISSING
        per_step[t, observed] = loglik[observed]
        total -= float(loglik[observed].sum())
        if compute_gradient:
            caches.append(cache)
            tops.append(h[-1])
            us.append(u)
            alphas.append(alpha)

    final_state = HiddenState(h, c)
    if not compute_gradient:
        return total, per_step, None, final_state

    grad = ModelParams(dims)
    dh_next = [np.zeros_like(state.h[0]) for _ in range(L)]
    dc_next = [np.zeros_like(state.c[0]) for _ in range(L)]
    proj_w = params.projection_weight

    for t in reversed(range(T)):
        d_alpha = -_step_loglik_grad(batch, t, alphas[t])
        d_alpha[batch.kind[t] == _MISSING] = 0.0
        du = d_alpha * expit(us[t])
        grad.projection_weight[...] += np.atleast_2d(du).T @ np.atleast_2d(tops[t])
        grad.projection_bias[...] += du.sum(axis=0) if du.ndim > 1 else du
        dh_above = du @ proj_w

        for layer in reversed(range(L)):
            joint, i, f, g, o, c_prev, tanh_c = caches[t][layer]
            dh = dh_above + dh_next[layer]
            do = dh * tanh_c
            dc = dc_next[layer] + dh * o * (1.0 - tanh_c ** 2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next[layer] = dc * f
            d_gates = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g ** 2), do * o * (1.0 - o)],
                axis=-1,
            )
            grad.weight(layer)[...] += np.atleast_2d(d_gates).T @ np.atleast_2d(joint)
            grad.bias(layer)[...] += d_gates.sum(axis=0) if d_gates.ndim > 1 else d_gates
            d_joint = d_gates @ params.weight(layer)
            in_width = dims.layer_input_width(layer)
            dh_next[layer] = d_joint[..., in_width:]
            dh_above = d_joint[..., :in_width]

    return total, per_step, grad.vector, final_state


def _single_batch(params: ModelParams, series: Sequence[Optional[BinnedObservation]], covariates) -> _Batch:
    if len(series) < 2:
        raise InvalidArgumentError("series needs at least 2 observations", "series")
    seq = encode_series(series, covariates, params.dims.bin_count)
    return _slice_batch([seq], [(0, 1, seq.length - 1)])


def _initial_state(params: ModelParams, h0: Optional[HiddenState]) -> HiddenState:
    if h0 is None:
        return HiddenState.zeros(params.dims, batch=1)
    h0.check(params.dims)
    return HiddenState([np.atleast_2d(h) for h in h0.h], [np.atleast_2d(c) for c in h0.c])


def _squeeze_state(state: HiddenState) -> HiddenState:
    return HiddenState([h[0].copy() for h in state.h], [c[0].copy() for c in state.c])


def unroll_loss(params: ModelParams, series: Sequence[Optional[BinnedObservation]], covariates,
                h0: Optional[HiddenState] = None) -> LossResult:
    """
    Negative log-likelihood ``-sum_{t>=1} log L_t`` with observed inputs at every step.

    ``covariates[t]`` belongs to ``series[t]``; ``per_step`` has one entry
    per predicted interval (``nan`` where the observation is missing).
    """
    batch = _single_batch(params, series, covariates)
    total, per_step, _, final_state = _forward_backward(
        params, batch, _initial_state(params, h0), compute_gradient=False
    )
    return LossResult(total, per_step[:, 0], _squeeze_state(final_state))


def backward(params: ModelParams, series: Sequence[Optional[BinnedObservation]], covariates,
             h0: Optional[HiddenState] = None) -> ModelParams:
    """Gradient of the total NLL with respect to every parameter."""
    batch = _single_batch(params, series, covariates)
    _, _, gradient, _ = _forward_backward(params, batch, _initial_state(params, h0))
    return ModelParams(params.dims, gradient)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def estimate_initial_alpha(sequences: Sequence[EncodedSequence]) -> np.ndarray:
    """
    Static moment-matched Dirichlet concentration of the training frequencies.

    The spread is read from differences of consecutive observed intervals, so
    a mean that moves slowly with the season does not pass for noise.
    """
    z = np.concatenate([seq.z[seq.kind != _MISSING] for seq in sequences])
    n = np.concatenate([seq.sample_count[seq.kind != _MISSING] for seq in sequences])
    mean = np.clip(z.mean(axis=0), 1e-6, None)
    mean /= mean.sum()
    steps = [np.diff(seq.z, axis=0)[(seq.kind[1:] != _MISSING) & (seq.kind[:-1] != _MISSING)]
             for seq in sequences]
    steps = np.concatenate(steps)
    # a difference of two independent draws has twice their variance
    var = (steps ** 2).mean(axis=0) / 2.0 if steps.shape[0] else z.var(axis=0)
    spread = mean * (1.0 - mean)
    usable = (var > 0) & (spread > 0)
    if not np.any(usable):
        return mean * 1e4
    ratio = float(np.median(var[usable] / spread[usable]))
    finite = n > 0
    if np.any(finite):
        # count frequencies: var = spread (n + a0) / (n (1 + a0))
        trials = float(np.median(n[finite]))
        r = ratio * trials
        alpha0 = (trials - r) / (r - 1.0) if r > 1.0 + 1e-9 else 1e4
    else:
        alpha0 = 1.0 / ratio - 1.0 if ratio > 0 else 1e4
    alpha0 = float(np.clip(alpha0, 1.0, 1e4))
    return mean * alpha0


def projection_step_scale(params: ModelParams, initial_alpha: np.ndarray) -> np.ndarray:
    """
    Per-coordinate learning-rate multipliers: the projection moves on the
    scale of the concentration it produces, the LSTM blocks at unit scale.
    """
    scale = np.ones(params.dims.parameter_count)
    offset = 0
    factor = max(1.0, float(np.mean(initial_alpha)))
    for name, shape in params.dims.layout():
        count = int(np.prod(shape))
        if name.startswith("projection"):
            scale[offset:offset + count] = factor
        offset += count
    return scale


@dataclass
class TrainingResult:
    params: ModelParams
    best_loss: float
    history: List[float] = field(default_factory=list)


class Trainer:
    """
    Global model trained on all series of a corpus simultaneously.

    Every epoch draws ``batches_per_epoch`` minibatches of ``batch_size``
    windows of ``context_length`` steps at random positions (series weighted
    by length), each unrolled from a zero state. After the epoch the whole
    corpus is scored with the state carried from the first interval, the way
    detection runs, and the parameters with the lowest such loss are kept.
    """

    def __init__(self, config: TrainingConfig):
        self.config = config
        self.logger = None

    def set_logger(self, logger):
        """Set logger instance."""
        self.logger = logger

    def _log(self, level, message):
        if self.logger:
            self.logger.log(level, message)

    def _sample_ranges(self, sequences: Sequence[EncodedSequence],
                       rng: np.random.Generator) -> List[Tuple[int, int, int]]:
        """``batch_size`` slices ``(sequence, first_step, last_step)`` at random positions."""
        cfg = self.config
        steps = np.array([seq.length - 1 for seq in sequences], dtype=np.float64)
        picks = rng.choice(len(sequences), size=cfg.batch_size, p=steps / steps.sum())
        ranges = []
        for s in picks:
            available = int(steps[s])
            width = min(cfg.context_length, available)
            first = 1 + int(rng.integers(0, available - width + 1))
            ranges.append((int(s), first, first + width - 1))
        return ranges

    def _check_finite(self, loss, gradient, epoch):
        if not np.isfinite(loss) or (gradient is not None and not np.all(np.isfinite(gradient))):
            self._log(logging.ERROR, f"Training diverged at epoch {epoch}")
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch=epoch)

    def fit(self, corpus: Sequence[TrainingSeries]) -> TrainingResult:
        cfg = self.config
        if not corpus:
            raise InvalidArgumentError("training corpus is empty", "corpus")

        bin_count = _corpus_bin_count(corpus)
        covariate_width = np.asarray(corpus[0].covariates).shape[1]
        sequences = []
        for item in corpus:
            if len(item.observations) < max(2, cfg.context_length):
                raise InvalidArgumentError(
                    f"series {item.name or '?'} is shorter than the context length", "corpus"
                )
            sequences.append(encode_series(item.observations, item.covariates, bin_count))
        # canonical order so the result does not depend on corpus order
        sequences.sort(key=EncodedSequence.digest)

        full = _slice_batch(sequences, [(s, 1, seq.length - 1) for s, seq in enumerate(sequences)])
        observed_steps = int(np.count_nonzero(full.kind))
        if observed_steps == 0:
            raise InvalidArgumentError("training corpus has no observed intervals", "corpus")

        dims = ModelDims(bin_count=bin_count, covariate_width=covariate_width,
                         hidden_width=cfg.hidden_width, num_layers=cfg.num_layers,
                         alpha_floor=cfg.alpha_floor)
        rng = np.random.default_rng(cfg.seed)
        initial_alpha = estimate_initial_alpha(sequences)
        params = ModelParams.initialize(dims, rng, initial_alpha=initial_alpha)
        optimizer = Adam(dims.parameter_count, learning_rate=cfg.learning_rate, clip_norm=cfg.clip_norm,
                         step_scale=projection_step_scale(params, initial_alpha))

        best_loss, best_params, history = np.inf, params.copy(), []
        self._log(logging.INFO,
                  f"Training {dims.parameter_count} parameters on {len(sequences)} series "
                  f"({observed_steps} intervals) for {cfg.epochs} epochs")

        for epoch in range(1, cfg.epochs + 1):
            batch_loss, batch_steps = 0.0, 0
            for _ in range(cfg.batches_per_epoch):
                batch = _slice_batch(sequences, self._sample_ranges(sequences, rng))
                state = HiddenState.zeros(dims, batch=batch.kind.shape[1])
                loss, _, gradient, _ = _forward_backward(params, batch, state)
                self._check_finite(loss, gradient, epoch)
                steps = max(1, int(np.count_nonzero(batch.kind)))
                optimizer.step(params.vector, gradient / steps)
                batch_loss += loss
                batch_steps += steps

            state = HiddenState.zeros(dims, batch=len(sequences))
            loss, _, _, _ = _forward_backward(params, full, state, compute_gradient=False)
            self._check_finite(loss, None, epoch)
            mean_loss = loss / observed_steps
            history.append(mean_loss)
            self._log(logging.DEBUG, f"epoch {epoch}: minibatch NLL {batch_loss / batch_steps:.6f}, "
                                     f"corpus NLL {mean_loss:.6f}")
            if mean_loss < best_loss:
                best_loss, best_params = mean_loss, params.copy()

        self._log(logging.INFO, f"Training finished, best mean NLL {best_loss:.6f}")
        return TrainingResult(best_params, float(best_loss), history)


def _corpus_bin_count(corpus: Sequence[TrainingSeries]) -> int:
    counts = {obs.bin_count for item in corpus for obs in item.observations if obs is not None}
    if len(counts) != 1:
        raise InvalidArgumentError("all series of a corpus must share the bin count", "corpus")
    return counts.pop()


def train(config: TrainingConfig, corpus: Sequence[TrainingSeries], logger=None) -> ModelParams:
    """Fit a global model and return the parameters with the best corpus loss."""
    trainer = Trainer(config)
    if logger is not None:
        trainer.set_logger(logger)
    return trainer.fit(corpus).params
