"""
Heteroscedastic Network Module
Fully-connected ReLU network emitting a Gaussian (mean, variance) per input, trained on
the Gaussian negative log-likelihood with exact gradients, Adam and FGSM adversarial examples
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

import config
from logger_config import get_logger
from validation import NonFiniteInputError, ValidationError

logger = get_logger("ProbNet")

PARAMS_MAGIC = b"EFFIQNET"
PARAMS_VERSION = 1
_HEADER = struct.Struct("<8sIIq")
_LAYER = struct.Struct("<II")


@dataclass(frozen=True)
class NetworkParams:
    """Weights (fan_in x fan_out) and biases of every layer, input to output"""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    seed: int

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return tuple(W.shape[1] for W in self.weights[:-1])


@dataclass(frozen=True)
class GaussianPrediction:
    mean: float
    variance: float


@dataclass(frozen=True)
class AdamState:
    m_w: Tuple[np.ndarray, ...]
    v_w: Tuple[np.ndarray, ...]
    m_b: Tuple[np.ndarray, ...]
    v_b: Tuple[np.ndarray, ...]
    step: int = 0
    lr: float = config.LEARNING_RATE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS


@dataclass(frozen=True)
class Gradients:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    inputs: np.ndarray
    loss: float

    def is_finite(self) -> bool:
        return (math.isfinite(self.loss)
                and all(np.isfinite(g).all() for g in self.weights)
                and all(np.isfinite(g).all() for g in self.biases))


@dataclass
class TrainingHistory:
    epoch_losses: List[float] = field(default_factory=list)
    diverged: bool = False
    steps: int = 0
    initial_loss: float = math.nan

    @property
    def improved(self) -> bool:
        """Final mean NLL below the NLL of the untrained network"""
        return bool(self.epoch_losses) and self.epoch_losses[-1] < self.initial_loss


@dataclass(frozen=True)
class TrainedNetwork:
    params: NetworkParams
    history: TrainingHistory


def init(d: int, seed: int, widths: Sequence[int] = config.HIDDEN_WIDTHS) -> NetworkParams:
    """Uniform +-sqrt(6/fan_in) weights, zero biases; deterministic given seed"""
    if d < 1:
        raise ValidationError(f"Input dimension must be at least 1, got {d}")
    rng = np.random.default_rng(seed)
    dims = [d] + list(widths) + [2]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights=tuple(weights), biases=tuple(biases), seed=seed)


def softplus(z: np.ndarray) -> np.ndarray:
    """ln(1 + e^z) without overflow"""
    return np.logaddexp(0.0, z)


def _check_inputs(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != params.input_dim:
        raise ValidationError(f"Expected {params.input_dim} features, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise NonFiniteInputError("Network input contains non-finite values")
    return X


def _forward_cache(params: NetworkParams, X: np.ndarray):
    """Layer inputs, pre-activations and the raw (n, 2) output"""
    inputs, pre = [], []
    a = X
    last = len(params.weights) - 1
    z = X
    for layer, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ W + b
        pre.append(z)
        if layer < last:
            a = np.maximum(z, 0.0)
    return inputs, pre, z


def forward_batch(params: NetworkParams, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive means and variances for every row of X"""
    X = _check_inputs(params, X)
    _, _, out = _forward_cache(params, X)
    return out[:, 0], softplus(out[:, 1]) + config.VARIANCE_FLOOR


def forward(params: NetworkParams, x: Sequence[float]) -> GaussianPrediction:
    mu, var = forward_batch(params, np.asarray(x, dtype=float).reshape(1, -1))
    return GaussianPrediction(mean=float(mu[0]), variance=float(var[0]))


def nll(pred: GaussianPrediction, y: float) -> float:
    """Gaussian negative log-likelihood without the additive log(2*pi)/2 constant"""
    return math.log(pred.variance) / 2 + (y - pred.mean) ** 2 / (2 * pred.variance)


def nll_batch(mu: np.ndarray, var: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(0.5 * np.log(var) + (y - mu) ** 2 / (2 * var)))


def batch_nll(params: NetworkParams, X: np.ndarray, y: np.ndarray) -> float:
    mu, var = forward_batch(params, X)
    return nll_batch(mu, var, np.asarray(y, dtype=float))


def backward(params: NetworkParams, X: np.ndarray, y: np.ndarray) -> Gradients:
    """
    Exact gradient of the batch-mean NLL w.r.t. every weight, bias and input

    The variance head contributes dNLL/dvar = 1/(2 var) - (y - mu)^2 / (2 var^2),
    chained through softplus' derivative, the logistic function.
    """
    X = _check_inputs(params, X)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    inputs, pre, out = _forward_cache(params, X)
    mu, raw_var = out[:, 0], out[:, 1]
    var = softplus(raw_var) + config.VARIANCE_FLOOR
    resid = y - mu
    loss = float(np.mean(0.5 * np.log(var) + resid ** 2 / (2 * var)))

    d_mu = -resid / var / n
    d_var = (0.5 / var - resid ** 2 / (2 * var ** 2)) / n
    delta = np.column_stack([d_mu, d_var * expit(raw_var)])

    n_layers = len(params.weights)
    grad_w: List[Optional[np.ndarray]] = [None] * n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * n_layers
    grad_in = delta
    for layer in reversed(range(n_layers)):
        grad_w[layer] = inputs[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        grad_in = delta @ params.weights[layer].T
        if layer > 0:
            delta = grad_in * (pre[layer - 1] > 0)
    return Gradients(weights=tuple(grad_w), biases=tuple(grad_b), inputs=grad_in, loss=loss)


def adam_init(params: NetworkParams, lr: float = config.LEARNING_RATE) -> AdamState:
    zeros_w = tuple(np.zeros_like(W) for W in params.weights)
    zeros_b = tuple(np.zeros_like(b) for b in params.biases)
    return AdamState(m_w=zeros_w, v_w=zeros_w, m_b=zeros_b, v_b=zeros_b, step=0, lr=lr)


def adam_step(params: NetworkParams, grads: Gradients, state: AdamState) -> Tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state, inputs untouched"""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** step
    correction2 = 1 - b2 ** step

    def update(p, g, m, v):
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        m_hat = m_new / correction1
        v_hat = v_new / correction2
        return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), m_new, v_new

    new_w, m_w, v_w = zip(*(update(p, g, m, v) for p, g, m, v
                            in zip(params.weights, grads.weights, state.m_w, state.v_w)))
    new_b, m_b, v_b = zip(*(update(p, g, m, v) for p, g, m, v
                            in zip(params.biases, grads.biases, state.m_b, state.v_b)))
    new_params = NetworkParams(weights=tuple(new_w), biases=tuple(new_b), seed=params.seed)
    new_state = AdamState(m_w=tuple(m_w), v_w=tuple(v_w), m_b=tuple(m_b), v_b=tuple(v_b), step=step,
                          lr=state.lr, beta1=b1, beta2=b2, eps=state.eps)
    return new_params, new_state


def fgsm(params: NetworkParams, x: np.ndarray, y, eps: float = config.ADV_EPS) -> np.ndarray:
    """x' = x + eps * sign(grad_x NLL(x, y)); works on a single vector or a batch"""
    x = np.asarray(x, dtype=float)
    if eps == 0:
        return x.copy()
    grads = backward(params, x, np.atleast_1d(y))
    return x + eps * np.sign(grads.inputs).reshape(x.shape)


def adversarial_gradients(params: NetworkParams, X: np.ndarray, y: np.ndarray,
                          eps: float = config.ADV_EPS) -> Gradients:
    """Gradients of 1/2 [NLL(x) + NLL(x')] with x' the FGSM example of x"""
    clean = backward(params, X, y)
    if eps == 0:
        return clean
    X_adv = np.asarray(X, dtype=float) + eps * np.sign(clean.inputs)
    adv = backward(params, X_adv, y)
    return Gradients(
        weights=tuple(0.5 * (a + b) for a, b in zip(clean.weights, adv.weights)),
        biases=tuple(0.5 * (a + b) for a, b in zip(clean.biases, adv.biases)),
        inputs=clean.inputs,
        loss=0.5 * (clean.loss + adv.loss),
    )


def iterate_batches(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    """Consecutive index batches of at most batch_size covering `order` once"""
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _params_finite(params: NetworkParams) -> bool:
    return all(np.isfinite(W).all() for W in params.weights) and all(np.isfinite(b).all() for b in params.biases)


def train_network(X: np.ndarray, y: np.ndarray, seed: int,
                  epochs: int = config.EPOCHS,
                  batch_size: int = config.BATCH_SIZE,
                  lr: float = config.LEARNING_RATE,
                  adv_eps: float = config.ADV_EPS,
                  widths: Sequence[int] = config.HIDDEN_WIDTHS,
                  name: str = "network") -> TrainedNetwork:
    """
    Train one network on random mini-batches with FGSM-augmented NLL and Adam

    `seed` drives both the initialization and the batch shuffling. On a
    non-finite loss or update the last finite parameters are kept, training
    stops and the divergence is logged.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] == 0:
        raise ValidationError("Cannot train on an empty training set")
    params = init(X.shape[1], seed, widths)
    state = adam_init(params, lr)
    rng = np.random.default_rng([seed, 1])
    history = TrainingHistory(initial_loss=batch_nll(params, X, y))

    for epoch in range(1, epochs + 1):
        for idx in iterate_batches(rng.permutation(X.shape[0]), batch_size):
            grads = adversarial_gradients(params, X[idx], y[idx], adv_eps)
            candidate, candidate_state = (adam_step(params, grads, state) if grads.is_finite()
                                          else (None, None))
            if candidate is None or not _params_finite(candidate):
                history.diverged = True
                logger.warning(f"{name}: diverged at epoch {epoch}, step {history.steps + 1} "
                               f"(lr={lr:g}, batch loss {grads.loss}); keeping last finite parameters")
                break
            params, state = candidate, candidate_state
            history.steps += 1
        epoch_loss = batch_nll(params, X, y)
        history.epoch_losses.append(epoch_loss)
        logger.debug(f"{name}: epoch {epoch}/{epochs} mean NLL {epoch_loss:.6f}")
        if history.diverged:
            break
    return TrainedNetwork(params=params, history=history)


def save_params(params: NetworkParams, path: str) -> None:
    """Versioned binary member file; every float is little-endian float64"""
    chunks = [_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, len(params.weights), params.seed)]
    for W, b in zip(params.weights, params.biases):
        chunks.append(_LAYER.pack(W.shape[0], W.shape[1]))
        chunks.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as handle:
        handle.write(b"".join(chunks))


def load_params(path: str) -> NetworkParams:
    with open(path, "rb") as handle:
        blob = handle.read()
    magic, version, n_layers, seed = _HEADER.unpack_from(blob, 0)
    if magic != PARAMS_MAGIC:
        raise ValidationError(f"{path} is not a network parameter file")
    if version != PARAMS_VERSION:
        raise ValidationError(f"{path}: unsupported parameter file version {version}")
    offset = _HEADER.size
    weights, biases = [], []
    for _ in range(n_layers):
        fan_in, fan_out = _LAYER.unpack_from(blob, offset)
        offset += _LAYER.size
        W = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(W.astype(float).reshape(fan_in, fan_out))
        biases.append(b.astype(float))
    return NetworkParams(weights=tuple(weights), biases=tuple(biases), seed=seed)
