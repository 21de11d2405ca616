"""Dense tanh networks with exact backpropagation, Adam, and a tanh-squashed
Gaussian policy head. Everything is float64 numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Weights ``W[k]`` of shape ``(in, out)`` and biases ``b[k]`` of shape ``(out,)``.

    Hidden layers use tanh, the output layer is linear.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of layers does not match layer_sizes")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[k], self.layer_sizes[k + 1]):
                raise ValueError(f"layer {k}: weight shape {W.shape} does not chain")
            if b.shape != (self.layer_sizes[k + 1],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not chain")

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_mlp(layer_sizes, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) initialisation; ``out_scale`` shrinks the last layer."""
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[k])
        if k == len(sizes) - 2:
            bound *= out_scale
        weights.append(rng.uniform(-bound, bound, (sizes[k], sizes[k + 1])))
        biases.append(rng.uniform(-bound, bound, sizes[k + 1]))
    return MlpParams(sizes, weights, biases)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input has shape {x.shape}, network expects {params.layer_sizes[0]} features")
    return x, single


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass; the cache holds the input and every hidden activation."""
    h, _ = _as_batch(params, x)
    cache = [h]
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W
        z += b
        if k < last:
            np.tanh(z, out=z)
            cache.append(z)
        h = z
    return h, cache


def forward(params: MlpParams, x) -> np.ndarray:
    x_arr, single = _as_batch(params, x)
    out, _ = forward_cached(params, x_arr)
    return out[0] if single else out


def backward(params: MlpParams, x, upstream, cache=None, need_params: bool = True):
    """Gradients of ``sum(output * upstream)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows
    :meth:`MlpParams.arrays` order, or is ``None`` when ``need_params`` is false.
    """
    x_arr, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (x_arr.shape[0], params.layer_sizes[-1]):
        raise ValueError(f"upstream gradient has shape {g.shape}")
    if cache is None:
        _, cache = forward_cached(params, x_arr)
    n_layers = len(params.weights)
    grads = [None] * (2 * n_layers) if need_params else None
    for k in range(n_layers - 1, -1, -1):
        h_in = cache[k]
        if need_params:
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k].T
        if k > 0:
            g *= 1.0 - h_in * h_in
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float, **kw) -> "AdamState":
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   float(learning_rate), **kw)


def adam_update(state: AdamState, params: MlpParams, grads) -> None:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    for g in grads:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    eps_hat = state.epsilon * np.sqrt(1.0 - b2 ** t)
    for p, g, m, v in zip(params.arrays(), grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= step * m / (np.sqrt(v) + eps_hat)


# --- squashed Gaussian policy -----------------------------------------------

@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray
    pre_squash: np.ndarray
    mean: np.ndarray = field(repr=False, default=None)
    log_std: np.ndarray = field(repr=False, default=None)
    noise: np.ndarray = field(repr=False, default=None)
    raw_log_std: np.ndarray = field(repr=False, default=None)
    cache: list = field(repr=False, default=None)


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) without cancellation for large |u|
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def policy_dim(actor: MlpParams) -> int:
    return actor.layer_sizes[-1] // 2


def sample_policy(actor: MlpParams, obs, noise, log_std_min: float = LOG_STD_MIN,
                  log_std_max: float = LOG_STD_MAX) -> PolicySample:
    """Reparameterised draw ``tanh(mean + std * noise)`` with its log-density.

    The actor emits ``[mean, log_std]``; ``noise`` is a standard-normal array of
    the action shape (zeros give the deterministic mean action).
    """
    obs_arr, single = _as_batch(actor, obs)
    out, cache = forward_cached(actor, obs_arr)
    d = policy_dim(actor)
    mean = out[:, :d]
    raw = out[:, d:]
    log_std = np.clip(raw, log_std_min, log_std_max)
    eps = np.asarray(noise, dtype=np.float64).reshape(mean.shape)
    u = mean + np.exp(log_std) * eps
    a = np.tanh(u)
    log_prob = np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - _log1m_tanh2(u), axis=1)
    s = PolicySample(action=a, log_prob=log_prob, pre_squash=u, mean=mean, log_std=log_std,
                     noise=eps, raw_log_std=raw, cache=cache)
    if single:
        s.action, s.log_prob, s.pre_squash = a[0], log_prob[0], u[0]
    return s


def policy_backward(actor: MlpParams, sample: PolicySample, d_action, d_log_prob,
                    log_std_min: float = LOG_STD_MIN, log_std_max: float = LOG_STD_MAX):
    """Parameter gradients of ``sum(d_action * action) + sum(d_log_prob * log_prob)``
    for a batched sample, with the noise held fixed."""
    u = sample.pre_squash.reshape(sample.mean.shape)
    a = np.tanh(u)
    da = np.asarray(d_action, dtype=np.float64).reshape(a.shape)
    dlp = np.asarray(d_log_prob, dtype=np.float64).reshape(-1, 1)
    du = da * (1.0 - a * a) + dlp * 2.0 * a
    d_log_std = du * np.exp(sample.log_std) * sample.noise - dlp
    raw = sample.raw_log_std
    d_raw = d_log_std * ((raw > log_std_min) & (raw < log_std_max))
    upstream = np.concatenate([du, d_raw], axis=1)
    grads, _ = backward(actor, sample.cache[0], upstream, cache=sample.cache)
    return grads


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: MlpParams, adam: AdamState | None = None,
                    meta: dict | None = None) -> Path:
    """``.npz`` dump of layer sizes, parameters and optimizer moments."""
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "layer_sizes": list(params.layer_sizes),
              "meta": meta or {}}
    data = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, a in enumerate(params.arrays()):
        data[f"param_{k}"] = a
    if adam is not None:
        header_adam = {"learning_rate": adam.learning_rate, "beta1": adam.beta1,
                       "beta2": adam.beta2, "epsilon": adam.epsilon,
                       "step_count": adam.step_count}
        data["adam"] = np.frombuffer(json.dumps(header_adam, sort_keys=True).encode(),
                                     dtype=np.uint8)
        for k, (m, v) in enumerate(zip(adam.first_moment, adam.second_moment)):
            data[f"m_{k}"] = m
            data[f"v_{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **data)
    return path


def load_checkpoint(path) -> tuple[MlpParams, AdamState | None, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        sizes = tuple(header["layer_sizes"])
        n = 2 * (len(sizes) - 1)
        arrays = [z[f"param_{k}"] for k in range(n)]
        params = MlpParams(sizes, arrays[0::2], arrays[1::2])
        adam = None
        if "adam" in z:
            h = json.loads(bytes(z["adam"]).decode())
            adam = AdamState([z[f"m_{k}"] for k in range(n)], [z[f"v_{k}"] for k in range(n)],
                             h["learning_rate"], h["beta1"], h["beta2"], h["epsilon"],
                             h["step_count"])
    return params, adam, header["meta"]
