"""
Dense networks with hand-written reverse mode, Adam, Gaussian policy heads,
running observation statistics, and a plain checkpoint format.

Weights are stored as (fan_in, fan_out) so a batch (B, fan_in) maps to
(B, fan_out) with ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import ControlInput
from .errors import DivergenceError, ParameterError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG2 = math.log(2.0)
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "linear", "softplus")


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ParameterError(f"need at least input and output layers with positive sizes, got {sizes}")
        if self.hidden_activation not in _ACTIVATIONS or self.output_activation not in _ACTIVATIONS:
            raise ParameterError("unknown activation tag")
        object.__setattr__(self, "layer_sizes", sizes)


@dataclass
class ForwardCache:
    owner: int
    generation: int
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softplus":
        return softplus(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return g * (1.0 - y * y)
    if kind == "softplus":
        return g * sigmoid(z)
    return g


class Mlp:
    """Multilayer perceptron; parameters are [W0, b0, W1, b1, ...]."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.generation = 0
        self.params: list[np.ndarray] = []
        sizes = spec.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)) if rng is not None else np.zeros((fan_in, fan_out))
            self.params += [w, np.zeros(fan_out)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    @property
    def in_size(self) -> int:
        return self.spec.layer_sizes[0]

    @property
    def out_size(self) -> int:
        return self.spec.layer_sizes[-1]

    def bump(self) -> None:
        """Mark parameters as changed; forward caches taken before are stale."""
        self.generation += 1

    def copy(self) -> "Mlp":
        other = Mlp(self.spec)
        other.params = [p.copy() for p in self.params]
        return other

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != len(self.params) or any(a.shape != b.shape for a, b in zip(params, self.params)):
            raise ParameterError("parameter shapes do not match the network")
        for dst, src in zip(self.params, params):
            dst[...] = src
        self.bump()

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.in_size:
            raise ParameterError(f"input width {h.shape[-1]} does not match network input {self.in_size}")
        inputs, pre, outputs = [], [], []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ w + b
            kind = self.spec.output_activation if i == last else self.spec.hidden_activation
            inputs.append(h)
            pre.append(z)
            h = _activate(kind, z)
            outputs.append(h)
        cache = ForwardCache(id(self), self.generation, inputs, pre, outputs, squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Parameter gradients and input gradient for a given output gradient."""
        if cache.owner != id(self) or cache.generation != self.generation:
            raise ParameterError("stale or foreign forward cache")
        g = np.asarray(grad_out, dtype=float)
        if cache.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            kind = self.spec.output_activation if i == last else self.spec.hidden_activation
            g = _activation_grad(kind, cache.pre[i], cache.outputs[i], g)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, (g[0] if cache.squeeze else g)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.sizes": np.asarray(self.spec.layer_sizes, dtype=np.int64)}
        for i, p in enumerate(self.params):
            out[f"{prefix}.p{i}"] = p
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        sizes = tuple(int(s) for s in arrays[f"{prefix}.sizes"])
        if sizes != self.spec.layer_sizes:
            raise ParameterError(f"checkpoint layer sizes {sizes} differ from network {self.spec.layer_sizes}")
        self.set_params([arrays[f"{prefix}.p{i}"] for i in range(len(self.params))])


class Adam:
    """Adaptive-moment optimizer with bias correction, updating arrays in place."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, owners: tuple[Mlp, ...] = ()):
        if not lr > 0:
            raise ParameterError("learning rate must be positive")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.owners = owners
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ParameterError("gradient list does not match parameters")
        for g, p in zip(grads, self.params):
            if g.shape != p.shape:
                raise ParameterError("gradient shape mismatch")
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for g, p, m, v in zip(grads, self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for net in self.owners:
            net.bump()

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.asarray(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        for i in range(len(self.m)):
            self.m[i][...] = arrays[f"{prefix}.m{i}"]
            self.v[i][...] = arrays[f"{prefix}.v{i}"]


def optimizer_step(opt: Adam, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Functional wrapper: apply one Adam step to ``params`` (the optimizer's own arrays)."""
    if any(a is not b for a, b in zip(params, opt.params)) or len(params) != len(opt.params):
        raise ParameterError("optimizer was built for different parameter arrays")
    opt.step(grads)
    return params


# ---------------------------------------------------------------------------
# Gaussian heads
# ---------------------------------------------------------------------------

def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log-density, summed over the last axis."""
    z = (x - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - HALF_LOG_2PI, axis=-1)


def log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2) computed without cancellation."""
    return 2.0 * (LOG2 - u - softplus(-2.0 * u))


def squashed_log_prob(action: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Log-density of a = tanh(u), u ~ N(mean, std), evaluated at ``action`` in (-1, 1)."""
    u = np.arctanh(action)
    return gaussian_log_prob(u, mean, std) - np.sum(log_one_minus_tanh_sq(u), axis=-1)


@dataclass
class GaussianSample:
    action: np.ndarray
    log_prob: np.ndarray
    pre_squash: np.ndarray
    noise: np.ndarray


def gaussian_head(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator | None = None,
                  squash: bool = False, noise: np.ndarray | None = None) -> GaussianSample:
    """Sample from a diagonal Gaussian, optionally squashed through tanh.

    ``noise`` (standard normal draws) may be passed in to fix the sample;
    otherwise it is drawn from ``rng``. Unsquashed samples are returned as
    drawn; clipping to the action box happens downstream.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0) or not np.all(np.isfinite(std)):
        raise ParameterError("standard deviation must be positive and finite")
    if noise is None:
        noise = rng.standard_normal(np.broadcast(mean, std).shape)
    u = mean + std * noise
    logp = np.sum(-0.5 * noise * noise - np.log(std) - HALF_LOG_2PI, axis=-1)
    if not squash:
        return GaussianSample(u, logp, u, noise)
    a = np.tanh(u)
    logp = logp - np.sum(log_one_minus_tanh_sq(u), axis=-1)
    return GaussianSample(a, logp, u, noise)


# ---------------------------------------------------------------------------
# observation statistics
# ---------------------------------------------------------------------------

class RunningNormalizer:
    """Streaming mean and variance (Chan et al. pairwise merge)."""

    def __init__(self, dim: int, min_std: float = 1e-6):
        self.dim = int(dim)
        self.min_std = min_std
        self.count = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def update(self, x: np.ndarray) -> "RunningNormalizer":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.dim:
            raise ParameterError(f"expected {self.dim} features, got {x.shape[-1]}")
        k = x.shape[0]
        if k == 0:
            return self
        b_mean = x.mean(axis=0)
        b_m2 = ((x - b_mean) ** 2).sum(axis=0)
        total = self.count + k
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (k / total)
        self.m2 = self.m2 + b_m2 + delta * delta * (self.count * k / total)
        self.count = total
        return self

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return self.m2 / (self.count - 1)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def normalize(self, x: np.ndarray, clip: float | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ParameterError(f"expected {self.dim} features, got {x.shape[-1]}")
        out = (x - self.mean) / np.maximum(self.std, self.min_std)
        return np.clip(out, -clip, clip) if clip is not None else out

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.count": np.asarray(self.count, dtype=np.int64),
            f"{prefix}.mean": self.mean,
            f"{prefix}.m2": self.m2,
        }

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        mean = np.asarray(arrays[f"{prefix}.mean"], dtype=float)
        if mean.shape != (self.dim,):
            raise ParameterError("normalizer dimension mismatch")
        self.count = int(arrays[f"{prefix}.count"])
        self.mean = mean.copy()
        self.m2 = np.asarray(arrays[f"{prefix}.m2"], dtype=float).copy()


def normalizer_update(norm: RunningNormalizer, observation) -> RunningNormalizer:
    return norm.update(observation)


def normalize(norm: RunningNormalizer, observation) -> np.ndarray:
    return norm.normalize(observation)


def scale_action(raw, force_limit: float, torque_limit: float) -> ControlInput:
    """Map a [-1, 1] policy output onto the thrust box.

    Six entries map to (force, torque); three entries are the planar
    (f_x, f_y, tau_z) subset with the remaining axes zero.
    """
    if not (force_limit > 0 and torque_limit > 0):
        raise ParameterError("limits must be positive")
    a = np.clip(np.asarray(raw, dtype=float).reshape(-1), -1.0, 1.0)
    if a.size == 6:
        return ControlInput(a[:3] * force_limit, a[3:] * torque_limit)
    if a.size == 3:
        return ControlInput([a[0] * force_limit, a[1] * force_limit, 0.0], [0.0, 0.0, a[2] * torque_limit])
    raise ParameterError(f"action must have 3 or 6 entries, got {a.size}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write named arrays plus a JSON metadata record to an ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__version__"] = np.asarray(CHECKPOINT_VERSION, dtype=np.int64)
    payload["__meta__"] = np.asarray(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k].copy() for k in data.files}
    version = int(arrays.pop("__version__", -1))
    if version != CHECKPOINT_VERSION:
        raise ParameterError(f"unsupported checkpoint version {version}")
    meta = json.loads(str(arrays.pop("__meta__")))
    return arrays, meta
