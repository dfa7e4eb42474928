"""MLP classifier and generator, seeded init and noise sampling.

Parameters are stored as ``fc{i}.weight`` (fan_in x fan_out) and
``fc{i}.bias`` (1 x fan_out); hidden layers use relu.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .errors import ConfigError, DimensionError
from .nncore import ParameterSet, Tensor


def make_rng(seed: int | None, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` plus optional sub-stream ids.

    ``make_rng(s, 3)`` and ``make_rng(s, 4)`` give independent streams; both
    are reproducible across platforms.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed or 0), *stream])))


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"layer sizes must be >= 1: {self}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.noise_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"layer sizes must be >= 1: {self}")
        if not self.lo < self.hi:
            raise ConfigError(f"generator range needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def layer_dims(self) -> list[int]:
        return [self.noise_dim, *self.hidden_dims, self.output_dim]


def init_network(spec: ClassifierSpec | GeneratorSpec, rng: np.random.Generator) -> ParameterSet:
    """Glorot-uniform weights, zero biases."""
    params = ParameterSet()
    dims = spec.layer_dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.add(f"fc{i}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"fc{i}.bias", np.zeros((1, fan_out)))
    return params


def _mlp(params, n_layers: int, x: Tensor) -> Tensor:
    h = x
    for i in range(n_layers):
        h = nn.add(nn.matmul(h, params[f"fc{i}.weight"]), params[f"fc{i}.bias"])
        if i < n_layers - 1:
            h = nn.relu(h)
    return h


def _resolve(params: ParameterSet | dict, frozen: bool):
    if frozen and isinstance(params, ParameterSet):
        return params.frozen()
    return params


def classifier_logits(params: ParameterSet | dict, spec: ClassifierSpec, x,
                      frozen: bool = False) -> Tensor:
    """Raw logits ``m x K``.  ``frozen`` blocks gradients into the parameters
    while still letting them flow into ``x``."""
    x = nn.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"classifier expects m x {spec.input_dim} input, got {x.shape}")
    return _mlp(_resolve(params, frozen), len(spec.layer_dims) - 1, x)


def predict_proba(params: ParameterSet | dict, spec: ClassifierSpec, x: np.ndarray) -> np.ndarray:
    """Softmax probabilities as a plain array (no graph)."""
    logits = classifier_logits(_resolve(params, True), spec, Tensor(x))
    return nn.softmax(logits).data


def sample_noise(rng: np.random.Generator, batch: int, noise_dim: int) -> Tensor:
    """Standard normal ``batch x noise_dim`` via Box-Muller on the uniform stream."""
    if batch < 1 or noise_dim < 1:
        raise ConfigError(f"noise shape must be positive, got {batch} x {noise_dim}")
    n = batch * noise_dim
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return Tensor(z.reshape(batch, noise_dim))


def generate(params: ParameterSet | dict, spec: GeneratorSpec, z, frozen: bool = False) -> Tensor:
    """Synthetic samples in ``[lo, hi]``: ``lo + (hi - lo) * (tanh(a) + 1) / 2``."""
    z = nn.as_tensor(z)
    if z.data.ndim != 2 or z.shape[1] != spec.noise_dim:
        raise DimensionError(f"generator expects m x {spec.noise_dim} noise, got {z.shape}")
    a = _mlp(_resolve(params, frozen), len(spec.layer_dims) - 1, z)
    half = 0.5 * (spec.hi - spec.lo)
    return nn.scale(nn.tanh(a), half, spec.lo + half, clip=(spec.lo, spec.hi))


def spec_from_params(params: ParameterSet) -> tuple[int, ...]:
    """Layer widths implied by ``fc{i}.weight`` shapes."""
    dims: list[int] = []
    i = 0
    while f"fc{i}.weight" in params:
        w = params[f"fc{i}.weight"].data
        if not dims:
            dims.append(w.shape[0])
        elif w.shape[0] != dims[-1]:
            raise DimensionError(f"fc{i}.weight has fan_in {w.shape[0]}, previous layer gives {dims[-1]}")
        dims.append(w.shape[1])
        i += 1
    if len(dims) < 2:
        raise DimensionError("parameter set has no fc0.weight")
    return tuple(dims)
