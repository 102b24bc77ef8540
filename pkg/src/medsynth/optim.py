"""Adam, minibatch sampling, and the training loops shared by every network."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .nn import ParameterStore
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    d_steps_per_g_step: int = 1
    lambda_l1: float = 100.0
    image_size: int = 32
    noise_dim: int = 64

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("lr must be > 0 and betas in [0, 1)")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.lambda_l1 < 0:
            raise ConfigError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        n = self.image_size
        if n < 16 or n & (n - 1):
            raise ConfigError(f"image_size must be a power of two >= 16, got {n}")
        if self.noise_dim < 1:
            raise ConfigError("noise_dim must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, ParameterStore):
        return list(params.params.items())
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    named = _named(params)
    for name, p in named:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in named:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def minibatches(n_items: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Seeded permutation of ``range(n_items)`` chunked into full batches.

    The trailing partial batch is dropped so every loss average is over
    exactly ``batch_size`` samples.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if batch_size > n_items:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n_items}")
    order = make_rng(seed, f"minibatch/{epoch}").permutation(n_items)
    for start in range(0, n_items - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def _take(data, idx):
    if isinstance(data, (tuple, list)):
        return tuple(np.asarray(a)[idx] for a in data)
    return np.asarray(data)[idx]


def _length(data) -> int:
    return len(data[0]) if isinstance(data, (tuple, list)) else len(data)


def _checked(loss: Tensor, what: str, epoch: int, batch: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"{what} is non-finite at epoch {epoch}, batch {batch}", epoch, batch)
    return value


LossFn = Callable[[tuple | np.ndarray, np.random.Generator], Tensor]


def train_adversarial(g_params: ParameterStore, d_params: ParameterStore, d_loss_fn: LossFn,
                      g_loss_fn: LossFn, data, config: TrainConfig,
                      on_epoch: Callable[[int, dict], None] | None = None) -> dict:
    """Alternate discriminator and generator updates over minibatches.

    Each loss function receives the batch and a generator seeded from
    (config.seed, epoch, batch, role) and returns a scalar loss. Per batch,
    ``d_steps_per_g_step`` discriminator updates run before one generator
    update. Returns per-epoch mean losses.
    """
    g_state = AdamState.from_config(config)
    d_state = AdamState.from_config(config)
    history = {"d_loss": [], "g_loss": []}
    n = _length(data)
    for epoch in range(config.epochs):
        d_sum = g_sum = 0.0
        count = 0
        for b, idx in enumerate(minibatches(n, config.batch_size, config.seed, epoch)):
            batch = _take(data, idx)
            try:
                for k in range(config.d_steps_per_g_step):
                    rng = make_rng(config.seed, f"d/{epoch}/{b}/{k}")
                    d_loss = d_loss_fn(batch, rng)
                    d_val = _checked(d_loss, "discriminator loss", epoch, b)
                    d_params.zero_grad()
                    d_loss.backward()
                    adam_step(d_params, d_state)
                    g_params.zero_grad()
                rng = make_rng(config.seed, f"g/{epoch}/{b}")
                g_loss = g_loss_fn(batch, rng)
                g_val = _checked(g_loss, "generator loss", epoch, b)
                g_params.zero_grad()
                g_loss.backward()
                adam_step(g_params, g_state)
                d_params.zero_grad()
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            d_sum += d_val
            g_sum += g_val
            count += 1
        history["d_loss"].append(d_sum / max(count, 1))
        history["g_loss"].append(g_sum / max(count, 1))
        log.debug("epoch %d d_loss=%.4f g_loss=%.4f", epoch, history["d_loss"][-1], history["g_loss"][-1])
        if on_epoch is not None:
            on_epoch(epoch, history)
    return history


def train_supervised(params: ParameterStore, loss_fn: LossFn, data, config: TrainConfig,
                     on_epoch: Callable[[int, dict], None] | None = None) -> dict:
    """Plain minibatch Adam on a single network; returns per-epoch mean loss."""
    state = AdamState.from_config(config)
    history = {"loss": []}
    n = _length(data)
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(minibatches(n, config.batch_size, config.seed, epoch)):
            try:
                loss = loss_fn(_take(data, idx), make_rng(config.seed, f"s/{epoch}/{b}"))
                total += _checked(loss, "loss", epoch, b)
                params.zero_grad()
                loss.backward()
                adam_step(params, state)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            count += 1
        history["loss"].append(total / max(count, 1))
        if on_epoch is not None:
            on_epoch(epoch, history)
    return history


def total_steps(n_items: int, config: TrainConfig) -> int:
    """Generator (or supervised) updates performed by one training run."""
    return config.epochs * (n_items // config.batch_size)
