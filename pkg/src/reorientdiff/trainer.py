"""Minibatch training loop with Adam.

The loop is model-agnostic: callers hand over a parameter dict and a loss
closure loss_fn(batch_indices, rng) -> (loss, grads) where grads maps the
same parameter names to gradient arrays.  Gradients are clipped by global
norm before the Adam update (Kingma & Ba, 2015, with bias correction).
Training aborts with TrainingDiverged as soon as a non-finite loss shows
up, so silent NaN runs cannot happen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .net import global_norm, zeros_like_params


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    clip_norm: float = 10.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


class AdamOptimizer:
    """Adam state for one parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainerConfig):
        self.config = config
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        norm = global_norm(grads)
        scale = 1.0
        if cfg.clip_norm > 0 and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in params.items():
            g = grads[name] * scale
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


LossFn = Callable[[np.ndarray, np.random.Generator], tuple[float, dict[str, np.ndarray]]]


def train(
    params: dict[str, np.ndarray],
    loss_fn: LossFn,
    n_samples: int,
    config: TrainerConfig,
    callback: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run the minibatch loop in place; returns per-epoch mean losses.

    Batches are index slices of a per-epoch shuffle driven by the config
    seed, so two runs with identical inputs produce identical parameters.
    """
    if n_samples < 1:
        raise ValueError("need at least one training sample")
    rng = np.random.default_rng(config.seed)
    opt = AdamOptimizer(params, config)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples)
        losses = []
        for start in range(0, n_samples, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_fn(batch, rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}")
            opt.step(params, grads)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if callback is not None:
            callback(epoch, mean_loss)
    return history
