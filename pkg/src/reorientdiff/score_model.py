"""Conditional noise-prediction network.

The denoiser eps_theta(x_k, k, phi) consumes the 7-dim pose latent, a
sinusoidal embedding of the step index, and a task condition vector phi.
For classifier-free guidance the model owns a dedicated learned null
condition; during training each sample's phi is replaced by it with
probability p_drop, and at sampling time the same vector provides the
unconditional branch (Ho & Salimans, 2022).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .diffusion import forward_sample, time_embedding
from .model_io import load_arrays, save_arrays
from .net import FeedForwardNet
from .pose import LATENT_DIM
from .schedule import NoiseSchedule
from .trainer import TrainerConfig, train

FILE_KIND = "score_model"


class ScoreModel:
    def __init__(
        self,
        x_dim: int = LATENT_DIM,
        phi_dim: int = 32,
        time_dim: int = 16,
        hidden: tuple[int, ...] = (128, 128, 128),
        activation: str = "silu",
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.x_dim = int(x_dim)
        self.phi_dim = int(phi_dim)
        self.time_dim = int(time_dim)
        in_dim = self.x_dim + self.time_dim + self.phi_dim
        self.net = FeedForwardNet(
            [in_dim, *hidden, self.x_dim], activation=activation, head="linear", rng=rng
        )
        self.null_cond = rng.normal(0.0, 0.1, size=self.phi_dim)

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"net.{k}": v for k, v in self.net.params.items()}
        out["null_cond"] = self.null_cond
        return out

    def _assemble(
        self,
        x: np.ndarray,
        k: np.ndarray,
        phi: np.ndarray | None,
        null_mask: np.ndarray | None,
    ) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.x_dim:
            raise ValueError(f"expected (N, {self.x_dim}) latents, got {x.shape}")
        n = x.shape[0]
        k_arr = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
        emb = time_embedding(k_arr, self.time_dim)
        if phi is None:
            cond = np.broadcast_to(self.null_cond, (n, self.phi_dim)).copy()
            mask = np.ones(n, dtype=bool)
        else:
            phi = np.asarray(phi, dtype=np.float64)
            if phi.ndim == 1:
                phi = np.broadcast_to(phi, (n, self.phi_dim)).copy()
            cond = phi.astype(np.float64).copy()
            mask = np.zeros(n, dtype=bool)
            if null_mask is not None:
                mask = np.asarray(null_mask, dtype=bool).reshape(n)
                cond[mask] = self.null_cond
        return np.concatenate([x, emb, cond], axis=1), mask

    def forward(
        self,
        x: np.ndarray,
        k: np.ndarray | int,
        phi: np.ndarray | None = None,
        null_mask: np.ndarray | None = None,
        want_cache: bool = False,
    ):
        """Predict eps for a batch; rows under null_mask use the null condition."""
        inp, mask = self._assemble(x, np.asarray(k), phi, null_mask)
        if want_cache:
            out, cache = self.net.forward(inp, want_cache=True)
            cache["null_rows"] = mask
            return out, cache
        return self.net.forward(inp)

    def backward(self, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for a cached forward pass.

        Gradient flowing into condition slots of null rows is accumulated
        into the null condition vector.
        """
        net_grads, grad_in = self.net.backward(cache, grad_out)
        grads = {f"net.{k}": v for k, v in net_grads.items()}
        cond_grad = grad_in[:, self.x_dim + self.time_dim:]
        null_rows = cache["null_rows"]
        grads["null_cond"] = cond_grad[null_rows].sum(axis=0) if np.any(null_rows) else np.zeros(
            self.phi_dim
        )
        return grads

    def save(self, path: str | Path) -> None:
        meta = {
            "x_dim": self.x_dim,
            "phi_dim": self.phi_dim,
            "time_dim": self.time_dim,
            "layer_sizes": self.net.layer_sizes,
            "activation": self.net.activation,
        }
        arrays = dict(self.params)
        save_arrays(path, FILE_KIND, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ScoreModel":
        kind, meta, arrays = load_arrays(path)
        if kind != FILE_KIND:
            raise ValueError(f"{path}: expected kind {FILE_KIND!r}, got {kind!r}")
        hidden = tuple(meta["layer_sizes"][1:-1])
        model = cls(
            x_dim=meta.get("x_dim", LATENT_DIM),
            phi_dim=meta["phi_dim"],
            time_dim=meta["time_dim"],
            hidden=hidden,
            activation=meta["activation"],
        )
        for name in model.net.params:
            model.net.params[name] = arrays[f"net.{name}"].copy()
        model.null_cond = arrays["null_cond"].copy()
        return model


def train_score_model(
    model: ScoreModel,
    latents: np.ndarray,
    phis: np.ndarray,
    schedule: NoiseSchedule,
    config: TrainerConfig,
    p_drop: float = 0.1,
) -> list[float]:
    """Denoising training with classifier-free condition dropout.

    latents: (N, 7) clean pose latents; phis: (N, phi_dim) conditions.
    Per minibatch each sample gets an independent step k ~ U{1..K} and
    fresh noise; with probability p_drop its condition is swapped for the
    learned null vector (which then receives gradient).
    """
    latents = np.asarray(latents, dtype=np.float64)
    phis = np.asarray(phis, dtype=np.float64)
    if latents.shape[0] != phis.shape[0]:
        raise ValueError("latents and phis must align")
    params = model.params

    def loss_fn(batch: np.ndarray, rng: np.random.Generator):
        x0 = latents[batch]
        phi = phis[batch]
        n = x0.shape[0]
        k = rng.integers(1, schedule.num_steps + 1, size=n)
        eps = rng.standard_normal(x0.shape)
        x_k = forward_sample(schedule, x0, k, eps)
        drop = rng.uniform(size=n) < p_drop
        pred, cache = model.forward(x_k, k, phi, null_mask=drop, want_cache=True)
        resid = pred - eps
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        grads = model.backward(cache, 2.0 * resid / n)
        return loss, grads

    return train(params, loss_fn, latents.shape[0], config)
