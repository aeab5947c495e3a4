"""Forward diffusion process and the denoising training objective.

The forward process corrupts a clean latent x0 at step k via

    x_k = sqrt(alpha_bar_k) * x0 + sqrt(1 - alpha_bar_k) * eps,
    eps ~ N(0, I),

so Var[x_k] interpolates between the data variance and identity.  The
denoiser eps_theta is trained with the standard noise-prediction loss
E ||eps - eps_theta(x_k, k, cond)||^2 (Ho et al., 2020), averaged over
samples; each sample contributes its full squared 7-dim residual norm.
"""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule


def forward_sample(
    schedule: NoiseSchedule,
    x0: np.ndarray,
    k: np.ndarray | int,
    eps: np.ndarray,
) -> np.ndarray:
    """Draw x_k given clean x0 and pre-drawn standard normal eps.

    x0 and eps must have matching shape (N, D) or (D,); k is an int or an
    (N,) int array of steps in [0, K].
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    k_arr = np.asarray(k, dtype=np.int64)
    if np.any(k_arr < 0) or np.any(k_arr > schedule.num_steps):
        raise ValueError("step index out of range")
    a = schedule.sqrt_alpha_bars[k_arr]
    b = schedule.sqrt_one_minus_alpha_bars[k_arr]
    if x0.ndim == 2 and a.ndim == 1:
        a = a[:, None]
        b = b[:, None]
    return a * x0 + b * eps


def score_from_eps(schedule: NoiseSchedule, eps: np.ndarray, k: np.ndarray | int) -> np.ndarray:
    """Convert predicted noise to the score of the marginal at step k.

    grad_x log p_k(x) = -eps / sqrt(1 - alpha_bar_k); undefined at k = 0.
    """
    k_arr = np.asarray(k, dtype=np.int64)
    if np.any(k_arr == 0):
        raise ValueError("score is undefined at step 0")
    denom = np.sqrt(1.0 - schedule.alpha_bars[k_arr])
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2 and denom.ndim == 1:
        denom = denom[:, None]
    return -eps / denom


def score_matching_loss(eps_true: np.ndarray, eps_pred: np.ndarray) -> float:
    """Mean over samples of the squared residual norm ||eps - eps_pred||^2."""
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_true.shape != eps_pred.shape:
        raise ValueError("shape mismatch")
    diff = eps_true - eps_pred
    if diff.ndim == 1:
        return float(np.sum(diff * diff))
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def time_embedding(k: np.ndarray | int, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of the integer step index.

    The first dim//2 channels are sin(k * w_i), the rest cos(k * w_i), with
    frequencies w_i log-spaced from 1 down to 1/max_period (Vaswani et al.,
    2017).  dim must be even.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    k_arr = np.atleast_1d(np.asarray(k, dtype=np.float64))
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = k_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if np.isscalar(k) or np.asarray(k).ndim == 0:
        return emb[0]
    return emb
