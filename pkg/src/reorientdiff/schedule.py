"""Diffusion noise schedules.

A schedule over K steps fixes per-step noise rates beta_k for k = 1..K and
the cumulative products

    alpha_k = 1 - beta_k,    alpha_bar_k = prod_{i<=k} alpha_i,

with the convention alpha_bar_0 = 1 (step 0 is the clean sample).  The
cosine schedule follows Nichol & Dhariwal (2021): alpha_bar_k = f(k)/f(0)
with f(k) = cos^2(((k/K + s) / (1 + s)) * pi/2) and offset s = 0.008; the
implied betas are clipped to at most 0.999.  The scaled-linear alternative
spaces beta linearly between 1e-4 * (1000/K) and 0.02 * (1000/K), clipped
to (0, 0.999].
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

COSINE_S = 0.008
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule arrays, all indexed by step k.

    betas has length K + 1 with betas[0] = 0 as a placeholder so that
    betas[k] is the rate used when stepping from k-1 to k.  alpha_bars
    likewise has length K + 1 with alpha_bars[0] = 1.
    """

    kind: str
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        K = self.num_steps
        if K < 1:
            raise ValueError("schedule needs at least one step")
        for name in ("betas", "alphas", "alpha_bars"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (K + 1,):
                raise ValueError(f"{name} must have shape ({K + 1},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        if self.alpha_bars[0] != 1.0:
            raise ValueError("alpha_bars[0] must be exactly 1")
        if np.any(self.betas[1:] <= 0.0) or np.any(self.betas[1:] > BETA_MAX):
            raise ValueError(f"betas must lie in (0, {BETA_MAX}]")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def sqrt_alpha_bars(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars)

    @property
    def sqrt_one_minus_alpha_bars(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars)

    def to_csv(self) -> str:
        """Serialize as CSV with header k,beta,alpha,alpha_bar."""
        buf = io.StringIO()
        buf.write("k,beta,alpha,alpha_bar\n")
        for k in range(self.num_steps + 1):
            buf.write(
                f"{k},{self.betas[k]:.17g},{self.alphas[k]:.17g},{self.alpha_bars[k]:.17g}\n"
            )
        return buf.getvalue()


def _cosine_alpha_bars(num_steps: int) -> np.ndarray:
    k = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((k / num_steps + COSINE_S) / (1.0 + COSINE_S)) * np.pi / 2.0) ** 2
    return f / f[0]


def make_schedule(kind: str, num_steps: int) -> NoiseSchedule:
    """Build a schedule of the given kind ("cosine" or "scaled_linear")."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if kind == "cosine":
        bars = _cosine_alpha_bars(num_steps)
        betas = 1.0 - bars[1:] / bars[:-1]
        betas = np.clip(betas, 0.0, BETA_MAX)
    elif kind == "scaled_linear":
        scale = 1000.0 / num_steps
        betas = np.linspace(1e-4 * scale, 0.02 * scale, num_steps)
        betas = np.clip(betas, 1e-12, BETA_MAX)
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alphas[0] = 1.0
    alpha_bars = np.cumprod(alphas)
    alpha_bars[0] = 1.0
    return NoiseSchedule(
        kind=kind, num_steps=num_steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars
    )
