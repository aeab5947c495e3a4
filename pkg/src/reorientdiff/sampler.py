"""DDIM sampling with classifier-free and feasibility-gradient guidance.

The reverse chain visits a decreasing sequence of step indices and applies
the deterministic DDIM update (Song et al., 2021)

    x_prev = sqrt(abar_prev) * q0_hat + sqrt(1 - abar_prev) * eps,

where q0_hat = (x_k - sqrt(1 - abar_k) * eps) / sqrt(abar_k) is the clean
sample implied by the current noise estimate.  The noise estimate is built
in two stages:

 1. classifier-free mixing of the conditional and null-condition branches,
    eps_tilde = eps_c + w_c * (eps_c - eps_u);
 2. feasibility refinement, eps_k = eps_tilde - sqrt(1 - abar_k) * g_k,
    where g_k is the gradient of a feasibility cost evaluated at q0_hat.

The cost is sum_i w_i * (1 - M_i)^2 with M_i the per-stage feasibility
score maximized over that stage's grasp set; the maximizing grasp is
re-selected at every step.  eps_tilde is treated as a constant when
differentiating (stop-gradient), so the chain rule contributes only the
explicit 1/sqrt(abar_k) factor from q0_hat.  Before scoring, q0_hat is
clamped to a fixed box; components that were clamped pass zero gradient,
which in particular switches guidance off early in the chain where q0_hat
is far outside the data range.  The applied guidance vector is norm-capped
and perturbed with noise of scale proportional to its own norm, using
standard normal draws pre-drawn per (chain, step) so that guided and
unguided runs from the same seed stay paired.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .feasibility import FeasibilityModel
from .pose import LATENT_DIM, ReorientPose, Workspace, poses_from_latents
from .schedule import NoiseSchedule
from .score_model import ScoreModel

logger = logging.getLogger(__name__)

X0_CLIP = 1.5


@dataclass(frozen=True)
class GuidanceConfig:
    """Weights and stabilization knobs for the guided sampler."""

    w_c: float = 2.0
    w1: float = 1.5
    w2: float = 1.5
    enabled: bool = True
    noise_scale: float = 0.1
    max_norm: float = 10.0
    x0_clip: float = X0_CLIP

    def stage_weights(self) -> tuple[float, float]:
        return (self.w1, self.w2)


@dataclass
class SamplerOutput:
    """Final chains sorted by combined heuristic score (best first)."""

    latents: np.ndarray
    chain_indices: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    combined: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    dropped: list[int] = field(default_factory=list)
    wall_time_s: float = 0.0

    def poses(self, workspace: Workspace) -> list[ReorientPose]:
        return poses_from_latents(self.latents, workspace)


def sample_stride(num_steps: int, num_sample_steps: int) -> np.ndarray:
    """Step indices visited by the chain, from K down to 0 inclusive.

    The K+1 grid points are thinned to num_sample_steps+1 evenly spaced
    values (rounded to integers), so num_sample_steps == K visits every
    step and smaller values stride through the schedule.
    """
    if not 1 <= num_sample_steps <= num_steps:
        raise ValueError("num_sample_steps must be in [1, num_steps]")
    ks = np.round(np.linspace(num_steps, 0, num_sample_steps + 1)).astype(np.int64)
    if ks[0] != num_steps or ks[-1] != 0 or np.any(np.diff(ks) >= 0):
        raise AssertionError("stride construction failed")
    return ks


def cf_guided_eps(
    model: ScoreModel,
    x: np.ndarray,
    k: int | np.ndarray,
    phi: np.ndarray,
    w_c: float,
) -> np.ndarray:
    """Classifier-free guided noise estimate (two network evaluations)."""
    eps_c = model.forward(x, k, phi)
    eps_u = model.forward(x, k, phi=None)
    return eps_c + w_c * (eps_c - eps_u)


def estimate_x0(
    schedule: NoiseSchedule, x: np.ndarray, k: int, eps: np.ndarray
) -> np.ndarray:
    """Clean-sample estimate implied by a noise estimate at step k >= 1."""
    if k < 1 or k > schedule.num_steps:
        raise ValueError(f"step must be in [1, {schedule.num_steps}], got {k}")
    a = schedule.sqrt_alpha_bars[k]
    b = schedule.sqrt_one_minus_alpha_bars[k]
    return (np.asarray(x, dtype=np.float64) - b * np.asarray(eps, dtype=np.float64)) / a


def ddim_step(
    schedule: NoiseSchedule, x: np.ndarray, k: int, k_prev: int, eps: np.ndarray
) -> np.ndarray:
    """Deterministic DDIM update from step k to k_prev < k."""
    if not 0 <= k_prev < k:
        raise ValueError(f"need 0 <= k_prev < k, got k_prev={k_prev} k={k}")
    q0 = estimate_x0(schedule, x, k, eps)
    a_prev = schedule.sqrt_alpha_bars[k_prev]
    b_prev = schedule.sqrt_one_minus_alpha_bars[k_prev]
    return a_prev * q0 + b_prev * np.asarray(eps, dtype=np.float64)


def heuristic_score(m: np.ndarray | float) -> np.ndarray | float:
    """Map a feasibility score to the selection heuristic exp(-(1-m)^2)."""
    m = np.asarray(m, dtype=np.float64)
    out = np.exp(-((1.0 - m) ** 2))
    return float(out) if out.ndim == 0 else out


def max_feasibility(
    model: FeasibilityModel,
    grasps: np.ndarray,
    poses: np.ndarray,
    phi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Best score over a grasp set, per pose row.

    grasps: (G, 6); poses: (C, 7); returns (scores (C,), argmax (C,)).
    Ties resolve to the lowest grasp index.
    """
    grasps = np.asarray(grasps, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64)
    c, g = poses.shape[0], grasps.shape[0]
    if g == 0:
        raise ValueError("empty grasp set")
    rep_grasps = np.tile(grasps, (c, 1))
    rep_poses = np.repeat(poses, g, axis=0)
    scores = model.score(rep_grasps, rep_poses, phi).reshape(c, g)
    best = np.argmax(scores, axis=1)
    return scores[np.arange(c), best], best


def feasibility_guidance_term(
    schedule: NoiseSchedule,
    x: np.ndarray,
    k: int,
    eps_tilde: np.ndarray,
    models: tuple[FeasibilityModel, ...],
    grasp_sets: tuple[np.ndarray, ...],
    phi: np.ndarray,
    weights: tuple[float, ...],
    x0_clip: float = X0_CLIP,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the feasibility objective with respect to x_k.

    Computes g_k = -beta_k * grad_x sum_i w_i * (1 - M_i)^2 under the
    stop-gradient convention (eps_tilde held constant), with M_i the
    grasp-set maximum of model i at the clamped q0_hat.  Returns
    (g (C, 7), stage_scores (C, len(models))).
    """
    if len(models) != len(grasp_sets) or len(models) != len(weights):
        raise ValueError("models, grasp_sets and weights must align")
    x = np.asarray(x, dtype=np.float64)
    q0_raw = estimate_x0(schedule, x, k, eps_tilde)
    q0 = np.clip(q0_raw, -x0_clip, x0_clip)
    gate = (np.abs(q0_raw) < x0_clip).astype(np.float64)
    beta = schedule.betas[k]
    inv_sqrt_abar = 1.0 / schedule.sqrt_alpha_bars[k]
    g = np.zeros_like(x)
    stage_scores = np.zeros((x.shape[0], len(models)))
    for i, (model, grasps, w) in enumerate(zip(models, grasp_sets, weights)):
        scores, best = max_feasibility(model, grasps, q0, phi)
        stage_scores[:, i] = scores
        sel_grasps = np.asarray(grasps, dtype=np.float64)[best]
        m, dpose = model.score_with_pose_grad(sel_grasps, q0, phi)
        # -beta * d/dx (1 - M)^2 = 2 beta (1 - M) dM/dq0 * dq0/dx
        g += (2.0 * beta * w * inv_sqrt_abar) * (1.0 - m)[:, None] * (dpose * gate)
    return g, stage_scores


def _chain_rngs(seed: int, n_chains: int) -> list[np.random.Generator]:
    return [np.random.default_rng([int(seed), c]) for c in range(n_chains)]


def sample(
    model: ScoreModel,
    schedule: NoiseSchedule,
    phi: np.ndarray,
    n_chains: int,
    seed: int,
    num_sample_steps: int | None = None,
    guidance: GuidanceConfig | None = None,
    feasibility: tuple[FeasibilityModel, FeasibilityModel] | None = None,
    grasp_sets: tuple[np.ndarray, np.ndarray] | None = None,
    snapshot_steps: tuple[int, ...] = (),
    workspace: Workspace | None = None,
) -> SamplerOutput:
    """Run n_chains reverse chains in parallel and rank the results.

    Each chain c draws its initial latent and all pre-drawn guidance noise
    from an independent generator keyed by (seed, c), so a chain's result
    does not depend on how many chains run alongside it.  Chains that go
    non-finite are dropped (and logged).  When feasibility models are
    given the final latents are scored by the combined heuristic
    h(M1) * h(M2) and sorted best-first with chain index as tie-break;
    otherwise scores are zero and chain order is kept.
    """
    t0 = time.perf_counter()
    guidance = guidance if guidance is not None else GuidanceConfig()
    if num_sample_steps is None:
        num_sample_steps = schedule.num_steps
    use_guidance = guidance.enabled and feasibility is not None
    if use_guidance and grasp_sets is None:
        raise ValueError("guidance needs grasp sets")
    dim = model.x_dim
    ks = sample_stride(schedule.num_steps, num_sample_steps)
    n_trans = len(ks) - 1

    rngs = _chain_rngs(seed, n_chains)
    x = np.stack([r.standard_normal(dim) for r in rngs])
    noise = np.stack([r.standard_normal((n_trans, dim)) for r in rngs])

    snapshots: dict[int, np.ndarray] = {}
    if int(schedule.num_steps) in snapshot_steps:
        snapshots[int(schedule.num_steps)] = x.copy()
    alive = np.ones(n_chains, dtype=bool)

    for i in range(n_trans):
        k, k_prev = int(ks[i]), int(ks[i + 1])
        eps_tilde = cf_guided_eps(model, x, k, phi, guidance.w_c)
        if use_guidance:
            g, _ = feasibility_guidance_term(
                schedule,
                x,
                k,
                eps_tilde,
                feasibility,
                grasp_sets,
                phi,
                guidance.stage_weights(),
                guidance.x0_clip,
            )
            norms = np.linalg.norm(g, axis=1)
            if guidance.max_norm > 0:
                scale = np.minimum(1.0, guidance.max_norm / np.maximum(norms, 1e-300))
                g = g * scale[:, None]
                norms = norms * scale
            g = g + guidance.noise_scale * norms[:, None] * noise[:, i, :]
            eps_ref = eps_tilde - schedule.sqrt_one_minus_alpha_bars[k] * g
        else:
            eps_ref = eps_tilde
        x = ddim_step(schedule, x, k, k_prev, eps_ref)
        finite = np.all(np.isfinite(x), axis=1)
        newly_dead = alive & ~finite
        if np.any(newly_dead):
            for c in np.nonzero(newly_dead)[0]:
                logger.warning("chain %d went non-finite at step %d; dropping", c, k_prev)
            alive &= finite
            x[~alive] = 0.0
        if k_prev in snapshot_steps and k_prev != 0:
            snapshots[k_prev] = x.copy()

    if 0 in snapshot_steps:
        snapshots[0] = x.copy()

    kept = np.nonzero(alive)[0]
    latents = x[kept]
    if feasibility is not None and grasp_sets is not None and latents.shape[0] > 0:
        if workspace is not None and dim == LATENT_DIM:
            # score the snapped pose actually reported, not the raw latent
            scored = np.stack(
                [p.to_latent(workspace) for p in poses_from_latents(latents, workspace)]
            )
        else:
            scored = latents
        m1, _ = max_feasibility(feasibility[0], grasp_sets[0], scored, phi)
        m2, _ = max_feasibility(feasibility[1], grasp_sets[1], scored, phi)
        combined = np.asarray(heuristic_score(m1) * heuristic_score(m2))
        order = np.lexsort((kept, -combined))
    else:
        m1 = np.zeros(latents.shape[0])
        m2 = np.zeros(latents.shape[0])
        combined = np.zeros(latents.shape[0])
        order = np.arange(latents.shape[0])

    dropped = [int(c) for c in np.nonzero(~alive)[0]]
    return SamplerOutput(
        latents=latents[order],
        chain_indices=kept[order],
        m1=np.asarray(m1)[order],
        m2=np.asarray(m2)[order],
        combined=np.asarray(combined)[order],
        snapshots=snapshots,
        dropped=dropped,
        wall_time_s=time.perf_counter() - t0,
    )
