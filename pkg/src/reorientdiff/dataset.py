"""Dataset generation for the feasibility models and the score model.

Per scene, candidate reorientation poses are proposed with positions
uniform over the workspace and orientations from a two-component mixture:

  - informed: the rotation stands some direction a up vertical, with a
    drawn uniformly from a spherical cap around the target's current lean
    direction, then a uniform yaw about vertical.  These candidates hover
    near the task-relevant ring of rotations.
  - diffuse: same construction but with a drawn from a broad zenith-biased
    family (polar angle uniform in [0, beta_max], azimuth uniform), which
    spreads probability over many rings and supplies hard negatives.

Every candidate is labelled by the analytic oracle against sampled pick
and place grasp sets, giving per-grasp feasibility records for the stage
discriminators; candidates where both stages admit a passing grasp become
training poses for the conditional score model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderLabels, TaskEncoder
from .feasibility import FeasibilityRecord, grasp_features
from .pose import ReorientPose, Workspace
from .rotations import quat_from_axis_angle, quat_multiply, quat_rotate, rotation_between
from .scene import (
    Scene,
    Z_UP,
    encoder_observation,
    oracle_stage_success,
    scene_pick_grasps,
    scene_place_grasps,
    target_mask_label,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetParams:
    n_candidates: int = 267
    informed_frac: float = 0.5
    cap_width: float = 0.35
    diffuse_beta_max: float = 1.92
    n_pick_grasps: int = 8
    n_place_grasps: int = 8
    records_per_candidate: int = 3
    target_pos_frac: float = 0.4
    max_records_per_stage: int = 12000

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetParams":
        return cls(**d)


def _cap_direction(rng: np.random.Generator, center: np.ndarray, width: float) -> np.ndarray:
    """Uniform draw from the spherical cap of angular radius width around center."""
    cos_w = np.cos(width)
    z = rng.uniform(cos_w, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    s = np.sqrt(max(0.0, 1.0 - z * z))
    local = np.array([s * np.cos(phi), s * np.sin(phi), z])
    q = rotation_between(Z_UP, center)
    return quat_rotate(q, local)


def _zenith_biased_direction(rng: np.random.Generator, beta_max: float) -> np.ndarray:
    beta = rng.uniform(0.0, beta_max)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.sin(beta) * np.cos(phi), np.sin(beta) * np.sin(phi), np.cos(beta)])


def candidate_orientation(
    rng: np.random.Generator, d_world: np.ndarray, params: DatasetParams
) -> np.ndarray:
    """One candidate relative rotation: stand a sampled direction up, then yaw."""
    if rng.uniform() < params.informed_frac:
        a = _cap_direction(rng, d_world, params.cap_width)
    else:
        a = _zenith_biased_direction(rng, params.diffuse_beta_max)
    q_align = rotation_between(a, Z_UP)
    q_yaw = quat_from_axis_angle(Z_UP, rng.uniform(0.0, 2.0 * np.pi))
    return quat_multiply(q_yaw, q_align)


def propose_candidates(
    scene: Scene, workspace: Workspace, params: DatasetParams, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate (positions (N, 3), quaternions (N, 4)) for one scene."""
    n = params.n_candidates
    positions = rng.uniform(workspace.lo_arr, workspace.hi_arr, size=(n, 3))
    quats = np.stack(
        [candidate_orientation(rng, scene.task.d_world, params) for _ in range(n)]
    )
    return positions, quats


@dataclass
class ReorientDataset:
    """Everything the downstream training stages consume."""

    records1: list[FeasibilityRecord] = field(default_factory=list)
    records2: list[FeasibilityRecord] = field(default_factory=list)
    latents: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    phis: np.ndarray = field(default_factory=lambda: np.zeros((0, 32)))
    stats: dict = field(default_factory=dict)


def build_encoder_dataset(scenes: list[Scene]) -> tuple[np.ndarray, EncoderLabels]:
    """Observation/label arrays for encoder training."""
    obs = np.stack([encoder_observation(s) for s in scenes])
    ids = np.asarray([s.task.object_id for s in scenes], dtype=np.int64)
    place = np.stack(
        [
            [
                s.task.place_x / 0.75,
                s.task.place_y / 0.75,
                s.task.shelf_z,
                np.cos(s.task.place_yaw),
                np.sin(s.task.place_yaw),
            ]
            for s in scenes
        ]
    )
    masks = np.stack([target_mask_label(s).ravel() for s in scenes])
    return obs, EncoderLabels(object_id=ids, place=place, mask=masks)


def _balance_records(
    records: list[FeasibilityRecord],
    rng: np.random.Generator,
    target_pos_frac: float,
    max_records: int,
) -> list[FeasibilityRecord]:
    """Subsample negatives so positives make up about target_pos_frac."""
    pos = [r for r in records if r.label == 1]
    neg = [r for r in records if r.label == 0]
    if not pos or not neg:
        return records[:max_records]
    want_neg = int(round(len(pos) * (1.0 - target_pos_frac) / target_pos_frac))
    if want_neg < len(neg):
        idx = rng.choice(len(neg), size=want_neg, replace=False)
        neg = [neg[i] for i in idx]
    out = pos + neg
    order = rng.permutation(len(out))
    out = [out[i] for i in order]
    return out[:max_records]


def generate_reorient_dataset(
    scenes: list[Scene],
    encoder: TaskEncoder,
    workspace: Workspace,
    params: DatasetParams,
    seed: int,
) -> ReorientDataset:
    """Label candidates against the oracle and assemble training sets."""
    ds = ReorientDataset()
    all_latents: list[np.ndarray] = []
    all_phis: list[np.ndarray] = []
    n_double = 0
    n_cand = 0
    sector_hits = 0
    for s_i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, s_i])
        phi = encoder.phi(encoder_observation(scene)[None, :])[0]
        picks = scene_pick_grasps(scene, params.n_pick_grasps, rng)
        places = scene_place_grasps(scene, params.n_place_grasps, rng)
        if not picks or not places:
            logger.warning("scene %d yielded no grasps; skipping", s_i)
            continue
        pick_feats = grasp_features(picks)
        place_feats = grasp_features(places)
        positions, quats = propose_candidates(scene, workspace, params, rng)
        n_cand += positions.shape[0]
        s1 = oracle_stage_success(
            scene.task, pick_feats[:, 3:], positions, quats, 1
        )
        s2 = oracle_stage_success(
            scene.task, place_feats[:, 3:], positions, quats, 2
        )
        latents = np.stack(
            [ReorientPose(p, q).to_latent(workspace) for p, q in zip(positions, quats)]
        )
        for stage, feats, labels, bucket in (
            (1, pick_feats, s1, ds.records1),
            (2, place_feats, s2, ds.records2),
        ):
            n_grasps = feats.shape[0]
            for c in range(positions.shape[0]):
                chosen = rng.choice(
                    n_grasps, size=min(params.records_per_candidate, n_grasps), replace=False
                )
                for g in chosen:
                    bucket.append(
                        FeasibilityRecord(
                            stage=stage,
                            grasp_point=feats[g, :3],
                            grasp_normal=feats[g, 3:],
                            pose_latent=latents[c],
                            phi=phi,
                            label=int(labels[c, g]),
                        )
                    )
        both = s1.any(axis=1) & s2.any(axis=1)
        n_double += int(both.sum())
        sector_hits += int(s1.any(axis=1).sum())
        if np.any(both):
            all_latents.append(latents[both])
            all_phis.append(np.tile(phi, (int(both.sum()), 1)))

    balance_rng = np.random.default_rng([seed, 999_983])
    ds.records1 = _balance_records(
        ds.records1, balance_rng, params.target_pos_frac, params.max_records_per_stage
    )
    ds.records2 = _balance_records(
        ds.records2, balance_rng, params.target_pos_frac, params.max_records_per_stage
    )
    if all_latents:
        ds.latents = np.concatenate(all_latents)
        ds.phis = np.concatenate(all_phis)
    else:
        ds.phis = np.zeros((0, encoder.phi_dim))
    ds.stats = {
        "n_scenes": len(scenes),
        "n_candidates": n_cand,
        "n_double_success": n_double,
        "double_rate": n_double / max(n_cand, 1),
        "stage1_any_rate": sector_hits / max(n_cand, 1),
        "n_records1": len(ds.records1),
        "n_records2": len(ds.records2),
        "records1_pos_frac": float(np.mean([r.label for r in ds.records1]) if ds.records1 else 0),
        "records2_pos_frac": float(np.mean([r.label for r in ds.records2]) if ds.records2 else 0),
    }
    return ds
