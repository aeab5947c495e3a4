"""Reorientation poses and the 7-dim latent encoding used by the sampler.

A reorientation pose is a target placement for the in-hand object: a world
position for the object origin plus a rotation, expressed as the *relative*
rotation applied to the object's current orientation.  The diffusion model
works on a flat latent vector

    v = [px, py, pz, qw, qx, qy, qz]

where positions are normalized per axis into [-1, 1] over the workspace and
the quaternion is kept in canonical form (unit norm, qw >= 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotations import quat_canonical

LATENT_DIM = 7


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned region of valid placement positions, in meters."""

    lo: tuple[float, float, float] = (-0.75, -0.75, 0.0)
    hi: tuple[float, float, float] = (0.75, 0.75, 0.4)

    def __post_init__(self):
        for a, b in zip(self.lo, self.hi):
            if not b > a:
                raise ValueError(f"workspace bounds must satisfy hi > lo, got {self.lo} {self.hi}")

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    def normalize(self, position: np.ndarray) -> np.ndarray:
        """Map world positions (meters) to [-1, 1]^3, broadcast over rows."""
        p = np.asarray(position, dtype=np.float64)
        return 2.0 * (p - self.lo_arr) / (self.hi_arr - self.lo_arr) - 1.0

    def denormalize(self, coords: np.ndarray) -> np.ndarray:
        """Inverse of normalize."""
        c = np.asarray(coords, dtype=np.float64)
        return self.lo_arr + 0.5 * (c + 1.0) * (self.hi_arr - self.lo_arr)

    def contains(self, position: np.ndarray) -> np.ndarray:
        p = np.asarray(position, dtype=np.float64)
        return np.all((p >= self.lo_arr) & (p <= self.hi_arr), axis=-1)


@dataclass(frozen=True)
class ReorientPose:
    """World position plus relative reorientation rotation (w, x, y, z)."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        quat = quat_canonical(np.asarray(self.quaternion, dtype=np.float64).reshape(4))
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quaternion", quat)

    def to_latent(self, workspace: Workspace) -> np.ndarray:
        return np.concatenate([workspace.normalize(self.position), self.quaternion])

    @staticmethod
    def from_latent(latent: np.ndarray, workspace: Workspace) -> "ReorientPose":
        v = np.asarray(latent, dtype=np.float64).reshape(LATENT_DIM)
        coords = np.clip(v[:3], -1.0, 1.0)
        quat = v[3:]
        if np.linalg.norm(quat) < 1e-8:
            quat = np.array([1.0, 0.0, 0.0, 0.0])
        return ReorientPose(workspace.denormalize(coords), quat_canonical(quat))


def latents_from_poses(poses: list[ReorientPose], workspace: Workspace) -> np.ndarray:
    """Stack poses into an (N, 7) latent batch."""
    if not poses:
        return np.zeros((0, LATENT_DIM))
    return np.stack([p.to_latent(workspace) for p in poses])


def poses_from_latents(latents: np.ndarray, workspace: Workspace) -> list[ReorientPose]:
    latents = np.asarray(latents, dtype=np.float64)
    return [ReorientPose.from_latent(v, workspace) for v in latents.reshape(-1, LATENT_DIM)]
