"""Feasibility discriminators for the two manipulation stages.

A model M_i(grasp, pose, phi) ∈ (0, 1) scores whether stage i of the
reorientation succeeds when the object is held at the given grasp and
moved to the candidate pose, under task condition phi.  Stage 1 covers
executing the reorientation from the chosen pick grasp; stage 2 covers
re-grasping and final placement.  Grasps enter as 6-dim features: the
world grasp point (meters) and the outward unit surface normal at the
object's current orientation.

The models are trained as binary classifiers on oracle-labelled records
and expose the gradient of their output with respect to the pose latent,
which is what the sampler's feasibility guidance consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model_io import load_arrays, save_arrays
from .net import FeedForwardNet
from .pose import LATENT_DIM, ReorientPose, Workspace
from .trainer import TrainerConfig, train

FILE_KIND = "feasibility_model"
GRASP_DIM = 6


@dataclass(frozen=True)
class GraspPose:
    """A grasp on the object's current surface: world point plus outward normal."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if norm < 1e-9:
            raise ValueError("grasp normal must be nonzero")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n / norm)

    def features(self) -> np.ndarray:
        return np.concatenate([self.point, self.normal])


def grasp_features(grasps: list[GraspPose]) -> np.ndarray:
    """Stack grasps into an (N, 6) feature matrix."""
    if not grasps:
        return np.zeros((0, GRASP_DIM))
    return np.stack([g.features() for g in grasps])


class FeasibilityModel:
    def __init__(
        self,
        stage: int,
        phi_dim: int = 32,
        hidden: tuple[int, ...] = (64, 64),
        activation: str = "silu",
        rng: np.random.Generator | None = None,
    ):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        self.stage = int(stage)
        self.phi_dim = int(phi_dim)
        in_dim = GRASP_DIM + LATENT_DIM + self.phi_dim
        self.net = FeedForwardNet(
            [in_dim, *hidden, 1], activation=activation, head="sigmoid", rng=rng
        )

    def _assemble(self, grasps: np.ndarray, poses: np.ndarray, phi: np.ndarray) -> np.ndarray:
        grasps = np.asarray(grasps, dtype=np.float64)
        poses = np.asarray(poses, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        n = poses.shape[0]
        if grasps.shape != (n, GRASP_DIM):
            raise ValueError(f"grasps must be ({n}, {GRASP_DIM}), got {grasps.shape}")
        if poses.shape[1] != LATENT_DIM:
            raise ValueError(f"poses must be (N, {LATENT_DIM})")
        if phi.ndim == 1:
            phi = np.broadcast_to(phi, (n, self.phi_dim))
        return np.concatenate([grasps, poses, phi], axis=1)

    def score(self, grasps: np.ndarray, poses: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Success probabilities, shape (N,)."""
        return self.net.forward(self._assemble(grasps, poses, phi))[:, 0]

    def score_with_pose_grad(
        self, grasps: np.ndarray, poses: np.ndarray, phi: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Scores plus dM/d(pose latent), shapes (N,) and (N, 7)."""
        inp = self._assemble(grasps, poses, phi)
        out, cache = self.net.forward(inp, want_cache=True)
        _, grad_in = self.net.backward(cache, np.ones_like(out))
        return out[:, 0], grad_in[:, GRASP_DIM:GRASP_DIM + LATENT_DIM]

    def save(self, path: str | Path) -> None:
        meta = {
            "stage": self.stage,
            "phi_dim": self.phi_dim,
            "layer_sizes": self.net.layer_sizes,
            "activation": self.net.activation,
        }
        save_arrays(path, FILE_KIND, meta, dict(self.net.params))

    @classmethod
    def load(cls, path: str | Path) -> "FeasibilityModel":
        kind, meta, arrays = load_arrays(path)
        if kind != FILE_KIND:
            raise ValueError(f"{path}: expected kind {FILE_KIND!r}, got {kind!r}")
        model = cls(
            stage=meta["stage"],
            phi_dim=meta["phi_dim"],
            hidden=tuple(meta["layer_sizes"][1:-1]),
            activation=meta["activation"],
        )
        for name in model.net.params:
            model.net.params[name] = arrays[name].copy()
        return model


@dataclass
class FeasibilityRecord:
    """One labelled training example for a stage discriminator."""

    stage: int
    grasp_point: np.ndarray
    grasp_normal: np.ndarray
    pose_latent: np.ndarray
    phi: np.ndarray
    label: int

    def grasp_feats(self) -> np.ndarray:
        return np.concatenate([self.grasp_point, self.grasp_normal])


def save_records_jsonl(
    path: str | Path, records: list[FeasibilityRecord], workspace: Workspace
) -> None:
    """Write records as JSON Lines with the pose in world coordinates."""
    with open(path, "w") as fh:
        for r in records:
            pose = ReorientPose.from_latent(r.pose_latent, workspace)
            fh.write(
                json.dumps(
                    {
                        "stage": int(r.stage),
                        "grasp": {
                            "point": [float(v) for v in r.grasp_point],
                            "normal": [float(v) for v in r.grasp_normal],
                        },
                        "pose": {
                            "position": [float(v) for v in pose.position],
                            "quaternion": [float(v) for v in pose.quaternion],
                        },
                        "phi": [float(v) for v in r.phi],
                        "label": int(r.label),
                    }
                )
                + "\n"
            )


def load_records_jsonl(path: str | Path, workspace: Workspace) -> list[FeasibilityRecord]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad JSON: {exc}") from exc
            try:
                pose = ReorientPose(
                    np.asarray(obj["pose"]["position"], dtype=np.float64),
                    np.asarray(obj["pose"]["quaternion"], dtype=np.float64),
                )
                records.append(
                    FeasibilityRecord(
                        stage=int(obj["stage"]),
                        grasp_point=np.asarray(obj["grasp"]["point"], dtype=np.float64),
                        grasp_normal=np.asarray(obj["grasp"]["normal"], dtype=np.float64),
                        pose_latent=pose.to_latent(workspace),
                        phi=np.asarray(obj["phi"], dtype=np.float64),
                        label=int(obj["label"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad record: {exc}") from exc
    return records


def records_to_arrays(
    records: list[FeasibilityRecord],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split records into (grasps, poses, phis, labels) arrays."""
    grasps = np.stack([r.grasp_feats() for r in records])
    poses = np.stack([r.pose_latent for r in records])
    phis = np.stack([r.phi for r in records])
    labels = np.asarray([r.label for r in records], dtype=np.float64)
    return grasps, poses, phis, labels


def train_feasibility(
    model: FeasibilityModel,
    records: list[FeasibilityRecord],
    config: TrainerConfig,
) -> list[float]:
    """Fit the discriminator with binary cross-entropy."""
    wrong = [r.stage for r in records if r.stage != model.stage]
    if wrong:
        raise ValueError(f"records for stage {wrong[0]} passed to a stage {model.stage} model")
    grasps, poses, phis, labels = records_to_arrays(records)
    inputs = model._assemble(grasps, poses, phis)

    def loss_fn(batch: np.ndarray, rng: np.random.Generator):
        x = inputs[batch]
        y = labels[batch][:, None]
        n = x.shape[0]
        m, cache = model.net.forward(x, want_cache=True)
        loss = float(-np.mean(y * np.log(m) + (1.0 - y) * np.log(1.0 - m)))
        # d(loss)/dm; the sigmoid backward turns this into the stable (m - y)/n
        grad_out = (m - y) / (m * (1.0 - m)) / n
        grads, _ = model.net.backward(cache, grad_out)
        return loss, grads

    return train(model.net.params, loss_fn, len(records), config)
