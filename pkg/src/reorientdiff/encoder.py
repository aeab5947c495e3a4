"""Task encoder: observation + descriptor -> condition vector phi.

The trunk maps the flattened coarse heightmap, the target footprint
channel, and the task descriptor to a condition vector consumed by the
score and feasibility models.  Three auxiliary heads train the trunk to
ground the task: an object identity classifier, a placement regressor
(position and yaw), and a 16x16 target segmentation mask over the
observation grid.  At prediction time the placement height snaps to the
nearest shelf level and the yaw to the nearest of the discrete placement
orientations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model_io import load_arrays, save_arrays
from .net import FeedForwardNet
from .scene import DESCRIPTOR_DIM, ENCODER_GRID
from .trainer import TrainerConfig, train

FILE_KIND = "task_encoder"
# heightmap channel + footprint channel + descriptor
OBS_DIM = 2 * ENCODER_GRID * ENCODER_GRID + DESCRIPTOR_DIM
N_OBJECT_CLASSES = 8
PLACE_DIM = 5  # x, y, z, cos yaw, sin yaw


@dataclass
class TaskPrediction:
    object_id: int
    place_x: float
    place_y: float
    shelf_z_raw: float
    shelf_z: float
    shelf_level: int
    yaw_raw: float
    place_yaw: float
    mask16: np.ndarray
    phi: np.ndarray


class TaskEncoder:
    def __init__(
        self,
        phi_dim: int = 48,
        trunk_hidden: tuple[int, ...] = (128, 128),
        mask_hidden: tuple[int, ...] = (64,),
        activation: str = "silu",
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.phi_dim = int(phi_dim)
        self.trunk = FeedForwardNet(
            [OBS_DIM, *trunk_hidden, self.phi_dim], activation=activation, rng=rng
        )
        self.id_head = FeedForwardNet([self.phi_dim, N_OBJECT_CLASSES], rng=rng)
        self.place_head = FeedForwardNet([self.phi_dim, PLACE_DIM], rng=rng)
        self.mask_head = FeedForwardNet(
            [self.phi_dim, *mask_hidden, ENCODER_GRID * ENCODER_GRID],
            activation=activation,
            head="sigmoid",
            rng=rng,
        )

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in self._nets():
            for k, v in net.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def _nets(self):
        return (
            ("trunk", self.trunk),
            ("id", self.id_head),
            ("place", self.place_head),
            ("mask", self.mask_head),
        )

    def phi(self, obs: np.ndarray) -> np.ndarray:
        """Condition vectors for a batch of observations."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        return self.trunk.forward(obs)

    def head_outputs(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(phi, id logits, place regression, mask probabilities)."""
        phi = self.phi(obs)
        return (
            phi,
            self.id_head.forward(phi),
            self.place_head.forward(phi),
            self.mask_head.forward(phi),
        )

    def predict_task(
        self,
        obs: np.ndarray,
        shelf_levels: tuple[float, ...],
        n_yaw_bins: int = 8,
        mask_threshold: float = 0.5,
    ) -> TaskPrediction:
        """Single-observation prediction with height and yaw snapping."""
        phi, logits, place, mask = self.head_outputs(np.atleast_2d(obs))
        levels = np.asarray(shelf_levels, dtype=np.float64)
        z_raw = float(place[0, 2])
        level = int(np.argmin(np.abs(levels - z_raw)))
        yaw_raw = float(np.mod(np.arctan2(place[0, 4], place[0, 3]), 2.0 * np.pi))
        bins = 2.0 * np.pi * np.arange(n_yaw_bins) / n_yaw_bins
        # circular distance to each discrete orientation
        dist = np.abs(np.angle(np.exp(1j * (bins - yaw_raw))))
        snapped_yaw = float(bins[int(np.argmin(dist))])
        return TaskPrediction(
            object_id=int(np.argmax(logits[0])),
            place_x=float(place[0, 0] * 0.75),
            place_y=float(place[0, 1] * 0.75),
            shelf_z_raw=z_raw,
            shelf_z=float(levels[level]),
            shelf_level=level,
            yaw_raw=yaw_raw,
            place_yaw=snapped_yaw,
            mask16=(mask[0].reshape(ENCODER_GRID, ENCODER_GRID) > mask_threshold),
            phi=phi[0],
        )

    def save(self, path: str | Path) -> None:
        meta = {
            "phi_dim": self.phi_dim,
            "trunk_layers": self.trunk.layer_sizes,
            "mask_layers": self.mask_head.layer_sizes,
            "activation": self.trunk.activation,
        }
        save_arrays(path, FILE_KIND, meta, dict(self.params))

    @classmethod
    def load(cls, path: str | Path) -> "TaskEncoder":
        kind, meta, arrays = load_arrays(path)
        if kind != FILE_KIND:
            raise ValueError(f"{path}: expected kind {FILE_KIND!r}, got {kind!r}")
        enc = cls(
            phi_dim=meta["phi_dim"],
            trunk_hidden=tuple(meta["trunk_layers"][1:-1]),
            mask_hidden=tuple(meta["mask_layers"][1:-1]),
            activation=meta["activation"],
        )
        for prefix, net in enc._nets():
            for name in net.params:
                net.params[name] = arrays[f"{prefix}.{name}"].copy()
        return enc


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class EncoderLabels:
    """Supervision targets aligned with an observation batch."""

    object_id: np.ndarray
    place: np.ndarray
    mask: np.ndarray


def train_encoder(
    encoder: TaskEncoder,
    observations: np.ndarray,
    labels: EncoderLabels,
    config: TrainerConfig,
    mask_weight: float = 1.0,
    place_weight: float = 10.0,
    mask_pos_weight: float = 3.0,
) -> list[float]:
    """Train trunk and heads jointly: CE(id) + MSE(place) + weighted BCE(mask).

    The place target's height component is in meters, so its squared error
    is small next to a 256-cell mask loss; place_weight rebalances that.
    mask_pos_weight upweights occupied cells, which are a minority of the
    grid.
    """
    obs = np.asarray(observations, dtype=np.float64)
    ids = np.asarray(labels.object_id, dtype=np.int64)
    place = np.asarray(labels.place, dtype=np.float64)
    mask = np.asarray(labels.mask, dtype=np.float64)
    n_total = obs.shape[0]
    if not (ids.shape[0] == place.shape[0] == mask.shape[0] == n_total):
        raise ValueError("label arrays must align with observations")
    onehot = np.zeros((n_total, N_OBJECT_CLASSES))
    onehot[np.arange(n_total), ids] = 1.0
    params = encoder.params

    def loss_fn(batch: np.ndarray, rng: np.random.Generator):
        x = obs[batch]
        n = x.shape[0]
        phi, t_cache = encoder.trunk.forward(x, want_cache=True)
        logits, i_cache = encoder.id_head.forward(phi, want_cache=True)
        pl, p_cache = encoder.place_head.forward(phi, want_cache=True)
        mk, m_cache = encoder.mask_head.forward(phi, want_cache=True)

        p = _softmax(logits)
        y_id = onehot[batch]
        ce = float(-np.mean(np.sum(y_id * np.log(np.maximum(p, 1e-300)), axis=1)))
        y_pl = place[batch]
        mse = float(np.mean(np.sum((pl - y_pl) ** 2, axis=1)))
        y_mk = mask[batch]
        bce = float(
            -np.mean(
                np.sum(
                    mask_pos_weight * y_mk * np.log(mk) + (1 - y_mk) * np.log(1 - mk),
                    axis=1,
                )
            )
        )
        loss = ce + place_weight * mse + mask_weight * bce

        gi, phi_gi = encoder.id_head.backward(i_cache, (p - y_id) / n)
        gp, phi_gp = encoder.place_head.backward(p_cache, place_weight * 2.0 * (pl - y_pl) / n)
        gm_out = mask_weight * (-mask_pos_weight * y_mk / mk + (1 - y_mk) / (1 - mk)) / n
        gm, phi_gm = encoder.mask_head.backward(m_cache, gm_out)
        gt, _ = encoder.trunk.backward(t_cache, phi_gi + phi_gp + phi_gm)

        grads = {}
        for prefix, g in (("trunk", gt), ("id", gi), ("place", gp), ("mask", gm)):
            for k, v in g.items():
                grads[f"{prefix}.{k}"] = v
        return loss, grads

    return train(params, loss_fn, n_total, config)
