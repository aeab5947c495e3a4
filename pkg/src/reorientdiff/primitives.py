"""Rigid primitive shapes and the fixed object catalog.

Objects are boxes (half-extents hx, hy, hz) or z-axis cylinders (radius,
half-height) in their own frame, with the frame origin at the geometric
center.  The catalog is a fixed list of eight shapes; per-shape masses
come from the experiment config.  Reorientation targets are restricted to
catalog entries whose side faces are tall enough to be resolved by the
heightmap when tilted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feasibility import GraspPose
from .rotations import quat_rotate, quat_to_matrix


@dataclass(frozen=True)
class PrimitiveSpec:
    """Catalog entry: a box or cylinder with a name and index."""

    name: str
    kind: str
    dims: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "box":
            if len(self.dims) != 3:
                raise ValueError("box dims are (hx, hy, hz)")
        elif self.kind == "cylinder":
            if len(self.dims) != 2:
                raise ValueError("cylinder dims are (radius, half_height)")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")

    @property
    def bounding_radius(self) -> float:
        if self.kind == "box":
            return float(np.linalg.norm(self.dims))
        r, hh = self.dims
        return float(np.hypot(r, hh))

    @property
    def footprint_radius(self) -> float:
        """Horizontal reach when upright."""
        if self.kind == "box":
            return float(np.hypot(self.dims[0], self.dims[1]))
        return float(self.dims[0])

    @property
    def side_half_height(self) -> float:
        """Half-extent along the frame z axis (controls tilted-face visibility)."""
        return float(self.dims[2] if self.kind == "box" else self.dims[1])


CATALOG: tuple[PrimitiveSpec, ...] = (
    PrimitiveSpec("box_cube", "box", (0.03, 0.03, 0.03)),
    PrimitiveSpec("box_flat", "box", (0.05, 0.05, 0.015)),
    PrimitiveSpec("box_tall", "box", (0.025, 0.025, 0.06)),
    PrimitiveSpec("box_slab", "box", (0.06, 0.04, 0.02)),
    PrimitiveSpec("box_bar", "box", (0.07, 0.025, 0.045)),
    PrimitiveSpec("cyl_disc", "cylinder", (0.045, 0.015)),
    PrimitiveSpec("cyl_tall", "cylinder", (0.022, 0.06)),
    PrimitiveSpec("cyl_squat", "cylinder", (0.035, 0.035)),
)

CATALOG_INDEX = {spec.name: i for i, spec in enumerate(CATALOG)}

DEFAULT_MASSES = {
    "box_cube": 0.12,
    "box_flat": 0.10,
    "box_tall": 0.15,
    "box_slab": 0.20,
    "box_bar": 0.18,
    "cyl_disc": 0.09,
    "cyl_tall": 0.14,
    "cyl_squat": 0.16,
}

# shapes whose tilted side face spans enough heightmap cells to grasp
TARGET_MIN_SIDE_HALF_HEIGHT = 0.03


def target_eligible_ids() -> list[int]:
    return [
        i for i, s in enumerate(CATALOG) if s.side_half_height >= TARGET_MIN_SIDE_HALF_HEIGHT
    ]


def side_face_directions(spec: PrimitiveSpec, n_azimuths: int = 4) -> list[np.ndarray]:
    """Canonical horizontal face directions in the object frame.

    For boxes these are the four +-x/+-y face normals; for cylinders,
    radial directions at n_azimuths evenly spaced azimuths.
    """
    if spec.kind == "box":
        return [
            np.array([1.0, 0.0, 0.0]),
            np.array([-1.0, 0.0, 0.0]),
            np.array([0.0, 1.0, 0.0]),
            np.array([0.0, -1.0, 0.0]),
        ]
    angles = 2.0 * np.pi * np.arange(n_azimuths) / n_azimuths
    return [np.array([np.cos(a), np.sin(a), 0.0]) for a in angles]


@dataclass(frozen=True)
class PlacedObject:
    """A catalog primitive at a world pose (position of the frame origin)."""

    spec: PrimitiveSpec
    position: np.ndarray
    quaternion: np.ndarray
    mass: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(
            self, "quaternion", np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        )


def support_offset(spec: PrimitiveSpec, quaternion: np.ndarray) -> float:
    """Height of the frame origin above the lowest point at this orientation.

    Placing the origin at z = support_offset rests the object exactly on
    the table plane z = 0.
    """
    rot = quat_to_matrix(quaternion)
    if spec.kind == "box":
        # lowest corner: support is sum_i |e_z . R e_i| * h_i
        return float(np.sum(np.abs(rot[2, :]) * np.asarray(spec.dims)))
    r, hh = spec.dims
    axis_z = abs(rot[2, 2])
    radial = np.sqrt(max(0.0, 1.0 - axis_z * axis_z))
    return float(hh * axis_z + r * radial)


def sample_face_grasps(
    obj: PlacedObject,
    face: np.ndarray,
    n: int,
    rng: np.random.Generator,
    margin: float = 0.2,
) -> list[GraspPose]:
    """Grasps on a canonical side face, expressed in world coordinates.

    face is an object-frame direction from side_face_directions.  Points
    are jittered uniformly over the face with a relative inset margin; the
    grasp normal is the outward face normal at the object's current
    orientation.  For cylinders the face direction selects a patch of the
    curved surface around that azimuth.
    """
    face = np.asarray(face, dtype=np.float64)
    grasps = []
    if obj.spec.kind == "box":
        hx, hy, hz = obj.spec.dims
        axis = int(np.argmax(np.abs(face)))
        sign = float(np.sign(face[axis]))
        half = (hx, hy, hz)
        others = [i for i in range(3) if i != axis]
        for _ in range(n):
            p_obj = np.zeros(3)
            p_obj[axis] = sign * half[axis]
            for i in others:
                p_obj[i] = rng.uniform(-1.0 + margin, 1.0 - margin) * half[i]
            point = obj.position + quat_rotate(obj.quaternion, p_obj)
            normal = quat_rotate(obj.quaternion, face / np.linalg.norm(face))
            grasps.append(GraspPose(point, normal))
    else:
        r, hh = obj.spec.dims
        phi0 = float(np.arctan2(face[1], face[0]))
        for _ in range(n):
            phi = phi0 + rng.uniform(-0.15, 0.15)
            z = rng.uniform(-1.0 + margin, 1.0 - margin) * hh
            p_obj = np.array([r * np.cos(phi), r * np.sin(phi), z])
            n_obj = np.array([np.cos(phi), np.sin(phi), 0.0])
            point = obj.position + quat_rotate(obj.quaternion, p_obj)
            normal = quat_rotate(obj.quaternion, n_obj)
            grasps.append(GraspPose(point, normal))
    return grasps
