"""Synthetic tabletop scenes, reorientation tasks, and the success oracle.

A scene holds a pile of catalog primitives on the table plane observed by
a top-down heightmap.  One object is the reorientation target: it rests
tilted toward one of its canonical side faces (the task face), while
distractors stand upright.  The task asks for the object to be lifted,
reoriented, and set down at an intermediate pose from which a final
placement is possible.

Success is decided analytically in two stages.  Let R be the pose's
relative rotation and n a grasp's outward world normal at the current
object orientation:

  stage 1 (reorient):  angle(R n, z_up) <= theta1  and the pose position
                       lies inside an annular placement sector;
  stage 2 (re-grasp):  angle(R n, z_up) <= theta2.

Stage 1 applies to grasps used to execute the reorientation (the arm must
end holding the object from above inside its reachable sector); stage 2
applies to grasps used for the final pick, which must face up at the
reoriented pose.  The sector's azimuth is centered on the direction the
target currently leans toward, so it is scene-specific.
"""

from __future__ import annotations

import json
import base64
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .feasibility import GraspPose
from .heightmap import (
    EDGE_THRESHOLD,
    Heightmap,
    downsample_mean,
    laplacian_edge_mask,
    render_heightmap,
    sample_pick_grasps,
)
from .pose import ReorientPose, Workspace
from .primitives import (
    CATALOG,
    CATALOG_INDEX,
    DEFAULT_MASSES,
    PlacedObject,
    sample_face_grasps,
    side_face_directions,
    support_offset,
    target_eligible_ids,
)
from .rotations import (
    angle_between,
    quat_from_axis_angle,
    quat_multiply,
    quat_rotate,
)

DESCRIPTOR_DIM = 24
HEIGHT_SCALE = 5.0
ENCODER_GRID = 16
Z_UP = np.array([0.0, 0.0, 1.0])


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleSpec:
    """Analytic thresholds defining task success."""

    theta1: float = 0.3
    theta2: float = 0.2
    r_min: float = 0.3
    r_max: float = 0.6
    z_min: float = 0.02
    z_max: float = 0.35
    sector_half_width: float = 1.0

    def to_dict(self) -> dict:
        return {
            "theta1": self.theta1,
            "theta2": self.theta2,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "z_min": self.z_min,
            "z_max": self.z_max,
            "sector_half_width": self.sector_half_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSpec":
        return cls(**d)


@dataclass(frozen=True)
class SceneParams:
    """Knobs for scene generation."""

    grid_size: int = 64
    cell_size: float = 0.0065
    n_objects_min: int = 2
    n_objects_max: int = 4
    placement_radius: float = 0.115
    tilt_min: float = 0.3
    tilt_max: float = 0.5
    min_target_cells: int = 12
    min_face_cells: int = 2
    face_angle_tol: float = 0.35
    max_attempts: int = 100
    shelf_levels: tuple[float, ...] = (0.1, 0.25, 0.4)
    shelf_y: float = 0.65
    place_x_range: float = 0.5
    n_yaw_bins: int = 8

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["shelf_levels"] = list(self.shelf_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        d = dict(d)
        if "shelf_levels" in d:
            d["shelf_levels"] = tuple(d["shelf_levels"])
        return cls(**d)


@dataclass(frozen=True)
class TaskSpec:
    """Everything the oracle and the encoder need to know about one task."""

    target_index: int
    object_id: int
    face: np.ndarray
    d_world: np.ndarray
    sector_azimuth: float
    oracle: OracleSpec
    place_x: float
    place_y: float
    shelf_level: int
    shelf_z: float
    place_yaw: float

    def __post_init__(self):
        object.__setattr__(self, "face", np.asarray(self.face, dtype=np.float64).reshape(3))
        object.__setattr__(self, "d_world", np.asarray(self.d_world, dtype=np.float64).reshape(3))

    def to_dict(self) -> dict:
        return {
            "target_index": self.target_index,
            "object_id": self.object_id,
            "face": [float(v) for v in self.face],
            "d_world": [float(v) for v in self.d_world],
            "sector_azimuth": self.sector_azimuth,
            "oracle": self.oracle.to_dict(),
            "place_x": self.place_x,
            "place_y": self.place_y,
            "shelf_level": self.shelf_level,
            "shelf_z": self.shelf_z,
            "place_yaw": self.place_yaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["oracle"] = OracleSpec.from_dict(d["oracle"])
        return cls(**d)


@dataclass
class Scene:
    objects: list[PlacedObject]
    target_index: int
    task: TaskSpec
    heightmap: Heightmap
    owner: np.ndarray
    seed: int

    @property
    def target(self) -> PlacedObject:
        return self.objects[self.target_index]

    def target_mask(self) -> np.ndarray:
        return self.owner == self.target_index


def in_sector(task: TaskSpec, positions: np.ndarray) -> np.ndarray:
    """Whether world positions lie in the task's annular placement sector."""
    p = np.asarray(positions, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    o = task.oracle
    r = np.hypot(p[:, 0], p[:, 1])
    az = np.arctan2(p[:, 1], p[:, 0])
    delta = np.angle(np.exp(1j * (az - task.sector_azimuth)))
    ok = (
        (r >= o.r_min)
        & (r <= o.r_max)
        & (p[:, 2] >= o.z_min)
        & (p[:, 2] <= o.z_max)
        & (np.abs(delta) <= o.sector_half_width)
    )
    return bool(ok[0]) if single else ok


def rotated_normal_angle(quats: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Angle between R(q) n and vertical up, broadcasting (N, 4) x (G, 3) -> (N, G)."""
    quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    rotated = quat_rotate(quats[:, None, :], normals[None, :, :])
    return angle_between(rotated, Z_UP)


def oracle_stage_success(
    task: TaskSpec,
    grasp_normals: np.ndarray,
    positions: np.ndarray,
    quats: np.ndarray,
    stage: int,
) -> np.ndarray:
    """Vectorized oracle: (N poses, G grasps) boolean matrix."""
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    theta = task.oracle.theta1 if stage == 1 else task.oracle.theta2
    ang = rotated_normal_angle(quats, grasp_normals)
    ok = ang <= theta
    if stage == 1:
        ok = ok & in_sector(task, positions)[:, None]
    return ok


def oracle_evaluate(task: TaskSpec, grasp: GraspPose, pose: ReorientPose, stage: int) -> bool:
    """Single-case oracle decision."""
    out = oracle_stage_success(
        task, grasp.normal[None, :], pose.position[None, :], pose.quaternion[None, :], stage
    )
    return bool(out[0, 0])


def double_success(
    task: TaskSpec,
    pick_normals: np.ndarray,
    place_normals: np.ndarray,
    positions: np.ndarray,
    quats: np.ndarray,
) -> np.ndarray:
    """Candidate poses for which both stages have at least one passing grasp."""
    s1 = oracle_stage_success(task, pick_normals, positions, quats, 1).any(axis=1)
    s2 = oracle_stage_success(task, place_normals, positions, quats, 2).any(axis=1)
    return s1 & s2


def cap_fraction(theta: float) -> float:
    """Probability that a uniformly random rotation maps a fixed unit vector
    into the cone of half-angle theta about vertical: the spherical cap
    fraction (1 - cos theta) / 2."""
    return (1.0 - np.cos(theta)) / 2.0


def sector_position_fraction(oracle: OracleSpec, workspace: Workspace) -> float:
    """Fraction of the workspace volume inside the placement sector."""
    lo, hi = workspace.lo_arr, workspace.hi_arr
    area_xy = (hi[0] - lo[0]) * (hi[1] - lo[1])
    sector_area = oracle.sector_half_width * (oracle.r_max**2 - oracle.r_min**2)
    depth = hi[2] - lo[2]
    z_span = min(oracle.z_max, hi[2]) - max(oracle.z_min, lo[2])
    return float(sector_area / area_xy * z_span / depth)


def _tilted_quaternion(face: np.ndarray, yaw: float, tilt: float) -> np.ndarray:
    """Orientation leaning toward the world direction of the given face.

    Starting upright at the given yaw, the object rotates by the tilt
    angle about the horizontal axis that lifts the face direction upward.
    """
    q_yaw = quat_from_axis_angle(Z_UP, yaw)
    n0 = quat_rotate(q_yaw, face)
    n0_h = np.array([n0[0], n0[1], 0.0])
    norm = np.linalg.norm(n0_h)
    if norm < 1e-9:
        raise ValueError("face must be horizontal in the object frame")
    # rotating about n0 x z_up by +tilt lifts n0 toward vertical
    axis = np.cross(n0_h / norm, Z_UP)
    return quat_multiply(quat_from_axis_angle(axis, tilt), q_yaw)


def _face_cells(scene_mask: np.ndarray, hm: Heightmap, d_world: np.ndarray, tol: float):
    normals, valid = hm.normals()
    edges = laplacian_edge_mask(normals)
    ok = scene_mask & valid & ~edges
    ang = angle_between(normals, d_world)
    return ok & (ang <= tol)


def generate_scene(
    params: SceneParams,
    oracle: OracleSpec,
    seed: int,
    masses: dict[str, float] | None = None,
) -> Scene:
    """Generate a verified scene.

    Retries with fresh per-attempt randomness until the rendered scene
    passes visibility checks (target sufficiently visible; its task face
    exposes graspable cells).  Raises SceneGenerationError echoing the
    seed after max_attempts failures.
    """
    masses = masses if masses is not None else dict(DEFAULT_MASSES)
    eligible = target_eligible_ids()
    for attempt in range(params.max_attempts):
        rng = np.random.default_rng([seed, attempt])
        scene = _attempt_scene(params, oracle, rng, masses, eligible, seed)
        if scene is not None:
            return scene
    raise SceneGenerationError(
        f"could not generate a valid scene for seed {seed} after {params.max_attempts} attempts"
    )


def _attempt_scene(params, oracle, rng, masses, eligible, seed) -> Scene | None:
    n_objects = int(rng.integers(params.n_objects_min, params.n_objects_max + 1))
    target_id = int(rng.choice(eligible))
    spec = CATALOG[target_id]
    faces = side_face_directions(spec)
    face = faces[int(rng.integers(len(faces)))]
    yaw = float(rng.uniform(0.0, 2.0 * np.pi))
    tilt = float(rng.uniform(params.tilt_min, params.tilt_max))
    q_cur = _tilted_quaternion(face, yaw, tilt)
    xy = rng.uniform(-params.placement_radius, params.placement_radius, size=2)
    z = support_offset(spec, q_cur)
    target = PlacedObject(spec, np.array([xy[0], xy[1], z]), q_cur, masses[spec.name])

    objects = [target]
    for _ in range(n_objects - 1):
        placed = _place_distractor(params, rng, objects, masses)
        if placed is not None:
            objects.append(placed)
    if len(objects) < params.n_objects_min:
        return None

    # order randomized so the target is not always object 0
    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]
    target_index = int(np.nonzero(order == 0)[0][0])

    hm, owner = render_heightmap(objects, params.grid_size, params.cell_size)
    mask = owner == target_index
    if int(mask.sum()) < params.min_target_cells:
        return None
    d_world = quat_rotate(q_cur, face)
    face_cells = _face_cells(mask, hm, d_world, params.face_angle_tol)
    if int(face_cells.sum()) < params.min_face_cells:
        return None

    shelf_level = int(rng.integers(len(params.shelf_levels)))
    task = TaskSpec(
        target_index=target_index,
        object_id=target_id,
        face=face,
        d_world=d_world,
        sector_azimuth=float(np.arctan2(d_world[1], d_world[0])),
        oracle=oracle,
        place_x=float(rng.uniform(-params.place_x_range, params.place_x_range)),
        place_y=params.shelf_y,
        shelf_level=shelf_level,
        shelf_z=float(params.shelf_levels[shelf_level]),
        place_yaw=float(2.0 * np.pi * rng.integers(params.n_yaw_bins) / params.n_yaw_bins),
    )
    return Scene(
        objects=objects,
        target_index=target_index,
        task=task,
        heightmap=hm,
        owner=owner,
        seed=seed,
    )


def _place_distractor(params, rng, placed: list[PlacedObject], masses) -> PlacedObject | None:
    for _ in range(30):
        obj_id = int(rng.integers(len(CATALOG)))
        spec = CATALOG[obj_id]
        yaw = float(rng.uniform(0.0, 2.0 * np.pi))
        quat = quat_from_axis_angle(Z_UP, yaw)
        xy = rng.uniform(-params.placement_radius, params.placement_radius, size=2)
        clearance_ok = True
        for other in placed:
            min_dist = spec.footprint_radius + other.spec.bounding_radius + 0.005
            if np.hypot(xy[0] - other.position[0], xy[1] - other.position[1]) < min_dist:
                clearance_ok = False
                break
        if clearance_ok:
            z = support_offset(spec, quat)
            return PlacedObject(spec, np.array([xy[0], xy[1], z]), quat, masses[spec.name])
    return None


def scene_pick_grasps(
    scene: Scene,
    n: int,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    edge_threshold: float = EDGE_THRESHOLD,
) -> list[GraspPose]:
    """Pick grasps on the target's visible surface (ground-truth mask by default).

    The draw is stratified for surface coverage: a quarter of the budget
    is reserved for cells whose normal aligns with the tilted task face,
    the rest comes from the whole surface.  Without this, random draws on
    a mostly-flat object can miss the small exposed side face entirely.
    """
    if mask is None:
        mask = scene.target_mask()
    mask = np.asarray(mask, dtype=bool)
    face_cells = _face_cells(mask, scene.heightmap, scene.task.d_world, 0.35)
    n_face = max(1, n // 4)
    grasps = sample_pick_grasps(scene.heightmap, face_cells, n_face, rng, edge_threshold)
    rest = sample_pick_grasps(
        scene.heightmap, mask, n - len(grasps), rng, edge_threshold
    )
    return grasps + rest


def scene_place_grasps(scene: Scene, n: int, rng: np.random.Generator) -> list[GraspPose]:
    """Grasps on the task face used for the final pick after reorientation."""
    return sample_face_grasps(scene.target, scene.task.face, n, rng)


def encode_descriptor(scene: Scene) -> np.ndarray:
    """Fixed-width task descriptor: object identity, final placement, shape cues."""
    task = scene.task
    spec = scene.target.spec
    vec = np.zeros(DESCRIPTOR_DIM)
    vec[task.object_id] = 1.0
    vec[8] = task.place_x / 0.75
    vec[9] = task.place_y / 0.75
    vec[10 + task.shelf_level] = 1.0
    vec[13] = np.cos(task.place_yaw)
    vec[14] = np.sin(task.place_yaw)
    if spec.kind == "box":
        dims = spec.dims
    else:
        dims = (spec.dims[0], spec.dims[0], spec.dims[1])
    vec[15:18] = np.asarray(dims) * 10.0
    vec[18] = scene.target.mass
    vec[19] = 1.0 if spec.kind == "cylinder" else 0.0
    vec[20] = scene.target.position[0] / 0.2
    vec[21] = scene.target.position[1] / 0.2
    axis = quat_rotate(scene.target.quaternion, np.array([0.0, 0.0, 1.0]))
    vec[22:24] = axis[:2]
    return vec


def decode_descriptor(vec: np.ndarray) -> dict:
    """Recover the task fields encoded by encode_descriptor."""
    vec = np.asarray(vec, dtype=np.float64).reshape(DESCRIPTOR_DIM)
    return {
        "object_id": int(np.argmax(vec[:8])),
        "place_x": float(vec[8] * 0.75),
        "place_y": float(vec[9] * 0.75),
        "shelf_level": int(np.argmax(vec[10:13])),
        "place_yaw": float(np.mod(np.arctan2(vec[14], vec[13]), 2.0 * np.pi)),
        "dims": [float(v) / 10.0 for v in vec[15:18]],
        "mass": float(vec[18]),
        "is_cylinder": bool(vec[19] > 0.5),
        "start_x": float(vec[20] * 0.2),
        "start_y": float(vec[21] * 0.2),
        "tilt_axis_xy": [float(vec[22]), float(vec[23])],
    }


def target_footprint_channel(scene: Scene) -> np.ndarray:
    """16x16 fractional footprint coverage of the target at its current pose.

    Rendered from the target's known pose alone, so distractors never
    contribute.  This mirrors what a manipulation stack knows about the
    object it is tracking, while the mask label is still read off the
    composite scene render.
    """
    factor = scene.heightmap.shape[0] // ENCODER_GRID
    _, owner = render_heightmap(
        [scene.target], scene.heightmap.shape[0], scene.heightmap.cell_size
    )
    return downsample_mean((owner == 0).astype(np.float64), factor)


def encoder_observation(scene: Scene) -> np.ndarray:
    """Concatenated encoder input: heightmap, target footprint, descriptor."""
    factor = scene.heightmap.shape[0] // ENCODER_GRID
    coarse = downsample_mean(scene.heightmap.heights, factor) * HEIGHT_SCALE
    footprint = target_footprint_channel(scene)
    return np.concatenate(
        [coarse.ravel(), footprint.ravel(), encode_descriptor(scene)]
    )


def target_mask_label(scene: Scene) -> np.ndarray:
    """16x16 ground-truth target occupancy used to supervise the mask head."""
    factor = scene.heightmap.shape[0] // ENCODER_GRID
    frac = downsample_mean(scene.target_mask().astype(np.float64), factor)
    return (frac >= 0.5).astype(np.float64)


def scene_to_dict(scene: Scene) -> dict:
    hm = scene.heightmap
    return {
        "format_version": 1,
        "seed": scene.seed,
        "objects": [
            {
                "name": o.spec.name,
                "kind": o.spec.kind,
                "dims": list(o.spec.dims),
                "mass": o.mass,
                "position": [float(v) for v in o.position],
                "quaternion": [float(v) for v in o.quaternion],
            }
            for o in scene.objects
        ],
        "target_index": scene.target_index,
        "task": scene.task.to_dict(),
        "heightmap": {
            "shape": list(hm.shape),
            "cell_size": hm.cell_size,
            "origin": list(hm.origin),
            "dtype": "<f4",
            "data_b64": hm.to_base64(),
        },
        "owner_b64": base64.b64encode(
            np.ascontiguousarray(scene.owner, dtype=np.int8).tobytes()
        ).decode("ascii"),
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("format_version") != 1:
        raise ValueError(f"unsupported scene format version: {d.get('format_version')!r}")
    objects = []
    for o in d["objects"]:
        spec = CATALOG[CATALOG_INDEX[o["name"]]]
        if list(spec.dims) != list(o["dims"]) or spec.kind != o["kind"]:
            raise ValueError(f"object {o['name']} does not match the catalog")
        objects.append(
            PlacedObject(spec, np.asarray(o["position"]), np.asarray(o["quaternion"]), o["mass"])
        )
    hm_d = d["heightmap"]
    hm = Heightmap.from_base64(
        hm_d["data_b64"], tuple(hm_d["shape"]), hm_d["cell_size"], tuple(hm_d["origin"])
    )
    owner = np.frombuffer(
        base64.b64decode(d["owner_b64"].encode("ascii")), dtype=np.int8
    ).astype(np.int32).reshape(hm.shape)
    return Scene(
        objects=objects,
        target_index=d["target_index"],
        task=TaskSpec.from_dict(d["task"]),
        heightmap=hm,
        owner=owner,
        seed=d["seed"],
    )


def save_scene_json(path: str | Path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), sort_keys=True))


def load_scene_json(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
