"""Pydantic request/response models for the HTTP service.

Scenes travel as the same JSON documents the on-disk format uses
(scene_to_dict / scene_from_dict), so a scene saved by the CLI can be
posted back verbatim.  Poses mirror the CLI's poses.json layout.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    bundle_loaded: bool
    bundle_dir: str | None = None


class ScheduleResponse(BaseModel):
    kind: str
    num_steps: int
    beta: list[float]
    alpha: list[float]
    alpha_bar: list[float]


class SceneGenerateRequest(BaseModel):
    seed: int = Field(ge=0)


class SceneGenerateResponse(BaseModel):
    scene: dict


class GraspsRequest(BaseModel):
    scene: dict
    n_pick: int = Field(default=8, ge=1, le=256)
    n_place: int = Field(default=8, ge=1, le=256)
    seed: int = Field(default=0, ge=0)


class GraspVector(BaseModel):
    """Grasp as a 3-point plus 3-normal feature vector."""

    point: list[float]
    normal: list[float]


class GraspsResponse(BaseModel):
    pick: list[GraspVector]
    place: list[GraspVector]


class TaskPredictRequest(BaseModel):
    scene: dict


class TaskPredictResponse(BaseModel):
    object_id: int
    place_x: float
    place_y: float
    shelf_z: float
    shelf_level: int
    place_yaw: float
    mask: list[list[bool]]
    phi: list[float]


class PoseSampleRequest(BaseModel):
    scene: dict | None = None
    phi: list[float] | None = None
    seed: int = Field(default=0, ge=0)
    n_chains: int | None = Field(default=None, ge=1, le=512)
    num_sample_steps: int | None = Field(default=None, ge=1)
    guided: bool = True
    top_n: int | None = Field(default=None, ge=1)


class PoseOut(BaseModel):
    position: list[float]
    quaternion: list[float]
    m1: float
    m2: float
    combined: float


class PoseSampleResponse(BaseModel):
    poses: list[PoseOut]
    wall_time_s: float
    num_sample_steps: int
    guided: bool
    dropped_chains: int
    config_hash: str


class FeasibilityScoreRequest(BaseModel):
    stage: int = Field(ge=1, le=2)
    grasps: list[GraspVector]
    poses: list[PoseOut] | None = None
    latents: list[list[float]] | None = None
    phi: list[float] | None = None
    scene: dict | None = None


class FeasibilityScoreResponse(BaseModel):
    scores: list[list[float]]
