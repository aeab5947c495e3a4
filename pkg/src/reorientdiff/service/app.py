"""HTTP service wrapping a trained model bundle.

The service loads a bundle directory (config.json plus the four model
files) given either to create_app() or through the REORIENT_DIFF_BUNDLE
environment variable.  /health always answers; every other endpoint
returns 503 until a bundle is available.  The CLI `serve` subcommand is
a thin uvicorn launcher around create_app.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from ..config import config_hash
from ..evaluate import BundleError, ModelBundle, load_bundle, perceive_scene
from ..pose import ReorientPose
from ..sampler import GuidanceConfig, sample
from ..scene import SceneGenerationError, encoder_observation, generate_scene, scene_from_dict, scene_to_dict
from .schemas import (
    FeasibilityScoreRequest,
    FeasibilityScoreResponse,
    GraspsRequest,
    GraspsResponse,
    GraspVector,
    HealthResponse,
    PoseOut,
    PoseSampleRequest,
    PoseSampleResponse,
    ScheduleResponse,
    SceneGenerateRequest,
    SceneGenerateResponse,
    TaskPredictRequest,
    TaskPredictResponse,
)

logger = logging.getLogger(__name__)

BUNDLE_ENV = "REORIENT_DIFF_BUNDLE"


def _load_optional_bundle(bundle_dir: str | Path | None) -> tuple[ModelBundle | None, str | None]:
    if bundle_dir is None:
        bundle_dir = os.environ.get(BUNDLE_ENV)
    if bundle_dir is None:
        return None, None
    return load_bundle(bundle_dir), str(bundle_dir)


def create_app(bundle_dir: str | Path | None = None) -> FastAPI:
    """Build the service; raises BundleError if a given bundle dir is bad."""
    bundle, resolved = _load_optional_bundle(bundle_dir)
    app = FastAPI(title="reorientdiff", version="0.1.0")
    app.state.bundle = bundle
    app.state.bundle_dir = resolved

    def need_bundle() -> ModelBundle:
        if app.state.bundle is None:
            raise HTTPException(status_code=503, detail="no model bundle loaded; set REORIENT_DIFF_BUNDLE")
        return app.state.bundle

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok",
            bundle_loaded=app.state.bundle is not None,
            bundle_dir=app.state.bundle_dir,
        )

    @app.get("/schedule", response_model=ScheduleResponse)
    def schedule() -> ScheduleResponse:
        b = need_bundle()
        s = b.schedule
        return ScheduleResponse(
            kind=s.kind,
            num_steps=s.num_steps,
            beta=s.betas.tolist(),
            alpha=s.alphas.tolist(),
            alpha_bar=s.alpha_bars.tolist(),
        )

    @app.post("/scenes/generate", response_model=SceneGenerateResponse)
    def scenes_generate(req: SceneGenerateRequest) -> SceneGenerateResponse:
        b = need_bundle()
        cfg = b.config
        try:
            scene = generate_scene(cfg.scene, cfg.oracle, req.seed, cfg.masses)
        except SceneGenerationError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return SceneGenerateResponse(scene=scene_to_dict(scene))

    def _parse_scene(doc: dict):
        try:
            return scene_from_dict(doc)
        except (KeyError, ValueError, TypeError) as exc:
            raise HTTPException(status_code=422, detail=f"bad scene document: {exc}") from exc

    @app.post("/grasps", response_model=GraspsResponse)
    def grasps(req: GraspsRequest) -> GraspsResponse:
        b = need_bundle()
        scene = _parse_scene(req.scene)
        rng = np.random.default_rng(req.seed)
        _, pick_feats, place_feats = perceive_scene(b, scene, rng, req.n_pick, req.n_place)

        def to_vec(f: np.ndarray) -> GraspVector:
            return GraspVector(point=f[:3].tolist(), normal=f[3:].tolist())

        return GraspsResponse(
            pick=[to_vec(f) for f in pick_feats],
            place=[to_vec(f) for f in place_feats],
        )

    @app.post("/tasks/predict", response_model=TaskPredictResponse)
    def tasks_predict(req: TaskPredictRequest) -> TaskPredictResponse:
        b = need_bundle()
        scene = _parse_scene(req.scene)
        cfg = b.config
        pred = b.encoder.predict_task(
            encoder_observation(scene), cfg.scene.shelf_levels, cfg.scene.n_yaw_bins
        )
        return TaskPredictResponse(
            object_id=int(pred.object_id),
            place_x=float(pred.place_x),
            place_y=float(pred.place_y),
            shelf_z=float(pred.shelf_z),
            shelf_level=int(pred.shelf_level),
            place_yaw=float(pred.place_yaw),
            mask=pred.mask16.astype(bool).tolist(),
            phi=pred.phi.tolist(),
        )

    @app.post("/poses/sample", response_model=PoseSampleResponse)
    def poses_sample(req: PoseSampleRequest) -> PoseSampleResponse:
        b = need_bundle()
        cfg = b.config
        if req.scene is None and req.phi is None:
            raise HTTPException(status_code=422, detail="provide a scene or a phi vector")
        grasp_sets = None
        if req.scene is not None:
            scene = _parse_scene(req.scene)
            rng = np.random.default_rng([cfg.seed, req.seed])
            phi, pick_feats, place_feats = perceive_scene(b, scene, rng)
            grasp_sets = (pick_feats, place_feats)
        else:
            phi = np.asarray(req.phi, dtype=np.float64)
            if phi.shape != (b.encoder.phi_dim,):
                raise HTTPException(
                    status_code=422,
                    detail=f"phi must have length {b.encoder.phi_dim}, got {phi.shape}",
                )
        guided = req.guided and grasp_sets is not None
        if req.guided and grasp_sets is None:
            raise HTTPException(status_code=422, detail="guided sampling needs a scene for grasps")
        g = cfg.sampler.guidance
        out = sample(
            b.score,
            b.schedule,
            phi,
            n_chains=req.n_chains if req.n_chains is not None else cfg.sampler.n_chains,
            seed=req.seed,
            num_sample_steps=req.num_sample_steps,
            guidance=GuidanceConfig(
                w_c=g.w_c, w1=g.w1, w2=g.w2, enabled=guided,
                noise_scale=g.noise_scale, max_norm=g.max_norm, x0_clip=g.x0_clip,
            ),
            feasibility=(b.m1, b.m2) if guided else None,
            grasp_sets=grasp_sets if guided else None,
            workspace=cfg.workspace,
        )
        top_n = req.top_n if req.top_n is not None else cfg.sampler.top_n
        poses = out.poses(cfg.workspace)[:top_n]
        items = [
            PoseOut(
                position=p.position.tolist(),
                quaternion=p.quaternion.tolist(),
                m1=float(out.m1[i]),
                m2=float(out.m2[i]),
                combined=float(out.combined[i]),
            )
            for i, p in enumerate(poses)
        ]
        steps = req.num_sample_steps if req.num_sample_steps is not None else b.schedule.num_steps
        return PoseSampleResponse(
            poses=items,
            wall_time_s=out.wall_time_s,
            num_sample_steps=steps,
            guided=guided,
            dropped_chains=len(out.dropped),
            config_hash=config_hash(cfg),
        )

    @app.post("/feasibility/score", response_model=FeasibilityScoreResponse)
    def feasibility_score(req: FeasibilityScoreRequest) -> FeasibilityScoreResponse:
        b = need_bundle()
        cfg = b.config
        model = b.m1 if req.stage == 1 else b.m2
        feats = np.array(
            [list(gv.point) + list(gv.normal) for gv in req.grasps], dtype=np.float64
        )
        if feats.ndim != 2 or feats.shape[1] != 6 or feats.shape[0] == 0:
            raise HTTPException(status_code=422, detail="grasps must be nonempty point+normal pairs")
        norms = np.linalg.norm(feats[:, 3:], axis=1, keepdims=True)
        if np.any(norms < 1e-9):
            raise HTTPException(status_code=422, detail="grasp normals must be nonzero")
        feats[:, 3:] /= norms
        if (req.latents is None) == (req.poses is None):
            raise HTTPException(status_code=422, detail="provide exactly one of latents or poses")
        if req.latents is not None:
            lat = np.asarray(req.latents, dtype=np.float64)
            if lat.ndim != 2 or lat.shape[1] != 7:
                raise HTTPException(status_code=422, detail="latents must be (n, 7)")
        else:
            try:
                lat = np.stack(
                    [
                        ReorientPose(
                            np.asarray(p.position, dtype=np.float64),
                            np.asarray(p.quaternion, dtype=np.float64),
                        ).to_latent(cfg.workspace)
                        for p in req.poses
                    ]
                )
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=f"bad pose: {exc}") from exc
        if req.phi is not None:
            phi = np.asarray(req.phi, dtype=np.float64)
        elif req.scene is not None:
            phi = b.encoder.phi(encoder_observation(_parse_scene(req.scene))[None, :])[0]
        else:
            raise HTTPException(status_code=422, detail="provide phi or a scene")
        if phi.shape != (model.phi_dim,):
            raise HTTPException(status_code=422, detail=f"phi must have length {model.phi_dim}")
        n_p, n_g = lat.shape[0], feats.shape[0]
        tiled_g = np.tile(feats, (n_p, 1))
        rep_p = np.repeat(lat, n_g, axis=0)
        rep_phi = np.tile(phi[None, :], (n_p * n_g, 1))
        scores = model.score(tiled_g, rep_p, rep_phi).reshape(n_p, n_g)
        return FeasibilityScoreResponse(scores=[row.tolist() for row in scores])

    return app
