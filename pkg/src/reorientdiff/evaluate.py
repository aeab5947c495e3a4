"""End-to-end evaluation of the guided sampler against the oracle.

Evaluation draws fresh scenes, runs the full perception-to-pose stack
(encoder prediction, grasp extraction from the predicted mask, guided
and unguided sampling), and scores the top-ranked poses with the
analytic oracle.  A task run succeeds at the reorient level when any
top pose has a stage-1-passing pick grasp, and at the place level when
any top pose passes both stages; the overall rate equals the place rate.
A task counts as solved when any of its per-seed runs succeeds.

Two reports are produced: metrics.json, which is a deterministic function
of the config and models (byte-identical across reruns), and timing.json,
which records wall-clock measurements and is allowed to vary.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    config_hash,
    config_to_dict,
    derive_scene_seed,
    load_config,
)
from .encoder import TaskEncoder
from .feasibility import FeasibilityModel, grasp_features
from .heightmap import upsample_nearest
from .sampler import GuidanceConfig, SamplerOutput, sample
from .scene import (
    Scene,
    encoder_observation,
    generate_scene,
    oracle_stage_success,
    scene_pick_grasps,
    scene_place_grasps,
)
from .schedule import NoiseSchedule, make_schedule
from .score_model import ScoreModel

logger = logging.getLogger(__name__)

THREADS_ENV = "REORIENT_DIFF_THREADS"


class BundleError(RuntimeError):
    pass


@dataclass
class ModelBundle:
    """Trained models plus the config and schedule they were built with."""

    config: ExperimentConfig
    schedule: NoiseSchedule
    encoder: TaskEncoder
    score: ScoreModel
    m1: FeasibilityModel
    m2: FeasibilityModel


BUNDLE_FILES = ("config.json", "encoder.rdiff", "feasibility_m1.rdiff", "feasibility_m2.rdiff", "score.rdiff")


def load_bundle(path: str | Path) -> ModelBundle:
    path = Path(path)
    missing = [f for f in BUNDLE_FILES if not (path / f).exists()]
    if missing:
        raise BundleError(f"bundle at {path} is missing {missing}")
    cfg = load_config(path / "config.json")
    return ModelBundle(
        config=cfg,
        schedule=make_schedule(cfg.schedule.kind, cfg.schedule.num_steps),
        encoder=TaskEncoder.load(path / "encoder.rdiff"),
        score=ScoreModel.load(path / "score.rdiff"),
        m1=FeasibilityModel.load(path / "feasibility_m1.rdiff"),
        m2=FeasibilityModel.load(path / "feasibility_m2.rdiff"),
    )


@dataclass
class EvalTask:
    """A prepared task: scene plus everything derived from perception."""

    index: int
    scene: Scene
    phi: np.ndarray
    pick_feats: np.ndarray
    place_feats: np.ndarray


def perceive_scene(
    bundle: ModelBundle,
    scene: Scene,
    rng: np.random.Generator,
    n_pick: int | None = None,
    n_place: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the perception half of the stack on an existing scene.

    Returns (phi, pick_feats, place_feats).  Pick grasps come from the
    cells the encoder predicts as the target; if that mask misses the
    visible surface entirely, the ground-truth mask is used instead.
    """
    cfg = bundle.config
    n_pick = n_pick if n_pick is not None else cfg.dataset.n_pick_grasps
    n_place = n_place if n_place is not None else cfg.dataset.n_place_grasps
    pred = bundle.encoder.predict_task(
        encoder_observation(scene), cfg.scene.shelf_levels, cfg.scene.n_yaw_bins
    )
    factor = scene.heightmap.shape[0] // pred.mask16.shape[0]
    mask = upsample_nearest(pred.mask16.astype(np.float64), factor) > 0.5
    picks = scene_pick_grasps(scene, n_pick, rng, mask=mask)
    if not picks:
        # predicted mask missed the object; fall back to the visible surface
        logger.warning("scene seed %d: predicted mask empty, using ground-truth mask", scene.seed)
        picks = scene_pick_grasps(scene, n_pick, rng)
    places = scene_place_grasps(scene, n_place, rng)
    return pred.phi, grasp_features(picks), grasp_features(places)


def prepare_task(cfg: ExperimentConfig, bundle: ModelBundle, index: int) -> EvalTask:
    """Generate a scene and run the perception half of the stack."""
    scene_seed = derive_scene_seed(cfg.seed, cfg.evaluate.scene_seed_offset, index)
    scene = generate_scene(cfg.scene, cfg.oracle, scene_seed, cfg.masses)
    rng = np.random.default_rng([cfg.seed, scene_seed])
    phi, pick_feats, place_feats = perceive_scene(bundle, scene, rng)
    return EvalTask(
        index=index,
        scene=scene,
        phi=phi,
        pick_feats=pick_feats,
        place_feats=place_feats,
    )


def run_task_once(
    task: EvalTask,
    bundle: ModelBundle,
    seed: int,
    num_sample_steps: int,
    guided: bool,
) -> tuple[bool, bool, float]:
    """One sampler run; returns (reorient_ok, place_ok, wall_time_s)."""
    cfg = bundle.config
    g = cfg.sampler.guidance
    guidance = GuidanceConfig(
        w_c=g.w_c,
        w1=g.w1,
        w2=g.w2,
        enabled=guided,
        noise_scale=g.noise_scale,
        max_norm=g.max_norm,
        x0_clip=g.x0_clip,
    )
    out: SamplerOutput = sample(
        bundle.score,
        bundle.schedule,
        task.phi,
        n_chains=cfg.sampler.n_chains,
        seed=seed,
        num_sample_steps=num_sample_steps,
        guidance=guidance,
        feasibility=(bundle.m1, bundle.m2),
        grasp_sets=(task.pick_feats, task.place_feats),
        workspace=cfg.workspace,
    )
    top = out.latents[: cfg.sampler.top_n]
    if top.shape[0] == 0:
        return False, False, out.wall_time_s
    poses = [p for p in out.poses(cfg.workspace)[: cfg.sampler.top_n]]
    positions = np.stack([p.position for p in poses])
    quats = np.stack([p.quaternion for p in poses])
    s1 = oracle_stage_success(task.scene.task, task.pick_feats[:, 3:], positions, quats, 1).any(axis=1)
    s2 = oracle_stage_success(task.scene.task, task.place_feats[:, 3:], positions, quats, 2).any(axis=1)
    return bool(s1.any()), bool((s1 & s2).any()), out.wall_time_s


def _task_seed(cfg: ExperimentConfig, task_index: int, run_index: int) -> int:
    return cfg.seed * 1_000_003 + task_index * 1_000 + run_index


def _resolve_threads(cfg: ExperimentConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1")
        return n
    if cfg.evaluate.threads > 0:
        return cfg.evaluate.threads
    return min(8, os.cpu_count() or 1)


def evaluate(cfg: ExperimentConfig, bundle: ModelBundle) -> tuple[dict, dict]:
    """Full evaluation sweep; returns (metrics, timing)."""
    n_tasks = cfg.evaluate.n_tasks
    n_seeds = cfg.evaluate.n_seeds
    k_sweep = list(cfg.evaluate.k_sweep)
    for k in k_sweep:
        if not 1 <= k <= cfg.schedule.num_steps:
            raise ValueError(f"k_sweep value {k} outside [1, {cfg.schedule.num_steps}]")
    threads = _resolve_threads(cfg)
    t_start = time.perf_counter()

    def work(index: int) -> dict:
        task = prepare_task(cfg, bundle, index)
        res: dict = {"arms": {}, "times": {}}
        arms = [(k, True) for k in k_sweep] + [(k_sweep[0], False)]
        for k, guided in arms:
            name = f"{'guided' if guided else 'unguided'}@{k}"
            reorient = place = False
            times = []
            for s in range(n_seeds):
                r, p, wt = run_task_once(task, bundle, _task_seed(cfg, index, s), k, guided)
                reorient |= r
                place |= p
                times.append(wt)
            res["arms"][name] = (reorient, place)
            res["times"][name] = float(np.mean(times))
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n_tasks)))
    else:
        results = [work(i) for i in range(n_tasks)]

    arm_names = [f"guided@{k}" for k in k_sweep] + [f"unguided@{k_sweep[0]}"]
    rates = {}
    for name in arm_names:
        reorient = float(np.mean([r["arms"][name][0] for r in results]) * 100.0)
        place = float(np.mean([r["arms"][name][1] for r in results]) * 100.0)
        rates[name] = {"reorient": reorient, "place": place, "overall": place}

    metrics = {
        "report": "reorientdiff-metrics",
        "config_hash": config_hash(cfg),
        "n_tasks": n_tasks,
        "n_seeds": n_seeds,
        "k_sweep": k_sweep,
        "rates": rates,
        "config_echo": config_to_dict(cfg),
    }
    timing = {
        "report": "reorientdiff-eval-timing",
        "threads": threads,
        "total_wall_time_s": time.perf_counter() - t_start,
        "mean_sample_wall_time_s": {
            name: float(np.mean([r["times"][name] for r in results])) for name in arm_names
        },
    }
    return metrics, timing


def metrics_to_csv(metrics: dict) -> str:
    """Flat CSV view of the per-arm success rates."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arm", "reorient", "place", "overall"])
    for name in sorted(metrics["rates"]):
        row = metrics["rates"][name]
        writer.writerow(
            [name, f"{row['reorient']:.6f}", f"{row['place']:.6f}", f"{row['overall']:.6f}"]
        )
    return buf.getvalue()


def write_reports(out_dir: str | Path, metrics: dict, timing: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    (out / "metrics.csv").write_text(metrics_to_csv(metrics))
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n")


def timing_report(
    cfg: ExperimentConfig,
    bundle: ModelBundle,
    n_repeats: int = 2,
    task_index: int = 0,
) -> dict:
    """Wall-time comparison across step counts and guidance settings.

    Uses one representative task; records per-arm means plus two derived
    booleans: whether guided time grows with the step count, and whether
    guidance adds over the unguided run at each step count.
    """
    task = prepare_task(cfg, bundle, task_index)
    k_sweep = sorted(set(cfg.evaluate.k_sweep))
    means: dict[str, dict[str, float]] = {}
    for k in k_sweep:
        row = {}
        for guided in (False, True):
            times = []
            for rep in range(n_repeats):
                _, _, wt = run_task_once(task, bundle, _task_seed(cfg, task_index, rep), k, guided)
                times.append(wt)
            row["guided" if guided else "unguided"] = float(np.mean(times))
        means[str(k)] = row
    guided_seq = [means[str(k)]["guided"] for k in k_sweep]
    return {
        "report": "reorientdiff-sampler-timing",
        "k_sweep": k_sweep,
        "n_repeats": n_repeats,
        "mean_wall_time_s": means,
        "guided_time_increases_with_steps": bool(
            all(b > a for a, b in zip(guided_seq, guided_seq[1:]))
        ),
        "guidance_adds_time": {
            str(k): bool(means[str(k)]["guided"] > means[str(k)]["unguided"]) for k in k_sweep
        },
    }
