"""Staged training pipeline with content-addressed caching.

Stages run in order: scenes -> encoder -> data -> feasibility -> score ->
bundle -> evaluate.  Each stage writes its artifacts into a directory
named <stage>-<hash12> under the output root, where the hash covers the
slice of the config the stage depends on plus the hashes of its upstream
stages.  A manifest.json is written last and marks the stage complete;
directories with a manifest are reused as-is, so rerunning with an
unchanged config is a no-op and changing, say, the score training budget
rebuilds only the score stage and downstream.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    DATA_SCENE_OFFSET,
    ENCODER_SCENE_OFFSET,
    ExperimentConfig,
    config_hash,
    config_to_dict,
    derive_scene_seed,
    subset_hash,
)
from .dataset import build_encoder_dataset, generate_reorient_dataset
from .encoder import TaskEncoder, train_encoder
from .evaluate import evaluate, load_bundle, timing_report, write_reports
from .feasibility import (
    FeasibilityModel,
    load_records_jsonl,
    save_records_jsonl,
    train_feasibility,
)
from .model_io import load_arrays, save_arrays
from .scene import Scene, generate_scene, load_scene_json, save_scene_json
from .schedule import make_schedule
from .score_model import ScoreModel, train_score_model
from .trainer import TrainerConfig

logger = logging.getLogger(__name__)

STAGE_ORDER = ("scenes", "encoder", "data", "feasibility", "score", "bundle", "evaluate")


@dataclass
class StageResult:
    name: str
    path: Path
    stage_hash: str
    cached: bool


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_root: str | Path):
        self.cfg = cfg
        self.root = Path(out_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.results: dict[str, StageResult] = {}

    # ---- plumbing ----

    def _stage_dir(self, name: str, payload) -> tuple[Path, str]:
        h = subset_hash(payload)[:12]
        return self.root / f"{name}-{h}", h

    def _run_stage(self, name: str, payload, builder) -> StageResult:
        path, h = self._stage_dir(name, payload)
        manifest = path / "manifest.json"
        if manifest.exists():
            logger.info("stage %s: cache hit at %s", name, path)
            self.results[name] = StageResult(name, path, h, cached=True)
            return self.results[name]
        if path.exists():
            logger.warning("stage %s: removing incomplete dir %s", name, path)
            shutil.rmtree(path)
        path.mkdir(parents=True)
        t0 = time.perf_counter()
        stats = builder(path) or {}
        manifest.write_text(
            json.dumps(
                {
                    "stage": name,
                    "hash": h,
                    "wall_time_s": time.perf_counter() - t0,
                    "stats": stats,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        logger.info("stage %s: built at %s (%.1fs)", name, path, time.perf_counter() - t0)
        self.results[name] = StageResult(name, path, h, cached=False)
        return self.results[name]

    def _upstream(self, name: str) -> str:
        if name not in self.results:
            raise RuntimeError(f"stage {name} has not run")
        return self.results[name].stage_hash

    # ---- stages ----

    def scenes(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "scenes",
            "seed": cfg.seed,
            "scene": cfg.scene,
            "oracle": cfg.oracle,
            "masses": cfg.masses,
            "n_encoder_scenes": cfg.n_encoder_scenes,
            "n_data_scenes": cfg.n_data_scenes,
        }

        def build(path: Path):
            for role, offset, count in (
                ("encoder_scenes", ENCODER_SCENE_OFFSET, cfg.n_encoder_scenes),
                ("data_scenes", DATA_SCENE_OFFSET, cfg.n_data_scenes),
            ):
                sub = path / role
                sub.mkdir()
                for i in range(count):
                    seed = derive_scene_seed(cfg.seed, offset, i)
                    save_scene_json(sub / f"{i:05d}.json", generate_scene(cfg.scene, cfg.oracle, seed, cfg.masses))
            return {"n_encoder_scenes": cfg.n_encoder_scenes, "n_data_scenes": cfg.n_data_scenes}

        return self._run_stage("scenes", payload, build)

    def _load_scenes(self, role: str) -> list[Scene]:
        sub = self.results["scenes"].path / role
        return [load_scene_json(p) for p in sorted(sub.glob("*.json"))]

    def encoder(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "encoder",
            "seed": cfg.seed,
            "model": {
                "phi_dim": cfg.model.phi_dim,
                "trunk_hidden": cfg.model.trunk_hidden,
                "mask_hidden": cfg.model.mask_hidden,
                "activation": cfg.model.activation,
            },
            "train": cfg.encoder_train,
            "scenes": self._upstream("scenes"),
        }

        def build(path: Path):
            scenes = self._load_scenes("encoder_scenes")
            obs, labels = build_encoder_dataset(scenes)
            enc = TaskEncoder(
                phi_dim=cfg.model.phi_dim,
                trunk_hidden=cfg.model.trunk_hidden,
                mask_hidden=cfg.model.mask_hidden,
                activation=cfg.model.activation,
                rng=np.random.default_rng([cfg.seed, 1]),
            )
            tc = cfg.encoder_train
            history = train_encoder(
                enc,
                obs,
                labels,
                TrainerConfig(
                    learning_rate=tc.learning_rate,
                    batch_size=tc.batch_size,
                    epochs=tc.epochs,
                    seed=cfg.seed + 11,
                ),
            )
            enc.save(path / "encoder.rdiff")
            return {"final_loss": history[-1], "n_train": int(obs.shape[0])}

        return self._run_stage("encoder", payload, build)

    def data(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "data",
            "seed": cfg.seed,
            "dataset": cfg.dataset,
            "workspace": cfg.workspace,
            "scenes": self._upstream("scenes"),
            "encoder": self._upstream("encoder"),
        }

        def build(path: Path):
            scenes = self._load_scenes("data_scenes")
            enc = TaskEncoder.load(self.results["encoder"].path / "encoder.rdiff")
            ds = generate_reorient_dataset(scenes, enc, cfg.workspace, cfg.dataset, seed=cfg.seed + 21)
            save_records_jsonl(path / "records_m1.jsonl", ds.records1, cfg.workspace)
            save_records_jsonl(path / "records_m2.jsonl", ds.records2, cfg.workspace)
            save_arrays(
                path / "reorient_dataset.rdiff",
                "reorient_dataset",
                {"n": int(ds.latents.shape[0])},
                {"latents": ds.latents, "phis": ds.phis},
            )
            (path / "stats.json").write_text(json.dumps(ds.stats, sort_keys=True, indent=2) + "\n")
            return ds.stats

        return self._run_stage("data", payload, build)

    def feasibility(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "feasibility",
            "seed": cfg.seed,
            "model": {
                "phi_dim": cfg.model.phi_dim,
                "hidden": cfg.model.feasibility_hidden,
                "activation": cfg.model.activation,
            },
            "train": cfg.feasibility_train,
            "data": self._upstream("data"),
        }

        def build(path: Path):
            stats = {}
            tc = cfg.feasibility_train
            for stage in (1, 2):
                records = load_records_jsonl(
                    self.results["data"].path / f"records_m{stage}.jsonl", cfg.workspace
                )
                model = FeasibilityModel(
                    stage=stage,
                    phi_dim=cfg.model.phi_dim,
                    hidden=cfg.model.feasibility_hidden,
                    activation=cfg.model.activation,
                    rng=np.random.default_rng([cfg.seed, 2, stage]),
                )
                history = train_feasibility(
                    model,
                    records,
                    TrainerConfig(
                        learning_rate=tc.learning_rate,
                        batch_size=tc.batch_size,
                        epochs=tc.epochs,
                        seed=cfg.seed + 30 + stage,
                    ),
                )
                model.save(path / f"feasibility_m{stage}.rdiff")
                stats[f"m{stage}_final_loss"] = history[-1]
                stats[f"m{stage}_n_records"] = len(records)
            return stats

        return self._run_stage("feasibility", payload, build)

    def score(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "score",
            "seed": cfg.seed,
            "model": {
                "phi_dim": cfg.model.phi_dim,
                "time_dim": cfg.model.time_dim,
                "hidden": cfg.model.score_hidden,
                "activation": cfg.model.activation,
                "p_drop": cfg.model.p_drop,
            },
            "schedule": cfg.schedule,
            "train": cfg.score_train,
            "data": self._upstream("data"),
        }

        def build(path: Path):
            _, _, arrays = load_arrays(self.results["data"].path / "reorient_dataset.rdiff")
            latents, phis = arrays["latents"], arrays["phis"]
            if latents.shape[0] < 10:
                raise RuntimeError(
                    f"only {latents.shape[0]} training poses; dataset generation failed"
                )
            schedule = make_schedule(cfg.schedule.kind, cfg.schedule.num_steps)
            model = ScoreModel(
                phi_dim=cfg.model.phi_dim,
                time_dim=cfg.model.time_dim,
                hidden=cfg.model.score_hidden,
                activation=cfg.model.activation,
                rng=np.random.default_rng([cfg.seed, 3]),
            )
            tc = cfg.score_train
            history = train_score_model(
                model,
                latents,
                phis,
                schedule,
                TrainerConfig(
                    learning_rate=tc.learning_rate,
                    batch_size=tc.batch_size,
                    epochs=tc.epochs,
                    seed=cfg.seed + 41,
                ),
                p_drop=cfg.model.p_drop,
            )
            model.save(path / "score.rdiff")
            (path / "schedule.csv").write_text(schedule.to_csv())
            return {"final_loss": history[-1], "n_train": int(latents.shape[0])}

        return self._run_stage("score", payload, build)

    def bundle(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "bundle",
            "config": config_hash(cfg),
            "encoder": self._upstream("encoder"),
            "feasibility": self._upstream("feasibility"),
            "score": self._upstream("score"),
        }

        def build(path: Path):
            (path / "config.json").write_text(
                json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"
            )
            shutil.copy2(self.results["encoder"].path / "encoder.rdiff", path / "encoder.rdiff")
            for stage in (1, 2):
                shutil.copy2(
                    self.results["feasibility"].path / f"feasibility_m{stage}.rdiff",
                    path / f"feasibility_m{stage}.rdiff",
                )
            shutil.copy2(self.results["score"].path / "score.rdiff", path / "score.rdiff")
            shutil.copy2(self.results["score"].path / "schedule.csv", path / "schedule.csv")
            return {}

        return self._run_stage("bundle", payload, build)

    def evaluate(self) -> StageResult:
        cfg = self.cfg
        payload = {
            "stage": "evaluate",
            "config": config_hash(cfg),
            "bundle": self._upstream("bundle"),
        }

        def build(path: Path):
            bundle = load_bundle(self.results["bundle"].path)
            metrics, timing = evaluate(cfg, bundle)
            write_reports(path, metrics, timing)
            sampler_timing = timing_report(cfg, bundle)
            (path / "sampler_timing.json").write_text(
                json.dumps(sampler_timing, sort_keys=True, indent=2) + "\n"
            )
            return {"rates": metrics["rates"]}

        return self._run_stage("evaluate", payload, build)

    # ---- driver ----

    def run(self, through: str = "bundle") -> dict[str, StageResult]:
        if through not in STAGE_ORDER:
            raise ValueError(f"unknown stage {through!r}; choose from {STAGE_ORDER}")
        for name in STAGE_ORDER[: STAGE_ORDER.index(through) + 1]:
            getattr(self, name)()
        return dict(self.results)
