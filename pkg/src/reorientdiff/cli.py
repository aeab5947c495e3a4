"""Command-line interface.

Exit codes: 0 on success, 2 for configuration and usage errors, 3 for
runtime failures (scene generation exhausting its attempts, training
divergence, corrupt model files, missing bundles).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    DATA_SCENE_OFFSET,
    ENCODER_SCENE_OFFSET,
    ConfigError,
    ExperimentConfig,
    config_to_dict,
    derive_scene_seed,
    load_config,
)
from .dataset import build_encoder_dataset, generate_reorient_dataset
from .encoder import TaskEncoder, train_encoder
from .evaluate import (
    BundleError,
    evaluate,
    load_bundle,
    perceive_scene,
    timing_report,
    write_reports,
)
from .feasibility import (
    FeasibilityModel,
    grasp_features,
    load_records_jsonl,
    save_records_jsonl,
)
from .feasibility import train_feasibility as fit_feasibility
from .model_io import ModelFormatError, load_arrays, save_arrays
from .pipeline import STAGE_ORDER, Pipeline
from .sampler import GuidanceConfig, sample
from .scene import (
    SceneGenerationError,
    generate_scene,
    load_scene_json,
    save_scene_json,
    scene_pick_grasps,
    scene_place_grasps,
)
from .schedule import make_schedule
from .score_model import ScoreModel, train_score_model
from .trainer import TrainerConfig, TrainingDiverged

logger = logging.getLogger(__name__)

SCENE_ROLES = {"encoder": ENCODER_SCENE_OFFSET, "data": DATA_SCENE_OFFSET}


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _trainer_config(section, seed: int) -> TrainerConfig:
    return TrainerConfig(
        learning_rate=section.learning_rate,
        batch_size=section.batch_size,
        epochs=section.epochs,
        seed=seed,
    )


def _write_json(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---- subcommands ----


def cmd_schedule(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    kind = args.kind if args.kind is not None else cfg.schedule.kind
    steps = args.steps if args.steps is not None else cfg.schedule.num_steps
    try:
        sched = make_schedule(kind, steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    csv_text = sched.to_csv()
    if args.out is None:
        sys.stdout.write(csv_text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv_text)
        logger.info("wrote %s (%d steps, %s)", args.out, steps, kind)
    return 0


def cmd_gen_scenes(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    if args.role == "eval":
        offset = cfg.evaluate.scene_seed_offset
        default_count = cfg.evaluate.n_tasks
    else:
        offset = SCENE_ROLES[args.role]
        default_count = cfg.n_encoder_scenes if args.role == "encoder" else cfg.n_data_scenes
    count = args.count if args.count is not None else default_count
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        seed = derive_scene_seed(cfg.seed, offset, args.start + i)
        scene = generate_scene(cfg.scene, cfg.oracle, seed, cfg.masses)
        save_scene_json(out / f"{args.start + i:05d}.json", scene)
    logger.info("wrote %d %s scenes to %s", count, args.role, out)
    return 0


def _load_scene_dir(path: str | Path) -> list:
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise ConfigError(f"no scene files in {path}")
    return [load_scene_json(p) for p in files]


def cmd_train_encoder(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    scenes = _load_scene_dir(args.scenes)
    obs, labels = build_encoder_dataset(scenes)
    enc = TaskEncoder(
        phi_dim=cfg.model.phi_dim,
        trunk_hidden=cfg.model.trunk_hidden,
        mask_hidden=cfg.model.mask_hidden,
        activation=cfg.model.activation,
        rng=np.random.default_rng([cfg.seed, 1]),
    )
    history = train_encoder(enc, obs, labels, _trainer_config(cfg.encoder_train, cfg.seed + 11))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    enc.save(args.out)
    logger.info("trained encoder on %d scenes, final loss %.4f", len(scenes), history[-1])
    return 0


def cmd_gen_reorient_data(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    scenes = _load_scene_dir(args.scenes)
    enc = TaskEncoder.load(args.encoder)
    ds = generate_reorient_dataset(scenes, enc, cfg.workspace, cfg.dataset, seed=cfg.seed + 21)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_records_jsonl(out / "records_m1.jsonl", ds.records1, cfg.workspace)
    save_records_jsonl(out / "records_m2.jsonl", ds.records2, cfg.workspace)
    save_arrays(
        out / "reorient_dataset.rdiff",
        "reorient_dataset",
        {"n": int(ds.latents.shape[0])},
        {"latents": ds.latents, "phis": ds.phis},
    )
    _write_json(out / "stats.json", ds.stats)
    logger.info("dataset: %s", ds.stats)
    return 0


def cmd_train_feasibility(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    records = load_records_jsonl(args.records, cfg.workspace)
    model = FeasibilityModel(
        stage=args.stage,
        phi_dim=cfg.model.phi_dim,
        hidden=cfg.model.feasibility_hidden,
        activation=cfg.model.activation,
        rng=np.random.default_rng([cfg.seed, 2, args.stage]),
    )
    history = fit_feasibility(
        model, records, _trainer_config(cfg.feasibility_train, cfg.seed + 30 + args.stage)
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    logger.info("trained stage-%d model on %d records, final loss %.4f", args.stage, len(records), history[-1])
    return 0


def cmd_train_score(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    kind, _, arrays = load_arrays(args.data)
    if kind != "reorient_dataset":
        raise ConfigError(f"{args.data} holds {kind!r}, expected a reorient_dataset file")
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.num_steps)
    model = ScoreModel(
        phi_dim=cfg.model.phi_dim,
        time_dim=cfg.model.time_dim,
        hidden=cfg.model.score_hidden,
        activation=cfg.model.activation,
        rng=np.random.default_rng([cfg.seed, 3]),
    )
    history = train_score_model(
        model,
        arrays["latents"],
        arrays["phis"],
        schedule,
        _trainer_config(cfg.score_train, cfg.seed + 41),
        p_drop=cfg.model.p_drop,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    logger.info("trained score model on %d poses, final loss %.4f", arrays["latents"].shape[0], history[-1])
    return 0


def cmd_grasps(args: argparse.Namespace) -> int:
    scene = load_scene_json(args.scene)
    rng = np.random.default_rng(args.seed)
    picks = scene_pick_grasps(scene, args.n_pick, rng)
    places = scene_place_grasps(scene, args.n_place, rng)
    pick_feats = grasp_features(picks)
    place_feats = grasp_features(places)

    def rows(feats: np.ndarray) -> list[dict]:
        return [{"point": f[:3].tolist(), "normal": f[3:].tolist()} for f in feats]

    payload = {"pick": rows(pick_feats), "place": rows(place_feats), "scene_seed": scene.seed}
    if args.out is None:
        sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    else:
        _write_json(args.out, payload)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    cfg = bundle.config
    if args.config is not None:
        # models and schedule stay with the bundle; only sampler knobs move
        cfg = replace(cfg, sampler=load_config(args.config).sampler)
    scene = load_scene_json(args.scene)
    if args.task is not None:
        from .scene import TaskSpec

        try:
            task = TaskSpec.from_dict(json.loads(Path(args.task).read_text()))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"bad task file {args.task}: {exc}") from exc
        scene = replace(scene, task=task)
    snapshot_steps: tuple[int, ...] = ()
    if args.snapshot_at:
        if args.out is None:
            raise ConfigError("--snapshot-at needs --out to name the CSV")
        try:
            snapshot_steps = tuple(int(s) for s in args.snapshot_at.split(","))
        except ValueError as exc:
            raise ConfigError(f"--snapshot-at must be comma-separated ints: {exc}") from exc
    rng = np.random.default_rng([cfg.seed, args.seed])
    phi, pick_feats, place_feats = perceive_scene(bundle, scene, rng)
    guided = not args.unguided
    g = cfg.sampler.guidance
    out = sample(
        bundle.score,
        bundle.schedule,
        phi,
        n_chains=args.chains if args.chains is not None else cfg.sampler.n_chains,
        seed=args.seed,
        num_sample_steps=args.steps,
        guidance=GuidanceConfig(
            w_c=g.w_c, w1=g.w1, w2=g.w2, enabled=guided,
            noise_scale=g.noise_scale, max_norm=g.max_norm, x0_clip=g.x0_clip,
        ),
        feasibility=(bundle.m1, bundle.m2) if guided else None,
        grasp_sets=(pick_feats, place_feats) if guided else None,
        snapshot_steps=snapshot_steps,
        workspace=cfg.workspace,
    )
    if snapshot_steps:
        snap_path = Path(args.out).with_suffix(".snapshots.csv")
        with open(snap_path, "w") as fh:
            fh.write("k,chain," + ",".join(f"x{i}" for i in range(out.latents.shape[1])) + "\n")
            for k in sorted(out.snapshots, reverse=True):
                for c, row in enumerate(out.snapshots[k]):
                    fh.write(f"{k},{c}," + ",".join(f"{v:.9g}" for v in row) + "\n")
        logger.info("wrote %s", snap_path)
    top_n = args.top_n if args.top_n is not None else cfg.sampler.top_n
    poses = out.poses(cfg.workspace)[:top_n]
    payload = {
        "poses": [
            {
                "position": p.position.tolist(),
                "quaternion": p.quaternion.tolist(),
                "m1": float(out.m1[i]),
                "m2": float(out.m2[i]),
                "combined": float(out.combined[i]),
            }
            for i, p in enumerate(poses)
        ],
        "wall_time_s": out.wall_time_s,
        "guided": guided,
        "dropped_chains": len(out.dropped),
        "config_echo": config_to_dict(cfg),
    }
    if args.out is None:
        sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    else:
        _write_json(args.out, payload)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    cfg = bundle.config
    ev = cfg.evaluate
    if args.n_tasks is not None:
        ev = replace(ev, n_tasks=args.n_tasks)
    if args.n_seeds is not None:
        ev = replace(ev, n_seeds=args.n_seeds)
    if args.threads is not None:
        ev = replace(ev, threads=args.threads)
    cfg = replace(cfg, evaluate=ev)
    bundle = replace(bundle, config=cfg)
    metrics, timing = evaluate(cfg, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out, metrics, timing)
    for arm, rates in sorted(metrics["rates"].items()):
        logger.info("%s: reorient %.3f place %.3f", arm, rates["reorient"], rates["place"])
    return 0


def cmd_timing(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    report = timing_report(bundle.config, bundle, n_repeats=args.repeats)
    if args.out is None:
        sys.stdout.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
    else:
        _write_json(args.out, report)
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    pipe = Pipeline(cfg, args.out)
    results = pipe.run(through=args.through)
    for name in STAGE_ORDER[: STAGE_ORDER.index(args.through) + 1]:
        r = results[name]
        logger.info("%-12s %s %s", name, "cached" if r.cached else "built ", r.path)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app(args.bundle)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reorient-diff",
        description="Guided-diffusion reorientation pose planning on a synthetic tabletop domain.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_: str, config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", default=None, help="JSON config file (defaults used if omitted)")
            p.add_argument("--seed", type=int, default=None, help="override the master seed")
        return p

    p = add("schedule", cmd_schedule, "write the noise schedule as CSV")
    p.add_argument("--kind", choices=("cosine", "scaled_linear"), default=None)
    p.add_argument("--K", "--steps", dest="steps", type=int, default=None, help="number of diffusion steps")
    p.add_argument("--out", default=None, help="output CSV path (stdout if omitted)")

    p = add("gen-scenes", cmd_gen_scenes, "generate and save synthetic scenes")
    p.add_argument("--role", choices=("encoder", "data", "eval"), default="data")
    p.add_argument("--n", "--count", dest="count", type=int, default=None, help="number of scenes (default from config)")
    p.add_argument("--start", type=int, default=0, help="first scene index")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-encoder", cmd_train_encoder, "train the task encoder")
    p.add_argument("--scenes", required=True, help="directory of scene JSON files")
    p.add_argument("--out", required=True, help="output .rdiff path")

    p = add("gen-reorient-data", cmd_gen_reorient_data, "label candidate poses and build training sets")
    p.add_argument("--scenes", required=True, help="directory of scene JSON files")
    p.add_argument("--encoder", required=True, help="trained encoder .rdiff")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-feasibility", cmd_train_feasibility, "train a grasp feasibility discriminator")
    p.add_argument("--records", required=True, help="records JSONL file")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True, help="output .rdiff path")

    p = add("train-score", cmd_train_score, "train the denoising score model")
    p.add_argument("--data", required=True, help="reorient_dataset .rdiff file")
    p.add_argument("--out", required=True, help="output .rdiff path")

    p = add("grasps", cmd_grasps, "extract pick and place grasps from a scene", config=False)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--n-pick", type=int, default=8)
    p.add_argument("--n-place", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output JSON path (stdout if omitted)")

    p = add("sample", cmd_sample, "sample reorientation poses for a scene", config=False)
    p.add_argument("--bundle", required=True, help="trained bundle directory")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--task", default=None, help="task JSON overriding the scene's embedded task")
    p.add_argument("--config", default=None, help="config whose sampler section overrides the bundle's")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="DDIM steps (full schedule if omitted)")
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--unguided", action="store_true", help="disable feasibility guidance")
    p.add_argument("--snapshot-at", default=None, help="comma-separated k values for latent snapshots CSV")
    p.add_argument("--out", default=None, help="poses.json path (stdout if omitted)")

    p = add("evaluate", cmd_evaluate, "run the benchmark sweep", config=False)
    p.add_argument("--bundle", required=True, help="trained bundle directory")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--n-tasks", type=int, default=None)
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)

    p = add("timing", cmd_timing, "time the sampler across step counts", config=False)
    p.add_argument("--bundle", required=True, help="trained bundle directory")
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--out", default=None, help="output JSON path (stdout if omitted)")

    p = add("pipeline", cmd_pipeline, "run the staged training pipeline")
    p.add_argument("--out", required=True, help="pipeline output root")
    p.add_argument("--through", choices=STAGE_ORDER, default="evaluate")

    p = add("serve", cmd_serve, "serve the HTTP API", config=False)
    p.add_argument("--bundle", default=None, help="bundle directory (or set REORIENT_DIFF_BUNDLE)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SceneGenerationError, TrainingDiverged, ModelFormatError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
