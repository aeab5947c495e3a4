"""Experiment configuration: nested, strictly validated, hashable.

Configs load from JSON with unknown-key rejection so typos fail fast
instead of silently running defaults.  config_hash() hashes the canonical
JSON form (sorted keys, fixed separators) and is what the pipeline uses
to key cached stage outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .dataset import DatasetParams
from .pose import Workspace
from .primitives import CATALOG_INDEX, DEFAULT_MASSES
from .scene import OracleSpec, SceneParams


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    num_steps: int = 256

    def __post_init__(self):
        if self.kind not in ("cosine", "scaled_linear"):
            raise ConfigError(f"schedule.kind must be cosine or scaled_linear, got {self.kind!r}")
        if self.num_steps < 1:
            raise ConfigError("schedule.num_steps must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    phi_dim: int = 48
    time_dim: int = 16
    score_hidden: tuple[int, ...] = (128, 128, 128)
    feasibility_hidden: tuple[int, ...] = (64, 64)
    trunk_hidden: tuple[int, ...] = (128, 128)
    mask_hidden: tuple[int, ...] = (64,)
    activation: str = "silu"
    p_drop: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("model.p_drop must be in [0, 1)")


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("training section values must be positive")


@dataclass(frozen=True)
class GuidanceSection:
    w_c: float = 2.0
    w1: float = 1.5
    w2: float = 1.5
    noise_scale: float = 0.1
    max_norm: float = 10.0
    x0_clip: float = 1.5


@dataclass(frozen=True)
class SamplerSection:
    n_chains: int = 50
    top_n: int = 10
    guidance: GuidanceSection = field(default_factory=GuidanceSection)

    def __post_init__(self):
        if self.top_n > self.n_chains:
            raise ConfigError("sampler.top_n cannot exceed n_chains")


@dataclass(frozen=True)
class EvalSection:
    n_tasks: int = 300
    n_seeds: int = 4
    k_sweep: tuple[int, ...] = (256, 100, 50)
    scene_seed_offset: int = 1_000_000
    threads: int = 0

    def __post_init__(self):
        if self.n_tasks < 1 or self.n_seeds < 1:
            raise ConfigError("evaluate.n_tasks and n_seeds must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_encoder_scenes: int = 2000
    n_data_scenes: int = 150
    workspace: Workspace = field(default_factory=Workspace)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    scene: SceneParams = field(default_factory=SceneParams)
    oracle: OracleSpec = field(default_factory=OracleSpec)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder_train: TrainSection = field(
        default_factory=lambda: TrainSection(learning_rate=2e-3, batch_size=64, epochs=500)
    )
    feasibility_train: TrainSection = field(
        default_factory=lambda: TrainSection(learning_rate=2e-3, batch_size=128, epochs=150)
    )
    score_train: TrainSection = field(
        default_factory=lambda: TrainSection(learning_rate=1e-3, batch_size=128, epochs=1500)
    )
    sampler: SamplerSection = field(default_factory=SamplerSection)
    evaluate: EvalSection = field(default_factory=EvalSection)
    masses: dict = field(default_factory=lambda: dict(DEFAULT_MASSES))

    def __post_init__(self):
        bad = set(self.masses) - set(CATALOG_INDEX)
        if bad:
            raise ConfigError(f"masses for unknown primitives: {sorted(bad)}")
        missing = set(CATALOG_INDEX) - set(self.masses)
        if missing:
            raise ConfigError(f"masses missing for primitives: {sorted(missing)}")
        if any(m <= 0 for m in self.masses.values()):
            raise ConfigError("masses must be positive")


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if hasattr(value, "__dataclass_fields__"):
        return {f.name: _to_jsonable(getattr(value, f.name)) for f in fields(value)}
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_jsonable(cfg)


_TUPLE_FIELDS = {
    "lo",
    "hi",
    "shelf_levels",
    "score_hidden",
    "feasibility_hidden",
    "trunk_hidden",
    "mask_hidden",
    "k_sweep",
}


def _from_dict(cls, d: dict, where: str, defaults=None):
    """Build a section from a partial dict.

    Unspecified fields keep the values of the enclosing config's default
    instance, so {"score_train": {"epochs": 40}} only changes the epoch
    count and leaves that section's tuned learning rate alone.
    """
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    if defaults is None:
        defaults = cls()
    cls_fields = {f.name: f for f in fields(cls)}
    _check_keys(d, set(cls_fields), where)
    kwargs = {}
    for name, value in d.items():
        sub = _SECTION_TYPES.get((cls, name))
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{where}.{name}", getattr(defaults, name))
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return replace(defaults, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTION_TYPES = {
    (ExperimentConfig, "workspace"): Workspace,
    (ExperimentConfig, "schedule"): ScheduleConfig,
    (ExperimentConfig, "scene"): SceneParams,
    (ExperimentConfig, "oracle"): OracleSpec,
    (ExperimentConfig, "dataset"): DatasetParams,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "encoder_train"): TrainSection,
    (ExperimentConfig, "feasibility_train"): TrainSection,
    (ExperimentConfig, "score_train"): TrainSection,
    (ExperimentConfig, "sampler"): SamplerSection,
    (ExperimentConfig, "evaluate"): EvalSection,
    (SamplerSection, "guidance"): GuidanceSection,
}


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, d, "config")
    if isinstance(cfg.workspace, dict):
        raise ConfigError("workspace failed to parse")
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Load a config file, or the defaults when path is None."""
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode("utf-8")).hexdigest()


def subset_hash(payload: Any) -> str:
    """Hash an arbitrary JSON-able payload (used for pipeline stage keys)."""
    return hashlib.sha256(canonical_json(_to_jsonable(payload)).encode("utf-8")).hexdigest()


# disjoint scene-seed blocks per pipeline role, all shifted by the master seed
ENCODER_SCENE_OFFSET = 100_000
DATA_SCENE_OFFSET = 500_000


def derive_scene_seed(master_seed: int, offset: int, index: int) -> int:
    """Unique scene seed per (master seed, role offset, scene index)."""
    return master_seed * (2**24) + offset + index
