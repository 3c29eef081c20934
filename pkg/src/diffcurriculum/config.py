"""Flat experiment configuration.

A config file is a YAML mapping of scalar keys (lists only for the grid and
the sweeps). ``task`` and ``seed`` are required; every other key has a default,
and keys left at ``None`` below are filled from the task preset. Unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .curriculum import STRATEGIES, TAIL_FRACTION
from .data import DatasetSpec
from .diffusion import SAMPLERS
from .spectrum import LONGTAIL_GRID, LOWQUALITY_GRID

TASKS = ("longtail", "lowquality")
GRID_PRESETS = {"longtail": LONGTAIL_GRID, "lowquality": LOWQUALITY_GRID}
OUT_ENV = "DIFFCURRICULUM_OUT"
# real_only trains the pretrained classifier on real data alone
RUN_STRATEGIES = (*STRATEGIES, "real_only")

PRESETS = {
    "longtail": {
        "grid": LONGTAIL_GRID,
        "strategy": "diverse_to_specific",
        "hard_rule": "tail",
        "tail_fraction": TAIL_FRACTION,
        "pretrain_epochs": 30,
    },
    "lowquality": {
        "grid": LOWQUALITY_GRID,
        "strategy": "adaptive",
        "hard_rule": "probability",
        "tail_fraction": 0.0,
        "pretrain_epochs": 5,
    },
}


class ConfigError(ValueError):
    """Bad config. ``kind`` is one of missing_file, syntax, unknown_key, missing_key, schema."""

    def __init__(self, kind: str, message: str, key: str | None = None):
        super().__init__(message)
        self.kind = kind
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    seed: int
    # glyph world
    num_classes: int = 10
    head_count: int = 500
    imbalance_ratio: float = 100.0
    image_size: int = 16
    test_per_class: int = 50
    corruption_fraction: float = 0.4
    world_seed: int = 0
    data_seed: int = 0
    # variance schedule
    diffusion_steps: int = 200
    beta_min: float = 5e-4
    beta_max: float = 0.06
    # generator, shared by every experiment seed
    corpus_per_class: int = 600
    diffusion_epochs: int = 200
    diffusion_learn_rate: float = 2e-3
    diffusion_batch_size: int = 128
    diffusion_width: int = 256
    diffusion_depth: int = 3
    cond_dropout: float = 0.1
    diffusion_seed: int = 0
    # spectrum
    guidance_weight: float = 3.0
    sampler: str = "ddim"
    ddim_steps: int = 20
    grid: tuple | None = None
    seeds_per_image: int = 4
    synthetic_scale: float = 3.0
    # fidelity filter
    filter_per_class: int = 300
    filter_epochs: int = 40
    calibration_per_class: int = 20
    h_filter: float | str = "calibrated"
    # hardness
    hard_rule: str | None = None
    h_hard: float = 0.1
    # classifier
    pretrain_epochs: int | None = None
    epochs: int = 25
    curriculum_epochs: int = 20
    batch_size: int = 32
    learn_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # curriculum
    strategy: str | None = None
    fixed_level: float | None = None
    probe_fraction: float = 0.1
    validation_per_lambda: int = 16
    tail_fraction: float | None = None
    rollback_probe: bool = False
    # ablation battery
    battery_seeds: int = 5
    scale_sweep: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 6.0)
    threshold_offsets: tuple = (-0.02, 0.0, 0.02)
    # run
    workers: int = 1
    out_dir: str | None = None
    cache_dir: str | None = None

    def __post_init__(self):
        _validate(self)

    # -- derived views ------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_classes=self.num_classes, head_count=self.head_count, imbalance_ratio=self.imbalance_ratio,
            image_size=self.image_size, test_per_class=self.test_per_class,
            corruption_fraction=self.corruption_fraction, world_seed=self.world_seed, seed=self.data_seed,
        )

    def run_dir(self) -> Path:
        """Output directory: the environment override wins, then ``out_dir``, then a default."""
        env = os.environ.get(OUT_ENV)
        if env:
            return Path(env)
        return Path(self.out_dir or f"runs/{self.task}-seed{self.seed}")

    @classmethod
    def preset(cls, task: str, seed: int, **overrides) -> "ExperimentConfig":
        """Resolved config for ``task`` with keyword overrides."""
        return resolve({"task": task, "seed": seed, **overrides})

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# key -> (accepted python types, allow None)
_INT, _FLOAT, _STR, _BOOL = (int,), (int, float), (str,), (bool,)


def _spec_types() -> dict[str, tuple[tuple, bool]]:
    t = {}
    for f in fields(ExperimentConfig):
        ann = str(f.type)
        nullable = "None" in ann
        if ann.startswith("int"):
            kinds = _INT
        elif ann.startswith("float | str"):
            kinds = (int, float, str)
        elif ann.startswith("float"):
            kinds = _FLOAT
        elif ann.startswith("bool"):
            kinds = _BOOL
        elif ann.startswith("tuple"):
            kinds = (list, tuple)
        else:
            kinds = _STR
        t[f.name] = (kinds, nullable)
    return t


_TYPES = _spec_types()
REQUIRED = ("task", "seed")


def _schema(key: str, msg: str) -> ConfigError:
    return ConfigError("schema", f"config key {key!r}: {msg}", key)


def _check_type(key: str, value) -> None:
    kinds, nullable = _TYPES[key]
    if value is None:
        if not nullable:
            raise _schema(key, "must not be null")
        return
    # bool is an int subclass; keep the two apart
    if isinstance(value, bool) and bool not in kinds:
        raise _schema(key, f"expected {'/'.join(k.__name__ for k in kinds)}, got bool")
    if not isinstance(value, kinds):
        raise _schema(key, f"expected {'/'.join(k.__name__ for k in kinds)}, got {type(value).__name__}")


def _validate(c: ExperimentConfig) -> None:
    for key in _TYPES:
        _check_type(key, getattr(c, key))
    if c.task not in TASKS:
        raise _schema("task", f"unknown task {c.task!r}; expected one of {TASKS}")
    positive = (
        "num_classes", "head_count", "image_size", "test_per_class", "diffusion_steps", "corpus_per_class",
        "diffusion_epochs", "diffusion_batch_size", "diffusion_width", "diffusion_depth", "ddim_steps",
        "seeds_per_image", "filter_per_class", "filter_epochs", "calibration_per_class", "epochs", "batch_size",
        "validation_per_lambda", "battery_seeds", "workers",
    )
    for key in positive:
        if getattr(c, key) < 1:
            raise _schema(key, "must be positive")
    if c.seed < 0:
        raise _schema("seed", "must be non-negative")
    if c.imbalance_ratio < 1:
        raise _schema("imbalance_ratio", "must be at least 1")
    if not (0 < c.beta_min < c.beta_max < 1):
        raise _schema("beta_max", "need 0 < beta_min < beta_max < 1")
    if c.sampler not in SAMPLERS:
        raise _schema("sampler", f"unknown sampler {c.sampler!r}; expected one of {SAMPLERS}")
    if c.grid is not None:
        if len(c.grid) == 0 or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in c.grid):
            raise _schema("grid", "expected a non-empty list of numbers or a preset name")
        if any(not (0 <= v < 1) for v in c.grid) or len(set(c.grid)) != len(c.grid):
            raise _schema("grid", "levels must be distinct and lie in [0, 1)")
    if isinstance(c.h_filter, str) and c.h_filter != "calibrated":
        raise _schema("h_filter", "expected a number or 'calibrated'")
    if not (0.0 <= c.h_hard <= 1.0):
        raise _schema("h_hard", "must lie in [0, 1]")
    if c.hard_rule is not None and c.hard_rule not in ("tail", "probability"):
        raise _schema("hard_rule", "expected 'tail' or 'probability'")
    if c.strategy is not None and c.strategy not in RUN_STRATEGIES:
        raise _schema("strategy", f"unknown strategy {c.strategy!r}; expected one of {RUN_STRATEGIES}")
    if c.strategy == "fixed" and c.fixed_level is None:
        raise _schema("fixed_level", "required by the fixed strategy")
    if c.fixed_level is not None and c.grid is not None and c.fixed_level not in c.grid:
        raise _schema("fixed_level", f"{c.fixed_level} is not on the grid")
    if not (0 <= c.curriculum_epochs <= c.epochs):
        raise _schema("curriculum_epochs", "need 0 <= curriculum_epochs <= epochs")
    if c.pretrain_epochs is not None and c.pretrain_epochs < 0:
        raise _schema("pretrain_epochs", "must be non-negative")
    if c.synthetic_scale < 0:
        raise _schema("synthetic_scale", "must be non-negative")
    if c.tail_fraction is not None and not (0.0 <= c.tail_fraction < 1.0):
        raise _schema("tail_fraction", "must lie in [0, 1)")
    if not (0.0 <= c.probe_fraction <= 1.0):
        raise _schema("probe_fraction", "must lie in [0, 1]")
    if not (0.0 <= c.cond_dropout < 1.0):
        raise _schema("cond_dropout", "must lie in [0, 1)")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0 for v in c.scale_sweep):
        raise _schema("scale_sweep", "expected a list of non-negative numbers")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in c.threshold_offsets):
        raise _schema("threshold_offsets", "expected a list of numbers")


def resolve(raw: dict) -> ExperimentConfig:
    """Validate a raw key/value mapping and fill preset defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("syntax", "config must be a mapping of keys to values")
    for key in raw:
        if key not in _TYPES:
            raise ConfigError("unknown_key", f"unknown config key {key!r}", str(key))
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError("missing_key", f"missing required config key {key!r}", key)
    values = dict(raw)
    grid = values.get("grid")
    if isinstance(grid, str):
        if grid not in GRID_PRESETS:
            raise _schema("grid", f"unknown grid preset {grid!r}; expected one of {tuple(GRID_PRESETS)}")
        values["grid"] = GRID_PRESETS[grid]
    for key, v in values.items():
        _check_type(key, v)
    task = values["task"]
    if task not in PRESETS:
        raise _schema("task", f"unknown task {task!r}; expected one of {TASKS}")
    for key, default in PRESETS[task].items():
        if values.get(key) is None:
            values[key] = default
    for key in ("grid", "scale_sweep", "threshold_offsets"):
        if key in values:
            values[key] = tuple(float(v) for v in values[key])
    for key in ("imbalance_ratio", "corruption_fraction", "beta_min", "beta_max", "diffusion_learn_rate",
                "cond_dropout", "guidance_weight", "synthetic_scale", "h_hard", "learn_rate", "momentum",
                "weight_decay", "probe_fraction", "tail_fraction", "fixed_level"):
        if values.get(key) is not None:
            values[key] = float(values[key])
    if isinstance(values.get("h_filter"), (int, float)):
        values["h_filter"] = float(values["h_filter"])
    values["grid"] = tuple(sorted(values["grid"]))
    return ExperimentConfig(**values)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("missing_file", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("syntax", f"{path}: not valid YAML ({exc})") from exc
    return resolve(raw if raw is not None else {})


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("syntax", f"not valid YAML ({exc})") from exc
    return resolve(raw if raw is not None else {})


def write_config(path: str | Path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(cfg.to_yaml())
