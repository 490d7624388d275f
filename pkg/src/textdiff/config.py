"""Experiment configuration: defaults, YAML files, and flag overrides.

Precedence is flags > config file > built-in defaults; the effective config
is always snapshotted into the run directory.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, UnknownVariantError
from .features import BlockSelection
from .schedule import DiffusionConfig

VARIANTS = ("full", "zeta1", "zeta2")

DEFAULT_BLOCKS = (6, 8, 12, 16)
DEFAULT_STEPS = (50, 150, 250)


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 100
    variant: str = "full"
    seed: int = 0
    resample_features: bool = False
    normalize_features: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise UnknownVariantError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class DataSection:
    root: str = ""
    split_seed: int = 0
    train_n: int = 0  # 0: use the manifest's own split


@dataclass(frozen=True)
class TextSection:
    d_text: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_text < 1:
            raise ConfigError(f"text.d_text must be >= 1, got {self.d_text}")


@dataclass(frozen=True)
class FusionSection:
    d: int = 64
    d_v: int = 16
    include_visual: bool = True
    per_step_params: bool = False

    def __post_init__(self):
        if self.d < 1 or self.d_v < 1:
            raise ConfigError("fusion.d and fusion.d_v must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    selection: BlockSelection = field(
        default_factory=lambda: BlockSelection(DEFAULT_BLOCKS, DEFAULT_STEPS)
    )
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    text: TextSection = field(default_factory=TextSection)
    fusion: FusionSection = field(default_factory=FusionSection)

    def to_mapping(self) -> dict:
        return {
            "diffusion": asdict(self.diffusion),
            "selection": {"blocks": list(self.selection.blocks), "steps": list(self.selection.steps)},
            "train": asdict(self.train),
            "data": asdict(self.data),
            "text": asdict(self.text),
            "fusion": asdict(self.fusion),
        }


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    mapping = mapping or {}
    known = {"diffusion", "selection", "train", "data", "text", "fusion"}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sel = dict(mapping.get("selection", {}))
    blocks = sel.get("blocks", DEFAULT_BLOCKS)
    steps = sel.get("steps", DEFAULT_STEPS)
    if isinstance(blocks, str):
        blocks = [int(x) for x in blocks.split(",") if x.strip()]
    if isinstance(steps, str):
        steps = [int(x) for x in steps.split(",") if x.strip()]
    try:
        return ExperimentConfig(
            diffusion=DiffusionConfig(**mapping.get("diffusion", {})),
            selection=BlockSelection(tuple(blocks), tuple(steps)),
            train=TrainSection(**mapping.get("train", {})),
            data=DataSection(**mapping.get("data", {})),
            text=TextSection(**mapping.get("text", {})),
            fusion=FusionSection(**mapping.get("fusion", {})),
        )
    except TypeError as e:
        raise ConfigError(f"bad config key: {e}") from e


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from defaults, an optional YAML file, and overrides."""
    mapping: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        mapping = raw
    if overrides:
        mapping = _deep_merge(mapping, overrides)
    return config_from_mapping(mapping)


def snapshot_config(cfg: ExperimentConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_mapping(), sort_keys=True))
