"""
Run configuration models

Every setting that affects results is read from a YAML file into these
models. Paths and verbosity stay on the command line.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from structdiff.utils.errors import ConfigError

logger = logging.getLogger(__name__)

MODALITY_CHANNELS = {"rgb": 3, "depth": 1, "normal": 3}
CONDITION_NAMES = ("attrs", "pose", "depth", "normal")
EMBEDDER_TOTAL_STRIDE = {"grid8": 8, "strict16": 16}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RuntimeConfig(_Section):
    device: str = Field(default="cpu", description="torch device string")
    deterministic: bool = Field(default=False, description="Force deterministic kernels")
    workers: int = Field(default=0, ge=0, le=64, description="Dataset generation threads")


class DataConfig(_Section):
    resolution: int = Field(default=48, ge=16, le=512, description="Stage-1 resolution R")
    n: int = Field(default=2000, ge=1, description="Number of generated samples")
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    random_crop_margin: int = Field(default=0, ge=0, le=64, description="Extra canvas pixels for random crops")


class ScheduleConfig(_Section):
    T: int = Field(default=1000, ge=2, le=10000, description="Training step count")
    beta_start: float = Field(default=8.5e-4, ge=0.0, lt=1.0)
    beta_end: float = Field(default=0.012, ge=0.0, lt=1.0)
    beta_schedule: Literal["linear", "scaled_linear"] = "linear"
    rescale_terminal: bool = Field(default=True, description="Rescale to zero terminal SNR")
    prediction: Literal["v", "epsilon"] = "v"


class ModelConfig(_Section):
    modalities: List[str] = Field(default_factory=lambda: ["rgb", "depth", "normal"])
    replicate: Literal["half", "one", "two"] = Field(default="one", description="Blocks owned by each branch")
    fusion: Literal["mean", "sum"] = "mean"
    width: int = Field(default=32, ge=1, le=512)
    multipliers: List[int] = Field(default_factory=lambda: [1, 2, 4])
    layers_per_block: int = Field(default=2, ge=1, le=4)
    attention_heads: int = Field(default=4, ge=1, le=16)
    padding_mode: Literal["zeros", "circular"] = "zeros"
    pose_channels: int = Field(default=3, ge=0, le=3)
    codec_factor: int = Field(default=1, ge=1, le=32, description="Space-to-depth factor between pixels and the network grid")
    attr_dim: Optional[int] = Field(default=None, ge=1, description="Attribute embedding width; defaults to the time-embedding width")

    @field_validator("modalities")
    @classmethod
    def _known_modalities(cls, value):
        if not value:
            raise ValueError("at least one modality is required")
        unknown = [m for m in value if m not in MODALITY_CHANNELS]
        if unknown:
            raise ValueError(f"unknown modalities {unknown}")
        if len(set(value)) != len(value):
            raise ValueError("modalities must be unique")
        return value

    @field_validator("multipliers")
    @classmethod
    def _positive_multipliers(cls, value):
        if not value or any(m < 1 for m in value):
            raise ValueError("multipliers must be a non-empty list of positive integers")
        return value


class TrainConfig(_Section):
    lr: float = Field(default=1e-4, gt=0.0, description="Learning rate (1e-5 at full scale)")
    wd: float = Field(default=0.01, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    dropout: float = Field(default=0.15, ge=0.0, le=1.0, description="Stage-1 condition dropout")
    steps: int = Field(default=20000, ge=1)
    batch: int = Field(default=16, ge=1)
    ema_decay: float = Field(default=0.999, ge=0.0, le=1.0)
    timestep_mode: Literal["shared", "independent"] = "shared"
    loss_weights: Dict[str, float] = Field(default_factory=dict, description="Experimental per-modality weights")
    checkpoint_every: int = Field(default=1000, ge=1)
    log_every: int = Field(default=100, ge=1)


class RefinerConfig(_Section):
    resolution_factor: int = Field(default=2, ge=1, le=4, description="Stage-2 resolution is R times this")
    codec_factor: int = Field(default=8, ge=1, le=32)
    embedder_stride_mode: Literal["grid8", "strict16"] = "grid8"
    embedder_channels: List[int] = Field(default_factory=lambda: [16, 32, 96, 256])
    conditions: List[str] = Field(default_factory=lambda: ["attrs", "pose", "depth", "normal"])
    dropout: float = Field(default=0.5, ge=0.0, le=1.0, description="Stage-2 condition dropout")
    base_steps: int = Field(default=20000, ge=1)
    base_width: int = Field(default=32, ge=1)
    base_multipliers: List[int] = Field(default_factory=lambda: [1, 2])

    @field_validator("conditions")
    @classmethod
    def _known_conditions(cls, value):
        unknown = [c for c in value if c not in CONDITION_NAMES]
        if unknown:
            raise ValueError(f"unknown conditions {unknown}")
        return value

    @field_validator("embedder_channels")
    @classmethod
    def _four_layers(cls, value):
        if len(value) != 4 or any(c < 1 for c in value):
            raise ValueError("condition embedders have exactly four positive channel counts")
        return value


class SampleConfig(_Section):
    steps: int = Field(default=50, ge=1, le=1000)
    cfg: float = Field(default=7.5, ge=0.0, le=50.0, description="Classifier-free guidance scale")
    batch: int = Field(default=8, ge=1)


class EstimatorConfig(_Section):
    width: int = Field(default=32, ge=4)
    steps: int = Field(default=3000, ge=1)
    batch: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    depth_l1_gate: float = Field(default=0.05, gt=0.0)
    pck_gate: float = Field(default=0.9, ge=0.0, le=1.0)


class AblationConfig(_Section):
    suite: Literal["structural", "refiner", "all"] = "structural"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    steps: int = Field(default=20000, ge=1)
    n_eval: int = Field(default=256, ge=64)
    budget_seconds: float = Field(default=7200.0, gt=0.0, description="Per-variant time budget (warning only)")


class CurationConfig(_Section):
    min_bboxes: int = Field(default=1, ge=0)
    max_bboxes: int = Field(default=3, ge=0)
    min_area_ratio: float = Field(default=0.15, ge=0.0, le=1.0)
    min_aesthetic: float = Field(default=4.5, ge=0.0)
    min_side: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _ordered_bbox_bounds(self):
        if self.min_bboxes > self.max_bboxes:
            raise ValueError(f"min_bboxes ({self.min_bboxes}) exceeds max_bboxes ({self.max_bboxes})")
        return self


class StructDiffConfig(_Section):
    seed: int = Field(default=0, ge=0)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    refiner: RefinerConfig = Field(default_factory=RefinerConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    curation: CurationConfig = Field(default_factory=CurationConfig)

    @model_validator(mode="after")
    def _refiner_grid(self):
        r = self.refiner
        stride = EMBEDDER_TOTAL_STRIDE[r.embedder_stride_mode]
        if stride != r.codec_factor:
            raise ValueError(
                f"refiner.embedder_stride_mode {r.embedder_stride_mode} reduces by {stride}, "
                f"refiner.codec_factor must match (got {r.codec_factor})"
            )
        high = self.data.resolution * r.resolution_factor
        grid = r.codec_factor * 2 ** (len(r.base_multipliers) - 1)
        if high % grid:
            raise ValueError(
                f"refiner resolution {high} is not divisible by the base down factor {grid} "
                f"(codec_factor {r.codec_factor}, {len(r.base_multipliers)} levels)"
            )
        return self

    def with_overrides(self, overrides: Dict[str, Any]) -> "StructDiffConfig":
        """Return a copy with dotted-key overrides applied, e.g. {"train.steps": 10}."""
        data = self.model_dump()
        for dotted, value in overrides.items():
            node = data
            keys = dotted.split(".")
            for key in keys[:-1]:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"unknown config section '{dotted}'", {"key": dotted})
                node = node[key]
            node[keys[-1]] = value
        return config_from_dict(data)


def config_from_dict(data: Optional[Dict[str, Any]]) -> StructDiffConfig:
    try:
        return StructDiffConfig.model_validate(data or {})
    except ValidationError as e:
        problems = [
            {"path": ".".join(str(p) for p in err["loc"]), "error": err["msg"]}
            for err in e.errors()
        ]
        paths = ", ".join(p["path"] for p in problems)
        raise ConfigError(f"invalid config: {paths}", {"problems": problems}) from e


def load_config(path: Optional[Union[str, Path]] = None) -> StructDiffConfig:
    """
    Load a YAML config file. No path means all defaults.

    Raises:
        FileNotFoundError: the file does not exist (message carries the path)
        ConfigError: YAML syntax or schema violations
    """
    if path is None:
        return StructDiffConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse {path}: {e}", {"path": str(path)}) from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"top level of {path} must be a mapping", {"path": str(path)})
    config = config_from_dict(data)
    logger.debug(f"Loaded config from {path}")
    return config
