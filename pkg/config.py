import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

load_dotenv()

# Environment variables
NUM_THREADS = int(os.getenv("LVDGS_NUM_THREADS", "1"))
DEBUG = os.getenv("LVDGS_DEBUG", "0").lower() in ("1", "true", "yes")
QUIET = os.getenv("LVDGS_QUIET", "0").lower() in ("1", "true", "yes")
DEFAULT_SEED = int(os.getenv("LVDGS_DEFAULT_SEED", "0"))

# File format markers
FEATURE_MAGIC = b"LVDF"
SIDECAR_MAGIC = b"LVDG"
IGNORE_LABEL = 255

# Rasterizer constants
TILE_SIZE = 16
LOW_PASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
NEAR_PLANE = 0.2
# chi-square(2) quantile holding 99% of a 2D Gaussian's mass
MASS_99_CHI2 = 9.210340371976184


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class LossWeights(_Section):
    lambda_s: float = Field(0.1, ge=0.0)
    lambda_dino: float = Field(0.1, ge=0.0)
    lambda_c: float = Field(0.8, ge=0.0)
    lambda_depth: float = Field(0.2, ge=0.0)

    def appearance_only(self) -> "LossWeights":
        """Color and depth terms only (hierarchical terms switched off)"""
        return self.model_copy(update={"lambda_s": 0.0, "lambda_dino": 0.0})


class UncertaintyWeights(_Section):
    lambda_dino: float = Field(1.0, ge=0.0)
    lambda_depth: float = Field(0.5, ge=0.0)


class MaskingParams(_Section):
    enabled: bool = True
    rho: Literal["geman_mcclure", "geman_mcclure_mean"] = "geman_mcclure"
    sigma_min: float = Field(1e-3, gt=0.0)
    sigma_max: float = Field(10.0, gt=0.0)
    sigma_steps: int = Field(64, ge=2)
    kappa: float = Field(3.0, gt=0.0)
    morph_open_radius: int = Field(1, ge=0)
    uncertainty: UncertaintyWeights = Field(default_factory=UncertaintyWeights)

    @model_validator(mode="after")
    def _check_range(self):
        if self.sigma_max <= self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")
        return self

    @property
    def sigma_search(self) -> Tuple[float, float, int]:
        return self.sigma_min, self.sigma_max, self.sigma_steps


class RegistrationConfig(_Section):
    voxel_size: float = Field(1.0, gt=0.0)
    max_points_per_voxel: int = Field(20, ge=1)
    map_range: float = Field(100.0, gt=0.0)
    max_iterations: int = Field(100, ge=1)
    convergence: float = Field(1e-4, gt=0.0)
    initial_threshold: float = Field(2.0, gt=0.0)
    min_motion: float = Field(0.1, ge=0.0)
    max_range: float = Field(100.0, gt=0.0)


class OptimizerConfig(_Section):
    position_lr: float = Field(1e-3, gt=0.0)
    log_scale_lr: float = Field(5e-3, gt=0.0)
    rotation_lr: float = Field(1e-3, gt=0.0)
    opacity_lr: float = Field(5e-2, gt=0.0)
    color_lr: float = Field(2.5e-2, gt=0.0)
    semantic_lr: float = Field(5e-2, gt=0.0)
    feature_lr: float = Field(2.5e-2, gt=0.0)
    pose_rotation_lr: float = Field(3e-3, gt=0.0)
    pose_translation_lr: float = Field(1e-2, gt=0.0)


class PipelineConfig(_Section):
    seed: int = DEFAULT_SEED
    num_classes: int = Field(4, ge=1)
    class_names: Tuple[str, ...] = ()
    feature_dim: int = Field(8, ge=1)
    tracking_iterations: int = Field(30, ge=1)
    mapping_iterations: int = Field(100, ge=1)
    mapping_window: int = Field(5, ge=1)
    prune_every: int = Field(50, ge=1)
    opacity_min: float = Field(0.05, gt=0.0, lt=1.0)
    keyframe_interval: int = Field(5, ge=1)
    keyframe_translation: float = Field(2.0, gt=0.0)
    submap_extent: float = Field(50.0, gt=0.0)
    init_scale_factor: float = Field(1.0, gt=0.0)
    new_gaussian_alpha_max: float = Field(0.5, gt=0.0, le=1.0)
    hierarchical_losses: bool = True
    loss: LossWeights = Field(default_factory=LossWeights)
    masking: MaskingParams = Field(default_factory=MaskingParams)
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)

    @model_validator(mode="after")
    def _check_classes(self):
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ValueError("class_names must list exactly num_classes names")
        return self

    @property
    def effective_loss_weights(self) -> LossWeights:
        if self.hierarchical_losses:
            return self.loss
        return self.loss.appearance_only()


def _parse_scalar(raw: str) -> Any:
    text = raw.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return tuple(p.strip() for p in text.split(",") if p.strip())
    return text


def parse_config_text(text: str, source: str = "<config>", lines: Optional[Dict[str, int]] = None) -> Dict[str, Any]:
    """Parse `key = value` lines into a nested dict (dots nest); lines collects key -> line number"""
    tree: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}:{lineno}: key {key!r} conflicts with a scalar")
        node[parts[-1]] = _parse_scalar(value)
        if lines is not None:
            lines[key] = lineno
    return tree


def _first_error_key(exc: ValidationError) -> str:
    errs = exc.errors()
    if not errs:
        return "?"
    return ".".join(str(p) for p in errs[0].get("loc", ()))


def build_config(values: Dict[str, Any], source: str = "<config>", lines: Optional[Dict[str, int]] = None) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0] if e.errors() else {}
        key = _first_error_key(e)
        where = f"{source}:{lines[key]}" if lines and key in lines else source
        if first.get("type") == "extra_forbidden":
            raise ConfigError(f"{where}: unknown config key '{key}'") from None
        raise ConfigError(f"{where}: invalid value for '{key}': {first.get('msg', e)}") from None


def load_config(path: str) -> PipelineConfig:
    """Load a run configuration file; unknown keys are rejected by name"""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    lines: Dict[str, int] = {}
    values = parse_config_text(text, str(p), lines)
    return build_config(values, str(p), lines)


def dump_config(config: PipelineConfig) -> str:
    """Render a config back into the key = value format"""
    lines = []

    def walk(prefix: str, data: Dict[str, Any]):
        for k, v in data.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict):
                walk(key + ".", v)
            elif isinstance(v, (list, tuple)):
                if v:
                    lines.append(f"{key} = {', '.join(str(x) for x in v)}")
            else:
                lines.append(f"{key} = {v}")

    walk("", config.model_dump())
    return "\n".join(lines) + "\n"
