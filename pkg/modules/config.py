"""
Run configuration: preset defaults, ``key = value`` config files and environment overrides.

Resolution order is preset defaults, then the config file, then explicit arguments
(CLI flags). ``ROUTEFUSE_CONFIG`` and ``ROUTEFUSE_PRESET`` supply a default config path
and preset; a ``.env`` file is honoured.
"""

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

from dotenv import load_dotenv

from modules.voxel_grid import RoiSpec

load_dotenv()

WEATHER_CATEGORIES: Tuple[str, ...] = ("normal", "overcast", "fog", "rain", "sleet", "lightsnow", "heavysnow")
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Raised for unknown sections/keys, unparsable values and bad presets"""


@dataclass
class RunSection:
    seed: int = 0
    preset: str = "desk"
    output_dir: str = "runs"
    log_every: int = 10


@dataclass
class GridConfig:
    x_range: Tuple[float, ...] = (0.0, 19.2)
    y_range: Tuple[float, ...] = (-6.4, 6.4)
    z_range: Tuple[float, ...] = (-2.0, 6.0)
    voxel_size: float = 0.4

    def roi(self) -> RoiSpec:
        return RoiSpec(tuple(self.x_range), tuple(self.y_range), tuple(self.z_range), self.voxel_size)


@dataclass
class ModelConfig:
    token_dim: int = 32
    channels: Tuple[int, ...] = (8, 16, 32)
    bev_channels: int = 16
    visual_channels: Tuple[int, ...] = (8, 16, 16)
    visual_stride: int = 2
    image_height: int = 16
    image_width: int = 16
    knn_base: int = 64
    scaled_attention: bool = True
    router_std: float = 0.02
    head_std: float = 0.01
    head_prior: float = 0.01
    head_zero_init: bool = False
    anchor_size: Tuple[float, ...] = (2.1, 4.2, 2.0)
    anchor_rotations: Tuple[float, ...] = (0.0, 1.5707963267948966)


@dataclass
class LossConfig:
    epsilon: float = 0.1
    margin: float = 0.12
    tau: float = 0.78
    lambda_aux: float = 0.1
    lambda_div: float = 0.02
    lambda_ent: float = 0.01
    # normal, overcast, fog, rain, sleet, lightsnow, heavysnow
    rho: Tuple[float, ...] = (1.0, 1.0, 1.6, 1.3, 2.0, 1.3, 2.0)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    pos_iou: float = 0.5
    neg_iou: float = 0.2


@dataclass
class OptimConfig:
    lr: float = 5e-4
    lr_min: float = 1e-4
    epochs: int = 20
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    visual_pretrain_epochs: int = 0


@dataclass
class SimConfig:
    vocab_seed: int = 7
    vocab_path: str = ""
    prompt_noise: float = 0.3
    min_cars: int = 1
    max_cars: int = 4
    size_jitter: float = 0.15
    placement_retries: int = 50
    lidar_density: float = 10.0
    range_falloff: float = 10.0
    ground_points: int = 250
    ground_z: float = -1.5
    sensor_height: float = 0.0
    radar_density_ratio: float = 0.125
    radar_clutter_points: int = 20
    lidar_keep_coeff: float = 0.7
    lidar_noise_base: float = 0.02
    lidar_noise_coeff: float = 0.10
    radar_keep_coeff: float = 0.1
    radar_noise: float = 0.15
    backscatter_per_severity: float = 30.0
    max_speed: float = 8.0
    doppler_noise: float = 0.1
    lidar_severity: Tuple[float, ...] = (0.0, 0.15, 0.55, 0.35, 0.75, 0.35, 0.90)
    radar_severity: Tuple[float, ...] = (0.0, 0.05, 0.10, 0.10, 0.15, 0.10, 0.15)


@dataclass
class DataConfig:
    train_per_category: int = 100
    test_per_category: int = 20
    train_file: str = "train.jsonl"
    test_file: str = "test.jsonl"


@dataclass
class AblationConfig:
    branch_routing: bool = True
    use_aux: bool = True
    use_div: bool = True
    use_ent: bool = True
    force_fusion_only: bool = False
    fixed_branch: str = "none"
    use_condition_gate: bool = True
    use_sensor_refine: bool = True

    def forced_branch(self) -> Optional[str]:
        """Branch whose weight is pinned to 1, or None when the router is active"""
        if self.force_fusion_only or not self.branch_routing:
            return "F"
        if self.fixed_branch not in ("none", "L", "R", "F"):
            raise ConfigError(f"[ablation] fixed_branch must be one of none, L, R, F; got '{self.fixed_branch}'")
        return None if self.fixed_branch == "none" else self.fixed_branch


@dataclass
class EvalConfig:
    conf_thresh: float = 0.3
    nms_iou: float = 0.1
    iou_thresholds: Tuple[float, ...] = (0.3, 0.5)
    ap_points: int = 40


SECTIONS = ("run", "grid", "model", "loss", "optim", "sim", "data", "ablation", "eval")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def effective_lambdas(self) -> Tuple[float, float, float]:
        """(lambda_aux, lambda_div, lambda_ent) after the loss switches"""
        return (self.loss.lambda_aux if self.ablation.use_aux else 0.0,
                self.loss.lambda_div if self.ablation.use_div else 0.0,
                self.loss.lambda_ent if self.ablation.use_ent else 0.0)

    def validate(self) -> "RunConfig":
        if self.run.preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{self.run.preset}'. Available: {list(PRESETS)}")
        if len(self.model.channels) != 3:
            raise ConfigError("[model] channels needs three layer widths")
        if len(self.model.visual_channels) != 3:
            raise ConfigError("[model] visual_channels needs three stage widths")
        for key in ("rho", ):
            if len(getattr(self.loss, key)) != len(WEATHER_CATEGORIES):
                raise ConfigError(f"[loss] {key} needs {len(WEATHER_CATEGORIES)} values")
        for key in ("lidar_severity", "radar_severity"):
            if len(getattr(self.sim, key)) != len(WEATHER_CATEGORIES):
                raise ConfigError(f"[sim] {key} needs {len(WEATHER_CATEGORIES)} values")
        if not 0.0 <= self.loss.epsilon < 1.0 / 3.0:
            raise ConfigError(f"[loss] epsilon must lie in [0, 1/3), got {self.loss.epsilon}")
        if not 1 <= self.sim.min_cars <= self.sim.max_cars:
            raise ConfigError("[sim] need 1 <= min_cars <= max_cars")
        try:
            self.grid.roi()
        except ValueError as exc:
            raise ConfigError(f"[grid] {exc}") from exc
        self.ablation.forced_branch()
        return self

    def to_ini(self, sections: Optional[Sequence[str]] = None) -> str:
        lines = []
        for name in sections or SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {_format_value(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self, sections: Optional[Sequence[str]] = None) -> str:
        return hashlib.sha256(self.to_ini(sections).encode("utf-8")).hexdigest()

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_scalar(raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def _parse_value(raw: str, default):
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(_parse_scalar(part, kind) for part in raw.split(",") if part.strip())
    return _parse_scalar(raw, type(default))


def preset_config(name: str = "desk") -> RunConfig:
    """Defaults for a named scale preset"""
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'. Available: {list(PRESETS)}")
    config = RunConfig()
    config.run.preset = name
    if name == "paper":
        config.grid.x_range = (0.0, 72.0)
        config.model.token_dim = 512
        config.model.channels = (64, 128, 256)
        config.model.bev_channels = 256
        config.model.visual_channels = (16, 32, 64)
        config.model.visual_stride = 4
        config.model.image_height = 704
        config.model.image_width = 1280
        config.sim.max_cars = 6
    return config


def apply_overrides(config: RunConfig, parser: configparser.ConfigParser, source: str) -> RunConfig:
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]. Known: {list(SECTIONS)}")
        target = getattr(config, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            try:
                setattr(target, key, _parse_value(raw, getattr(target, key)))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{section}] {key} = {raw!r}: {exc}") from exc
    return config


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return parser


def parse_config_text(text: str, preset: Optional[str] = None, source: str = "<string>") -> RunConfig:
    parser = _read_parser(text, source)
    file_preset = parser.get("run", "preset", fallback=None) if parser.has_section("run") else None
    config = preset_config(preset or file_preset or os.getenv("ROUTEFUSE_PRESET") or "desk")
    apply_overrides(config, parser, source)
    if preset:
        config.run.preset = preset
    return config.validate()


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                seed: Optional[int] = None) -> RunConfig:
    """Resolve preset defaults, the config file (explicit or ROUTEFUSE_CONFIG) and flag overrides"""
    path = path or os.getenv("ROUTEFUSE_CONFIG") or None
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        config = parse_config_text(path.read_text(encoding="utf-8"), preset=preset, source=str(path))
    else:
        config = preset_config(preset or os.getenv("ROUTEFUSE_PRESET") or "desk").validate()
    if seed is not None:
        config.run.seed = int(seed)
    return config


def category_index(name: str) -> int:
    try:
        return WEATHER_CATEGORIES.index(name)
    except ValueError:
        raise ConfigError(f"Unknown weather category '{name}'. Available: {list(WEATHER_CATEGORIES)}") from None
