"""Configuration records, presets and override parsing.

Resolution order is defaults < preset < config file < CLI overrides.  Config
files are JSON objects with one section per record (``pe``, ``gat``,
``field``, ``render``, ``train``, ``scene``) whose keys are the dataclass field
names.
"""

import dataclasses
import json
import typing
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


@dataclass
class PEConfig:
    bands_position: int = 10
    bands_direction: int = 4
    include_input: bool = True

    def validate(self):
        if self.bands_position < 0 or self.bands_direction < 0:
            raise ConfigError("frequency band counts must be >= 0")

    def width(self, bands):
        return (3 if self.include_input else 0) + 6 * bands


@dataclass
class GatConfig:
    d_model: int = 256
    n_head: int = 8
    d_ffn: int = 2048
    num_layers: int = 1
    proj_bias: bool = False

    def validate(self):
        if self.d_model <= 0 or self.n_head <= 0 or self.d_ffn <= 0:
            raise ConfigError("GAT dimensions must be positive")
        if self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_head={self.n_head}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")


@dataclass
class FieldConfig:
    delta_dim: int = 76
    latent_dim: int = 32
    width: int = 256
    color_width: int = 128
    view_dependent: bool = True
    # ablations: use_gat=False is "w/o GAT", use_latent=False is "w/o latent code"
    use_gat: bool = True
    use_latent: bool = True

    def validate(self):
        if min(self.delta_dim, self.latent_dim, self.width, self.color_width) <= 0:
            raise ConfigError("field dimensions must be positive")

    @property
    def ablation(self):
        if not self.use_gat:
            return "w/o-GAT"
        if not self.use_latent:
            return "w/o-latent"
        return "full"


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    stratified: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    chunk: int = 1024

    def validate(self):
        if self.n_coarse < 1 or self.n_fine < 1:
            raise ConfigError("sample counts must be >= 1")
        if len(self.background) != 3:
            raise ConfigError("background must be an RGB triple")
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")


@dataclass
class TrainConfig:
    ray_batch: int = 1024
    lr: float = 3e-4
    iterations: int = 300_000
    lambda_gamma: float = 0.05
    foreground_fraction: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_frames: int = 2
    latent_init_std: float = 0.01

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ConfigError("foreground_fraction must lie in [0, 1]")
        if self.ray_batch < 1 or self.iterations < 0:
            raise ConfigError("ray_batch must be >= 1 and iterations >= 0")


@dataclass
class SceneSpec:
    """Procedural dynamic scene standing in for tracked face video."""

    frames: int = 8
    size: int = 48
    seed: int = 0
    delta_dim: int = 76
    radii: tuple = (0.42, 0.36, 0.40)
    coupling: tuple = (0.16, 0.10, 0.10)
    density_scale: float = 25.0
    falloff: float = 0.2
    band_frequency: float = 1.5
    orbit_count: int = 4
    orbit_radius: float = 2.6
    orbit_arc: float = 60.0
    elevation: float = 15.0
    fov: float = 40.0
    t_near: float = 1.4
    t_far: float = 3.8
    samples: int = 256
    background: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.size < 11:
            raise ConfigError("size must be >= 11 (SSIM window)")
        if self.delta_dim < 4:
            raise ConfigError("delta_dim must be >= 4 (four driven components)")
        if not self.t_near < self.t_far:
            raise ConfigError("t_near must be < t_far")
        if self.orbit_count < 1 or self.samples < 2:
            raise ConfigError("orbit_count >= 1 and samples >= 2 required")
        if len(self.radii) != 3 or len(self.coupling) != 3:
            raise ConfigError("radii and coupling are 3-vectors")
        # the delta trajectory stays in [-1, 1]
        if any(r - abs(a) <= 0 for r, a in zip(self.radii, self.coupling)):
            raise ConfigError("radii must stay positive for every |delta| <= 1")
        if self.density_scale <= 0 or not 0 < self.falloff < 1:
            raise ConfigError("density_scale > 0 and 0 < falloff < 1 required")


@dataclass
class Config:
    pe: PEConfig = dataclasses.field(default_factory=PEConfig)
    gat: GatConfig = dataclasses.field(default_factory=GatConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    scene: SceneSpec = dataclasses.field(default_factory=SceneSpec)

    def validate(self):
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        """Canonical text form: sorted keys, no whitespace variance."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data):
        cfg = cls()
        apply_dict(cfg, data)
        return cfg


SECTIONS = ("pe", "gat", "field", "render", "train", "scene")

PRESETS = {
    "paper": {
        "gat": {"d_model": 256, "n_head": 8, "d_ffn": 2048},
        "field": {"width": 256, "color_width": 128},
        "render": {"n_coarse": 64, "n_fine": 64},
        "train": {"ray_batch": 1024, "lr": 3e-4, "iterations": 300_000},
        "scene": {"size": 512},
    },
    "desk": {
        "gat": {"d_model": 64, "n_head": 4, "d_ffn": 128},
        "field": {"width": 64, "color_width": 32},
        "render": {"n_coarse": 32, "n_fine": 32},
        # Adam steps are about lr in size whatever the batch, so lr is not scaled down with it
        "train": {"ray_batch": 256, "lr": 3e-4, "iterations": 5000},
        "scene": {"size": 48, "frames": 8},
    },
}


def _coerce(value, typ, key):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)):
                return bool(value)
            raise ValueError(value)
        if typ is int:
            if isinstance(value, bool):
                raise ValueError(value)
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if typ is tuple or origin is tuple:
            if isinstance(value, str):
                value = [float(v) for v in value.strip("()[] ").split(",") if v.strip()]
            return tuple(float(v) for v in value)
        if typ is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(typ, '__name__', typ)}") from None
    return value


def _field_types(obj):
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def set_value(cfg, dotted, value):
    """Set ``section.key`` on ``cfg`` with type checking."""
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {dotted!r}")
    section = getattr(cfg, parts[0])
    types = _field_types(section)
    if parts[1] not in types:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(section, parts[1], _coerce(value, types[parts[1]], dotted))


def apply_dict(cfg, data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of sections")
    for section, values in data.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, value in values.items():
            set_value(cfg, f"{section}.{key}", value)
    return cfg


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def resolve(preset=None, file=None, overrides=()):
    """Build a validated :class:`Config` from its layered sources."""
    cfg = Config()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        apply_dict(cfg, PRESETS[preset])
    if file is not None:
        with open(file) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{file}: {exc}") from None
        apply_dict(cfg, data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_value(cfg, key, value)
    return cfg.validate()
