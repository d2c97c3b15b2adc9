"""Plain-text run configuration: `key = value` lines, `#` comments.

Unknown keys are rejected. Every command writes the fully resolved
configuration next to its outputs; reloading that file reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .attention import SCALE_METHODS
from .pcm import PCMConfig
from .world import WorldConfig

SCHEMES = ("sspl", "sacl")
MASK_KINDS = ("fh", "none")  # plus grid-<d>
FND_FEATURES = ("frozen", "transformed")
UPSAMPLE_MODES = ("nearest", "bilinear")


@dataclass(frozen=True)
class RunConfig:
    # world
    classes: int = 8
    image_size: int = 64
    grid_size: int = 8
    visual_channels: int = 32
    audio_dim: int = 128
    blob_min: float = 0.25
    blob_max: float = 0.5
    audio_noise: float = 0.05
    pixel_noise: float = 0.02
    scenes: int = 800
    # run
    scheme: str = "sspl"
    seed: int = 0
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    scaling: str = "minmax"
    stop_gradient: bool = True
    pcm: bool = False
    pcm_layers: int = 2
    pcm_cycles: int = 5
    pcm_rate_a: float = 0.1
    pcm_rate_b: float = 0.5
    mask: str = "fh"
    fnd: bool = True
    fnd_proportion: float = 0.75
    fnd_features: str = "frozen"
    # merge tolerance and min size follow component AREA, so both shrink by
    # (64*64)/(256*256) = 1/16 relative to their full-resolution values
    fh_scale: float = 63.0
    fh_sigma: float = 0.5
    fh_min_size: int = 63
    upsample: str = "nearest"
    out: str = "out"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scaling not in SCALE_METHODS:
            raise ValueError(f"scaling must be one of {SCALE_METHODS}, got {self.scaling!r}")
        if self.mask not in MASK_KINDS and self.grid_mask_cells() is None:
            raise ValueError(f"mask must be fh, none, or grid-<d>, got {self.mask!r}")
        if self.fnd_features not in FND_FEATURES:
            raise ValueError(f"fnd_features must be one of {FND_FEATURES}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}")
        if not 0.0 < self.fnd_proportion <= 1.0:
            raise ValueError("fnd_proportion must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.scenes < 1:
            raise ValueError("steps, batch_size, and scenes must be sensible")
        if self.pcm_layers < 1:
            raise ValueError("pcm_layers must be >= 1")
        self.world_config()  # validates world fields

    def grid_mask_cells(self):
        if self.mask.startswith("grid-"):
            try:
                d = int(self.mask[5:])
            except ValueError:
                return None
            return d if d >= 1 else None
        return None

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            num_classes=self.classes, image_size=self.image_size,
            grid_size=self.grid_size, visual_channels=self.visual_channels,
            audio_dim=self.audio_dim, blob_min=self.blob_min, blob_max=self.blob_max,
            audio_noise=self.audio_noise, pixel_noise=self.pixel_noise, seed=self.seed)

    def pcm_config(self) -> PCMConfig:
        L = self.pcm_layers
        sizes = tuple(self.grid_size >> (L - l) for l in range(1, L + 1))
        if sizes[0] < 1:
            raise ValueError("too many pcm layers for the feature grid")
        channels = tuple(16 for _ in range(L - 1)) + (self.visual_channels,)
        return PCMConfig(cycles=self.pcm_cycles, layer_channels=channels,
                         layer_sizes=sizes, audio_dim=self.audio_dim,
                         rate_a=(self.pcm_rate_a,) * L, rate_b=(self.pcm_rate_b,) * L)

    def negatives_per_anchor(self):
        """Half-up rounded proportion of the batch, clamped to [1, N-1]."""
        import math
        k = int(math.floor(self.fnd_proportion * self.batch_size + 0.5))
        return max(1, min(self.batch_size - 1, k))


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOLS = {"stop_gradient", "pcm", "fnd"}
_TRUE = {"on", "true", "1", "yes"}
_FALSE = {"off", "false", "0", "no"}


def _coerce(key, raw):
    kind = _FIELDS[key]
    if key in _BOOLS:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"config key {key!r}: expected on/off, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, "r") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{f.name} = {value}\n")
    return "".join(lines)


def write_resolved(cfg: RunConfig, path):
    with open(path, "w", newline="") as fh:
        fh.write(serialize_config(cfg))


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    return replace(cfg, **kwargs)
