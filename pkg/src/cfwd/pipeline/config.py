"""Training configuration and its plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..hfpm import HfpmVersion
from ..vlg import DEFAULT_NEGATIVE, DEFAULT_POSITIVE


@dataclass
class TrainConfig:
    # wavelet / guidance
    levels: int = 2
    guidance_scale: int = 3
    vlg_mode: str = "corrected"
    prompt_positive: str = DEFAULT_POSITIVE
    prompt_negative: str = DEFAULT_NEGATIVE
    prompt_embeddings: str = ""
    # diffusion
    timesteps: int = 200
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sampling_steps: int = 10
    sampling_mode: str = "implicit"
    normalize_latent: bool = True
    # optimisation
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    batch_size: int = 16
    patch_size: int = 256
    iterations: int = 200_000
    checkpoint_every: int = 10_000
    log_every: int = 100
    hflip: bool = False
    seed: int = 0
    deterministic: bool = True
    # losses
    amp_weight: float = 1.0
    phase_weight: float = 1.0
    wrapped_phase: bool = False
    layer_weights: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    use_vlg: bool = True
    use_hfpm: bool = True
    use_content: bool = True
    hfpm_version: str = "v3"
    # architecture
    channels: int = 3
    base_channels: int = 32
    unet_levels: int = 2
    hfpm_width: int = 16

    def __post_init__(self):
        self.layer_weights = tuple(float(g) for g in self.layer_weights)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.levels <= 3:
            raise ConfigError(f"levels must be in 1..3, got {self.levels}")
        if self.guidance_scale not in (0, 1, 2, 3):
            raise ConfigError(f"guidance_scale must be in 0..3, got {self.guidance_scale}")
        if self.patch_size % (2 ** (self.levels + self.unet_levels)):
            raise ConfigError(
                f"patch_size {self.patch_size} must be divisible by 2^(levels + unet_levels) "
                f"= {2 ** (self.levels + self.unet_levels)}"
            )
        if len(self.layer_weights) != 5 or any(g < 0 for g in self.layer_weights):
            raise ConfigError(f"layer_weights needs 5 nonnegative values, got {self.layer_weights}")
        if self.vlg_mode not in ("literal", "corrected"):
            raise ConfigError(f"vlg_mode must be literal|corrected, got {self.vlg_mode!r}")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"schedule must be linear|cosine, got {self.schedule!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant|cosine, got {self.lr_schedule!r}")
        if self.sampling_mode not in ("implicit", "ancestral"):
            raise ConfigError(f"sampling_mode must be implicit|ancestral, got {self.sampling_mode!r}")
        if not 1 <= self.sampling_steps <= self.timesteps:
            raise ConfigError(f"sampling_steps must be in 1..{self.timesteps}")
        try:
            HfpmVersion.parse(self.hfpm_version)
        except ValueError as exc:
            raise ConfigError(f"unknown hfpm_version {self.hfpm_version!r}") from exc
        for name in ("batch_size", "iterations", "checkpoint_every", "log_every", "timesteps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_weights"] = list(self.layer_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def smoke_config(**overrides) -> TrainConfig:
    """Desk-scale preset: small batches and patches, short run, higher learning rate
    annealed to zero over the run."""
    base = dict(
        batch_size=2,
        patch_size=64,
        iterations=5000,
        learning_rate=1e-3,
        lr_schedule="cosine",
        checkpoint_every=1000,
        log_every=50,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(float(raw)) if raw.lower().count("e") else int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def parse_config_text(text: str) -> TrainConfig:
    defaults = TrainConfig()
    values = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
