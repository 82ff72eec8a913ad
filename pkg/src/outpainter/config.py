"""Run configuration.

One flat dataclass covers data preparation, training, expansion, and
evaluation.  Values merge with precedence: explicit overrides (CLI flags)
beat a JSON config file, which beats the built-in toy defaults.

The toy defaults are sized for CPU runs.  The full-scale reference setup
behind them uses a 512px window with a 256px shift, 77 caption tokens at
width 768, and trains for 25 epochs at batch size 20 on roughly 100k
caption/image pairs; see FULL_SCALE_REFERENCE.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .conditioning import FUSION_MODES
from .validation import ConfigurationError, check_ratio

FULL_SCALE_REFERENCE = {
    "base_window": 512,
    "shift": 256,
    "tokens": 77,
    "embed_dim": 768,
    "epochs": 25,
    "batch_size": 20,
    "pairs": 100_000,
}


@dataclass
class RunConfig:
    # geometry
    base_window: int = 32
    shift: int = 16
    mask_kept: int = 1
    mask_masked: int = 1
    # conditioning
    tokens: int = 8
    embed_dim: int = 32
    hidden: int | None = None
    fusion_mode: str = "dual"
    imagine_count: int = 4
    # denoiser
    base_channels: int = 16
    attn_levels: tuple[int, ...] = (1,)
    downsample: int = 4
    timesteps: int = 100
    sample_steps: int = 25
    # training
    train_steps: int = 200
    batch_size: int = 8
    learning_rate: float = 2e-3
    checkpoint_every: int = 0
    seed: int = 0
    # backend
    backend: str = "stub"
    retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        self.validate()

    @property
    def ratio(self) -> tuple[int, int]:
        return (self.mask_kept, self.mask_masked)

    def validate(self):
        try:
            check_ratio(self.ratio)
        except Exception as exc:
            raise ConfigurationError(f"bad mask ratio {self.ratio}: {exc}") from exc
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        for name in ("base_window", "shift", "tokens", "embed_dim", "imagine_count",
                     "base_channels", "downsample", "timesteps", "sample_steps",
                     "train_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.shift >= self.base_window:
            raise ConfigurationError(
                f"shift ({self.shift}) must be smaller than the base window ({self.base_window})"
            )
        if self.base_window % self.downsample:
            raise ConfigurationError(
                f"base_window ({self.base_window}) must be divisible by "
                f"the latent downsample factor ({self.downsample})"
            )
        if (self.base_window // self.downsample) % 2:
            raise ConfigurationError(
                "the latent grid side (base_window / downsample) must be even"
            )
        if self.sample_steps > self.timesteps:
            raise ConfigurationError("sample_steps cannot exceed timesteps")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.retries < 1 or self.backoff < 0:
            raise ConfigurationError("retries must be >= 1 and backoff >= 0")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0 (0 means final only)")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["attn_levels"] = list(self.attn_levels)
        return data

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_sources(cls, config_file=None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then file values, then explicit overrides."""
        values: dict = {}
        if config_file is not None:
            path = Path(config_file)
            if not path.exists():
                raise ConfigurationError(f"config file {path} does not exist")
            try:
                loaded = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigurationError(f"config file {path} must hold a JSON object")
            values.update(loaded)
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        known = set(cls.field_names())
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        if "attn_levels" in values:
            values["attn_levels"] = tuple(values["attn_levels"])
        if "hidden" in values and values["hidden"] is not None:
            values["hidden"] = int(values["hidden"])
        return cls(**values)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
