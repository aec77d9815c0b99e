"""Flat experiment configuration: JSON schema, validation, overrides.

One document drives every stochastic and architectural choice of a run.
Defaults match the full-scale setup (64x64 inputs, 7.6M-parameter model,
1000-step schedule); the test suite and the synthetic benchmark override
them down to desk scale.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .ddim import SamplerPlan, uniform_plan
from .losses import ContrastConfig
from .networks import ModelConfig
from .schedule import NoiseSchedule, build_linear_schedule

__all__ = ["ConfigError", "ExperimentConfig"]


class ConfigError(ValueError):
    """Unknown key, wrong type, or unsatisfiable value in a config document."""


def _to_bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false"):
        return v.lower() == "true"
    raise ValueError(f"expected a boolean, got {v!r}")


def _to_int_tuple(v):
    if isinstance(v, str):
        v = [p for p in v.replace(",", " ").split() if p]
    return tuple(int(x) for x in v)


def _to_optional_str(v):
    if v is None or v == "" or v == "null":
        return None
    return str(v)


@dataclass
class ExperimentConfig:
    """Every knob of a run, flat, with the single seed for all randomness."""

    seed: int = 0
    device: str = "cpu"
    # model
    image_size: int = 64
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    layers_per_resolution: int = 3
    middle_attention_layers: int = 3
    latent_dim: int = 128
    time_embed_dim: int = 128
    group_norm_groups: int = 8
    # noising schedule
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # deterministic sampler
    decode_steps: int = 50
    invert_steps: int = 50
    # classifier and losses
    knn_k: int = 7
    tau: float = 0.5
    tau_pred: float = 0.1
    weight_diff: float = 1.0
    weight_contrast: float = 1.0
    weight_pred: float = 1.0
    # training
    batch_per_class: int = 16
    warmup_epochs: int = 340
    joint_epochs: int = 500
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    grad_clip: float = 1.0
    freeze_diffusion_in_phase2: bool = False
    checkpoint_every: int = 10
    eval_every: int = 1
    recon_every: int = 10
    warmup_manifest: str | None = None
    joint_manifest: str | None = None

    _COERCERS = {
        "channel_multipliers": _to_int_tuple,
        "freeze_diffusion_in_phase2": _to_bool,
        "warmup_manifest": _to_optional_str,
        "joint_manifest": _to_optional_str,
        "device": str,
        "optimizer": str,
    }

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for name in ("warmup_epochs", "joint_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("learning_rate", "tau", "tau_pred", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in (
            "knn_k",
            "batch_per_class",
            "diffusion_steps",
            "decode_steps",
            "invert_steps",
            "checkpoint_every",
            "eval_every",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.recon_every < 0:
            raise ConfigError("recon_every must be >= 0 (0 disables)")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.decode_steps > self.diffusion_steps or self.invert_steps > self.diffusion_steps:
            raise ConfigError("sampler substeps cannot exceed diffusion_steps")
        if self.knn_k > 2 * self.batch_per_class - 1:
            raise ConfigError(
                "knn_k must fit inside the batch pool (2 * batch_per_class - 1)"
            )

    # -- construction ------------------------------------------------------

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def _coerce(cls, name: str, value):
        hints = {f.name: f.type for f in dataclasses.fields(cls)}
        if name not in hints:
            raise ConfigError(f"unknown config key {name!r}")
        coercer = cls._COERCERS.get(name)
        try:
            if coercer is not None:
                return coercer(value)
            hint = hints[name]
            if hint == "int":
                out = int(value)
                if isinstance(value, float) and value != out:
                    raise ValueError("not an integer")
                return out
            if hint == "float":
                return float(value)
            return value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {name!r}: {value!r} ({exc})") from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        kwargs = {}
        for key, value in doc.items():
            kwargs[key] = cls._coerce(key, value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def apply_overrides(self, overrides) -> "ExperimentConfig":
        """New config with ``key=value`` strings applied and re-validated."""
        doc = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, _, raw = item.partition("=")
            key = key.strip()
            doc[key] = self._coerce(key, raw.strip())
        return ExperimentConfig.from_dict(doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["channel_multipliers"] = list(self.channel_multipliers)
        return doc

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8"
        )

    # -- adapters ----------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            layers_per_resolution=self.layers_per_resolution,
            middle_attention_layers=self.middle_attention_layers,
            latent_dim=self.latent_dim,
            time_embed_dim=self.time_embed_dim,
            group_norm_groups=self.group_norm_groups,
        )

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def contrast_config(self) -> ContrastConfig:
        return ContrastConfig(tau=self.tau, tau_pred=self.tau_pred)

    def decode_plan(self) -> SamplerPlan:
        return uniform_plan(self.diffusion_steps, self.decode_steps)

    def invert_plan(self) -> SamplerPlan:
        return uniform_plan(self.diffusion_steps, self.invert_steps)

    def loss_weights(self) -> tuple[float, float, float]:
        return (self.weight_diff, self.weight_contrast, self.weight_pred)
