"""Noise-prediction U-Net and the semantic encoder that conditions it.

The trainable model has two halves: a semantic encoder mapping a clean image
to a low-dimensional latent, and a U-Net predicting the noise content of a
noised image given the step index and that latent. The encoder mirrors the
U-Net's contracting path plus the middle attention block, with its own
weights, followed by global average pooling and a linear projection.

Architecture conventions:
  * every hidden convolution is a 3x3 conv followed by group norm and SiLU;
  * residual blocks keep channel counts fixed, so their skip is the identity;
  * channel widening happens only in the strided downsample transitions
    (mirrored by the nearest-upsample transitions on the way back up);
  * cross-path skips add down-stage outputs to the matching up-stage inputs,
    which by construction have equal channel counts and resolution;
  * the step index and the semantic latent are each projected per block and
    injected as a scale/shift on the block's second group norm;
  * the second conv of every residual block is zero-initialized so blocks
    start as identity maps; the lone output projection is also zero-initialized
    and is the single conv not followed by norm + activation (a SiLU there
    could not represent negative noise values).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

__all__ = [
    "ModelConfig",
    "DenoiserModel",
    "parameter_count",
    "sinusoidal_time_embedding",
]


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters for the denoiser and semantic encoder."""

    image_size: int = 64
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    layers_per_resolution: int = 3
    middle_attention_layers: int = 3
    latent_dim: int = 128
    time_embed_dim: int = 128
    group_norm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(
            self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers)
        )
        for name in (
            "image_size",
            "base_channels",
            "layers_per_resolution",
            "middle_attention_layers",
            "latent_dim",
            "time_embed_dim",
            "group_norm_groups",
        ):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be non-empty")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel multipliers must be positive")
        if self.latent_dim >= self.image_size**2:
            raise ValueError("latent_dim must be much smaller than the pixel count")
        down_factor = 2 ** (len(self.channel_multipliers) - 1)
        if self.image_size % down_factor != 0:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by {down_factor}"
            )

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def cond_dim(self) -> int:
        """Width of the time-embedding MLP output consumed by block conditioning."""
        return 4 * self.time_embed_dim


def _num_groups(requested: int, channels: int) -> int:
    """Largest group count <= requested that divides the channel count."""
    g = min(requested, channels)
    while channels % g != 0:
        g -= 1
    return g


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos positional features of the step index, shape ``(B, dim)``."""
    if t.ndim != 1:
        raise ValueError("t must be a 1-D batch of step indices")
    half = dim // 2
    device = t.device
    if half > 1:
        exponent = -math.log(10000.0) / (half - 1)
        freqs = torch.exp(exponent * torch.arange(half, dtype=torch.float64, device=device))
    else:
        freqs = torch.ones(half, dtype=torch.float64, device=device)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(t.shape[0], 1, dtype=emb.dtype, device=device)], dim=1)
    return emb


class TimeEmbedding(nn.Module):
    """Sinusoidal features followed by a 2-layer MLP widening to cond_dim."""

    def __init__(self, time_embed_dim: int, cond_dim: int):
        super().__init__()
        self.time_embed_dim = time_embed_dim
        self.mlp = nn.Sequential(
            nn.Linear(time_embed_dim, cond_dim),
            nn.SiLU(),
            nn.Linear(cond_dim, cond_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        emb = sinusoidal_time_embedding(t, self.time_embed_dim).to(dtype)
        return self.mlp(emb)


class ConvBlock(nn.Module):
    """3x3 convolution, group norm, SiLU: the audited convolution unit."""

    def __init__(self, in_channels: int, out_channels: int, groups: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(_num_groups(groups, out_channels), out_channels)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """Two conv units around an identity skip, with optional conditioning.

    Conditioning vectors are projected to per-channel scale/shift pairs and
    applied to the second group norm's output before its activation. The
    second conv starts at zero so the block is an identity map at init.
    """

    def __init__(
        self,
        channels: int,
        groups: int,
        cond_dim: int | None = None,
        latent_dim: int | None = None,
    ):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(_num_groups(groups, channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_num_groups(groups, channels), channels)
        self.act = nn.SiLU()
        self.time_proj = nn.Linear(cond_dim, 2 * channels) if cond_dim else None
        self.latent_proj = nn.Linear(latent_dim, 2 * channels) if latent_dim else None
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(
        self,
        x: torch.Tensor,
        t_emb: torch.Tensor | None = None,
        z: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        if self.time_proj is not None or self.latent_proj is not None:
            cond = 0.0
            if self.time_proj is not None:
                cond = cond + self.time_proj(t_emb)
            if self.latent_proj is not None:
                cond = cond + self.latent_proj(z)
            scale, shift = cond.chunk(2, dim=1)
            h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return x + self.act(h)


class AttentionLayer(nn.Module):
    """Single-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(groups, channels), channels)
        self.query = nn.Linear(channels, channels)
        self.key = nn.Linear(channels, channels)
        self.value = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        flat = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q, k, v = self.query(flat), self.key(flat), self.value(flat)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Backbone(nn.Module):
    """Stem, contracting stages with strided transitions, and the middle block.

    Used twice: conditioned inside the U-Net, unconditioned as the semantic
    encoder's feature extractor.
    """

    def __init__(self, config: ModelConfig, conditioned: bool):
        super().__init__()
        chans = config.channels
        g = config.group_norm_groups
        cond = config.cond_dim if conditioned else None
        lat = config.latent_dim if conditioned else None
        self.stem = ConvBlock(1, chans[0], g)
        self.stages = nn.ModuleList(
            nn.ModuleList(
                ResidualBlock(ch, g, cond, lat)
                for _ in range(config.layers_per_resolution)
            )
            for ch in chans
        )
        self.downs = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], g, stride=2) for i in range(len(chans) - 1)
        )
        self.mid_in = ResidualBlock(chans[-1], g, cond, lat)
        self.mid_attn = nn.ModuleList(
            AttentionLayer(chans[-1], g) for _ in range(config.middle_attention_layers)
        )
        self.mid_out = ResidualBlock(chans[-1], g, cond, lat)

    def forward(self, x, t_emb=None, z=None):
        h = self.stem(x)
        skips = []
        for i, stage in enumerate(self.stages):
            for block in stage:
                h = block(h, t_emb, z)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid_in(h, t_emb, z)
        for attn in self.mid_attn:
            h = attn(h)
        h = self.mid_out(h, t_emb, z)
        return h, skips


class UpsampleBlock(nn.Module):
    """Nearest-neighbor 2x upsample followed by a conv unit."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.block = ConvBlock(in_channels, out_channels, groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionedUNet(nn.Module):
    """U-Net predicting noise from (noised image, step, semantic latent)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.channels
        g = config.group_norm_groups
        self.time_embed = TimeEmbedding(config.time_embed_dim, config.cond_dim)
        self.down = Backbone(config, conditioned=True)
        self.up_stages = nn.ModuleList(
            nn.ModuleList(
                ResidualBlock(ch, g, config.cond_dim, config.latent_dim)
                for _ in range(config.layers_per_resolution)
            )
            for ch in chans
        )
        self.ups = nn.ModuleList(
            UpsampleBlock(chans[i + 1], chans[i], g) for i in range(len(chans) - 1)
        )
        # Bare zero-initialized projection back to one channel; exempt from the
        # conv->norm->SiLU pattern because the output must span all reals.
        self.output_proj = nn.Conv2d(chans[0], 1, 3, padding=1)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        t_emb = self.time_embed(t)
        h, skips = self.down(x, t_emb, z)
        for i in reversed(range(len(self.up_stages))):
            h = h + skips[i]
            for block in self.up_stages[i]:
                h = block(h, t_emb, z)
            if i > 0:
                h = self.ups[i - 1](h)
        return self.output_proj(h)


class SemanticEncoder(nn.Module):
    """Contracting path plus middle block, pooled and projected to the latent."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.backbone = Backbone(config, conditioned=False)
        self.project = nn.Linear(config.channels[-1], config.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, _ = self.backbone(x)
        return self.project(h.mean(dim=(2, 3)))


class DenoiserModel(nn.Module):
    """The only trainable object: semantic encoder + conditioned U-Net.

    ``encode_semantic`` and ``predict_noise`` accept either a single image
    ``(H, W)`` / ``(1, H, W)`` or a batch ``(B, 1, H, W)`` and return outputs
    with matching batchedness. Both are deterministic given fixed weights.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = SemanticEncoder(config)
        self.unet = ConditionedUNet(config)

    def _check_image(self, x: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
        s = self.config.image_size
        if x.ndim == 2:
            x = x[None, None]
            batched = False
        elif x.ndim == 3:
            x = x[None]
            batched = False
        elif x.ndim == 4:
            batched = True
        else:
            raise ValueError(f"{name} must have 2, 3 or 4 dimensions, got {x.ndim}")
        if x.shape[1] != 1 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(
                f"{name} shape {tuple(x.shape)} does not match (B, 1, {s}, {s})"
            )
        return x, batched

    def encode_semantic(self, x0: torch.Tensor) -> torch.Tensor:
        """Deterministically map clean images in [0, 1] to semantic latents."""
        x0, batched = self._check_image(x0, "x0")
        if float(x0.min()) < -1e-6 or float(x0.max()) > 1.0 + 1e-6:
            raise ValueError("x0 values must lie in [0, 1]")
        z = self.encoder(x0)
        return z if batched else z[0]

    def predict_noise(self, x_t: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        """Predicted noise content of ``x_t`` at step ``t`` under latent ``z``.

        ``t`` is a positive step index (int or per-sample 1-D tensor); the
        upper bound is owned by the schedule and enforced by its callers.
        """
        x_t, batched = self._check_image(x_t, "x_t")
        b = x_t.shape[0]
        if torch.is_tensor(t):
            t = t.reshape(-1)
            if t.shape[0] == 1 and b > 1:
                t = t.expand(b)
        else:
            t = torch.full((b,), int(t), dtype=torch.long, device=x_t.device)
        if t.shape[0] != b:
            raise ValueError("t batch length must match x_t")
        if int(t.min()) < 1:
            raise ValueError("step indices must be >= 1")
        if z.ndim == 1:
            z = z[None]
            if b > 1:
                raise ValueError("a single latent cannot condition a batch")
        if z.ndim != 2 or z.shape[0] != b or z.shape[1] != self.config.latent_dim:
            raise ValueError(
                f"z shape {tuple(z.shape)} does not match ({b}, {self.config.latent_dim})"
            )
        eps = self.unet(x_t, t, z)
        return eps if batched else eps[0]

    def channel_plan(self) -> dict[str, tuple[tuple[int, ...], ...]]:
        """Block output channels per stage, introspected from the conv weights."""
        down = tuple(
            tuple(block.conv1.out_channels for block in stage)
            for stage in self.unet.down.stages
        )
        up = tuple(
            tuple(block.conv1.out_channels for block in stage)
            for stage in reversed(self.unet.up_stages)
        )
        return {"down": down, "up": up}


def parameter_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars for a model with this config."""
    model = DenoiserModel(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
