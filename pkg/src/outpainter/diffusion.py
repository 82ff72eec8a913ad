"""Toy latent diffusion: linear-beta schedule, a pooling codec in place of a
VAE, a small cross-attention U-Net denoiser, the noise-prediction loss, and
deterministic DDIM inpainting.

The denoiser input is the channel concatenation of the noisy latent, the
masked-image latent, and the downsampled mask.  Every cross-attention block
attends over all rows of one fixed-length context matrix; a fixed sinusoidal
position table is added to the context on the key path only, so the row order
of the context matters unless attention is uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .canvas import MaskedImage
from .validation import (
    ConfigurationError,
    GeometryError,
    TrainingError,
    ValidationError,
    check_image,
)


class NoiseSchedule:
    """Linear beta schedule with cached cumulative alpha products.

    ``alpha_bar[t]`` is indexed by t in 0..T with ``alpha_bar[0] == 1``.
    """

    def __init__(self, timesteps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02):
        if timesteps < 1:
            raise ValidationError(f"timesteps must be positive, got {timesteps}")
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        if betas[0] <= 0.0 or betas[-1] >= 1.0 or np.any(np.diff(betas) < 0):
            raise ValidationError("betas must be nondecreasing and lie strictly inside (0, 1)")
        self.timesteps = int(timesteps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.betas = betas
        self.alphas = 1.0 - betas
        alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas)])
        if np.any(np.diff(alpha_bar) >= 0) or alpha_bar[-1] <= 0.0:
            raise ValidationError("cumulative alpha products must decrease strictly within (0, 1)")
        self.alpha_bar = alpha_bar

    def to_dict(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(data["timesteps"], data["beta_start"], data["beta_end"])


def _alpha_bar_tensor(schedule: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar at step(s) t, shaped to broadcast against `like`."""
    table = torch.as_tensor(schedule.alpha_bar, dtype=like.dtype, device=like.device)
    t_idx = torch.as_tensor(t, dtype=torch.long, device=like.device)
    if t_idx.min() < 1 or t_idx.max() > schedule.timesteps:
        raise ValidationError(
            f"t must lie in [1, {schedule.timesteps}], got {t_idx.min()}..{t_idx.max()}"
        )
    ab = table[t_idx]
    while ab.dim() < like.dim():
        ab = ab.unsqueeze(-1)
    return ab


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if eps.shape != x0.shape:
        raise ValidationError(f"noise shape {tuple(eps.shape)} != input shape {tuple(x0.shape)}")
    ab = _alpha_bar_tensor(schedule, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


class LatentCodec:
    """Fixed image<->latent codec: f-times average-pool down, nearest up.

    Images are (H, W, 3) floats in [0, 1]; latents are (3, H/f, W/f) tensors
    roughly in [-1, 1].
    """

    def __init__(self, factor: int = 4):
        if factor < 1:
            raise ValidationError(f"downsample factor must be positive, got {factor}")
        self.factor = int(factor)

    def _check_divisible(self, h: int, w: int):
        if h % self.factor or w % self.factor:
            raise GeometryError(
                f"image size {h}x{w} is not divisible by the downsample factor {self.factor}"
            )

    def encode(self, image, dtype=torch.float32) -> torch.Tensor:
        img = check_image(image)
        self._check_divisible(*img.shape[:2])
        x = torch.as_tensor(img, dtype=dtype).permute(2, 0, 1) * 2.0 - 1.0
        return F.avg_pool2d(x.unsqueeze(0), self.factor).squeeze(0)

    def encode_mask(self, mask, dtype=torch.float32) -> torch.Tensor:
        m = torch.as_tensor(np.asarray(mask), dtype=dtype)
        if m.dim() != 2:
            raise GeometryError(f"mask must be 2-dimensional, got shape {tuple(m.shape)}")
        self._check_divisible(*m.shape)
        return F.avg_pool2d(m.unsqueeze(0).unsqueeze(0), self.factor).squeeze(0)

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        if latent.dim() != 3 or latent.shape[0] != 3:
            raise GeometryError(f"latent must be (3, h, w), got {tuple(latent.shape)}")
        up = latent.repeat_interleave(self.factor, dim=1).repeat_interleave(self.factor, dim=2)
        img = (up.permute(1, 2, 0) + 1.0) / 2.0
        return img.clamp(0.0, 1.0).detach().cpu().numpy().astype(np.float32)


@dataclass(frozen=True)
class DenoiserConfig:
    """Shape of the toy U-Net.

    `attn_levels` lists which resolution levels carry cross-attention
    (0 = full latent resolution, 1 = once-downsampled); the middle block
    always attends.
    """

    context_len: int
    context_dim: int
    base_channels: int = 16
    attn_levels: tuple[int, ...] = (1,)
    downsample: int = 4
    timesteps: int = 100
    latent_channels: int = 3

    def __post_init__(self):
        if self.context_len < 1 or self.context_dim < 1:
            raise ConfigurationError("context_len and context_dim must be positive")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigurationError("base_channels must be a positive even number")
        if any(level not in (0, 1) for level in self.attn_levels):
            raise ConfigurationError("attn_levels entries must be 0 or 1")

    def to_dict(self) -> dict:
        return {
            "context_len": self.context_len,
            "context_dim": self.context_dim,
            "base_channels": self.base_channels,
            "attn_levels": list(self.attn_levels),
            "downsample": self.downsample,
            "timesteps": self.timesteps,
            "latent_channels": self.latent_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        data = dict(data)
        data["attn_levels"] = tuple(data.get("attn_levels", (1,)))
        return cls(**data)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer steps; `dim` must be even."""
    half = dim // 2
    scale = math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(-scale * torch.arange(half, dtype=t.dtype, device=t.device))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ResidualBlock(nn.Module):
    """Two convolutions with a time-conditioned shift.

    The shift lands after the second norm, not before it: a narrow GroupNorm
    would otherwise subtract a per-channel constant right back out and erase
    the step conditioning.
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        shift = self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h) + shift))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head attention from spatial cells onto the context rows.

    A fixed sinusoidal table over row positions is added to the context on
    the key path only: with uniform attention the output is the plain mean of
    the value rows, so permuting the context changes nothing; with any other
    attention pattern the row order matters.
    """

    def __init__(self, channels: int, context_len: int, context_dim: int):
        super().__init__()
        self.context_len = int(context_len)
        self.norm = _group_norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        positions = sinusoidal_embedding(
            torch.arange(context_len, dtype=torch.float64), context_dim + (context_dim % 2)
        )[:, :context_dim]
        self.register_buffer("key_positions", positions, persistent=False)

    def forward(self, x, context):
        if context.dim() != 3 or context.shape[1] != self.context_len:
            raise ConfigurationError(
                f"context must be (B, {self.context_len}, d), got {tuple(context.shape)}"
            )
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(context + self.key_positions.to(context.dtype))
        v = self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Two-level U-Net predicting noise from the masked-image conditioning.

    Input channels: noisy latent, masked-image latent, and mask, concatenated.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        lc = config.latent_channels
        time_dim = 4 * c
        self.time_mlp = nn.Sequential(nn.Linear(c, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

        self.conv_in = nn.Conv2d(2 * lc + 1, c, 3, padding=1)
        self.res_down = ResidualBlock(c, c, time_dim)
        self.attn_down = (
            CrossAttention(c, config.context_len, config.context_dim)
            if 0 in config.attn_levels else None
        )
        self.downsample = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.res_mid1 = ResidualBlock(2 * c, 2 * c, time_dim)
        self.attn_mid = CrossAttention(2 * c, config.context_len, config.context_dim)
        self.res_mid2 = ResidualBlock(2 * c, 2 * c, time_dim)
        self.up_conv = nn.Conv2d(2 * c, c, 3, padding=1)
        self.res_up = ResidualBlock(2 * c, c, time_dim)
        self.attn_up = (
            CrossAttention(c, config.context_len, config.context_dim)
            if 1 in config.attn_levels else None
        )
        self.norm_out = _group_norm(c)
        self.conv_out = nn.Conv2d(c, lc, 3, padding=1)

    def forward(self, x_t, t, masked_latent, mask_latent, context):
        if masked_latent.shape != x_t.shape:
            raise ValidationError("masked latent shape does not match the noisy latent")
        if mask_latent.shape[-2:] != x_t.shape[-2:] or mask_latent.shape[1] != 1:
            raise ValidationError("mask latent must be (B, 1, h, w) matching the latent grid")
        if x_t.shape[-1] % 2 or x_t.shape[-2] % 2:
            raise GeometryError("latent grid sides must be even for the downsampling level")
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        temb = self.time_mlp(sinusoidal_embedding(t, self.config.base_channels))

        h0 = self.conv_in(torch.cat([x_t, masked_latent, mask_latent], dim=1))
        h0 = self.res_down(h0, temb)
        if self.attn_down is not None:
            h0 = self.attn_down(h0, context)
        h = self.downsample(h0)
        h = self.res_mid1(h, temb)
        h = self.attn_mid(h, context)
        h = self.res_mid2(h, temb)
        h = self.up_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.res_up(torch.cat([h, h0], dim=1), temb)
        if self.attn_up is not None:
            h = self.attn_up(h, context)
        return self.conv_out(F.silu(self.norm_out(h)))


def noise_prediction_loss(denoiser, x0, masked_latent, mask_latent, context, t, eps,
                          schedule: NoiseSchedule) -> torch.Tensor:
    """MSE between predicted and true noise at the sampled steps."""
    x_t = add_noise(x0, t, eps, schedule)
    pred = denoiser(x_t, t, masked_latent, mask_latent, context)
    return ((pred - eps) ** 2).mean()


def train_step(denoiser, conditioner, optimizer, batch: dict, schedule: NoiseSchedule,
               generator: torch.Generator, on_context=None) -> float:
    """One optimization step over a prepared batch.

    `batch` holds latents (B, C, h, w), masked_latents, mask_latents, and the
    three token blocks (B, L, d).  Gradients flow into the denoiser and the
    conditioner; the encoders that produced the token blocks stay frozen.
    `on_context`, when given, receives the assembled context tensor (detached)
    before the denoiser runs; instrumentation only.
    """
    x0 = batch["latents"]
    if x0.shape[0] < 1:
        raise ValidationError("training batch is empty")
    t = torch.randint(1, schedule.timesteps + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    context = conditioner(batch["global_blocks"], batch["local_blocks"], batch["visual_blocks"])
    if on_context is not None:
        on_context(context.detach())
    loss = noise_prediction_loss(
        denoiser, x0, batch["masked_latents"], batch["mask_latents"], context, t, eps, schedule
    )
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss.item()!r}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Descending subsequence of 1..T used by the deterministic sampler."""
    if steps < 1 or steps > timesteps:
        raise ValidationError(f"steps must lie in [1, {timesteps}], got {steps}")
    ts = np.unique(np.linspace(timesteps, 1, steps).round().astype(int))
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def sample_inpaint(masked: MaskedImage, context: torch.Tensor, denoiser, schedule: NoiseSchedule,
                   codec: LatentCodec, steps: int, seed: int,
                   guidance_scale: float | None = None) -> np.ndarray:
    """Deterministic DDIM inpainting of one masked window.

    Runs the reverse process from seeded noise, decodes, clamps to [0, 1],
    and overwrites the kept region with the original kept pixels exactly.
    """
    masked_latent = codec.encode(masked.image)
    mask_latent = codec.encode_mask(masked.mask)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(masked_latent.shape, generator=gen, dtype=masked_latent.dtype)

    if context.dim() == 2:
        context = context.unsqueeze(0)
    ml, mk = masked_latent.unsqueeze(0), mask_latent.unsqueeze(0)
    ab = schedule.alpha_bar
    plan = ddim_timesteps(schedule.timesteps, steps)
    for i, t in enumerate(plan):
        t_prev = plan[i + 1] if i + 1 < len(plan) else 0
        eps_hat = denoiser(x.unsqueeze(0), torch.tensor([t]), ml, mk, context).squeeze(0)
        if guidance_scale is not None and guidance_scale != 1.0:
            eps_free = denoiser(
                x.unsqueeze(0), torch.tensor([t]), ml, mk, torch.zeros_like(context)
            ).squeeze(0)
            eps_hat = eps_free + guidance_scale * (eps_hat - eps_free)
        x0_pred = (x - math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(ab[t])
        x = math.sqrt(ab[t_prev]) * x0_pred + math.sqrt(1.0 - ab[t_prev]) * eps_hat

    image = codec.decode(x)
    keep = masked.mask == 0
    image[keep] = masked.image[keep]
    return image
