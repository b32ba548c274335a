"""Conditional encoder-decoder noise predictor eps_theta(x_t, condition, t).

Architecture (``C`` latent channels, ``b`` base channels, ``L`` levels,
``c_i = b * 2**i``, timestep width ``E = 4b``)::

    time:   sinusoid(t, b) -> Linear(b, E) -> SiLU -> Linear(E, E)
    stem:   Conv3x3(2C -> b)                       input = concat(x_t, condition)
    down i: ResBlock(c_{i-1} -> c_i)  [skip]  Conv3x3 stride 2 (c_i -> c_i)     (c_{-1} = b)
    mid:    ResBlock(c_{L-1}) -> SelfAttention(c_{L-1}) -> ResBlock(c_{L-1})
    up i:   nearest x2 -> Conv3x3(c -> c) -> concat skip -> ResBlock(c + c_i -> c_i)
    head:   GroupNorm -> SiLU -> Conv3x3(b -> C)

    ResBlock(cin -> cout): GN -> SiLU -> Conv3x3 -> + Linear(E, cout)(SiLU(temb))
                           -> GN -> SiLU -> Conv3x3, residual via 1x1 conv if cin != cout
    SelfAttention(c):      GN -> 1x1 qkv (c -> 3c) -> single-head softmax attention
                           -> 1x1 proj (c -> c), residual

GroupNorm uses ``gcd(channels, 8)`` groups.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArchitecture, ShapeMismatch, StepOutOfRange


def num_groups(channels: int) -> int:
    return math.gcd(channels, 8)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sin/cos features of integer timesteps, ``(N,) -> (N, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, t):
        emb = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(num_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(num_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        out = F.scaled_dot_product_attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2))
        return x + self.proj(out.transpose(1, 2).reshape(n, c, h, w))


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionalUNet(nn.Module):
    def __init__(self, in_channels: int = 3, base_channels: int = 32, levels: int = 2):
        super().__init__()
        if base_channels < 4 or levels < 1 or in_channels < 1:
            raise InvalidArchitecture(
                f"need base_channels >= 4, levels >= 1, in_channels >= 1; "
                f"got {base_channels}, {levels}, {in_channels}"
            )
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.levels = levels
        E = 4 * base_channels
        chans = [base_channels * 2**i for i in range(levels)]

        self.time = TimestepEmbedding(base_channels, E)
        self.stem = nn.Conv2d(2 * in_channels, base_channels, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = base_channels
        for c in chans:
            self.down_blocks.append(ResBlock(prev, c, E))
            self.downsamples.append(Downsample(c))
            prev = c
        self.mid1 = ResBlock(prev, prev, E)
        self.mid_attn = SelfAttention(prev)
        self.mid2 = ResBlock(prev, prev, E)
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for c in reversed(chans):
            self.upsamples.append(Upsample(prev))
            self.up_blocks.append(ResBlock(prev + c, c, E))
            prev = c
        self.head_norm = nn.GroupNorm(num_groups(prev), prev)
        self.head = nn.Conv2d(prev, in_channels, 3, padding=1)

    @property
    def fingerprint(self) -> str:
        return f"denoiser/unet-v1/in={self.in_channels}/base={self.base_channels}/levels={self.levels}"

    def forward(self, x_t, condition, t):
        if x_t.shape != condition.shape:
            raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs condition {tuple(condition.shape)}")
        if x_t.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} channels, got {x_t.shape[1]}")
        step = 2**self.levels
        if x_t.shape[-2] % step or x_t.shape[-1] % step:
            raise ShapeMismatch(f"spatial size {tuple(x_t.shape[-2:])} not divisible by {step}")
        if not isinstance(t, torch.Tensor):
            t = torch.tensor(t)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        temb = self.time(t)
        h = self.stem(torch.cat([x_t, condition], dim=1))
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = torch.cat([up(h), skips.pop()], dim=1)
            h = block(h, temb)
        return self.head(F.silu(self.head_norm(h)))


def fan_in_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic init: conv/linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    norm layers start at identity (weight 1, bias 0)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=generator))
                if m.bias is not None:
                    m.bias.copy_(torch.empty_like(m.bias).uniform_(-bound, bound, generator=generator))
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_params(seed: int, base_channels: int = 32, levels: int = 2, in_channels: int = 3) -> ConditionalUNet:
    """Build a denoiser with deterministic fan-in-scaled uniform weights."""
    model = ConditionalUNet(in_channels, base_channels, levels)
    fan_in_uniform_(model, torch.Generator().manual_seed(int(seed)))
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_noise(x_t, condition, t, model: ConditionalUNet, T: int | None = None) -> torch.Tensor:
    """eps_hat for a batch; ``T`` (when given) bounds the accepted timesteps."""
    if T is not None:
        tt = torch.as_tensor(t)
        if tt.min() < 1 or tt.max() > T:
            raise StepOutOfRange(f"timestep {t} outside [1, {T}]")
    return model(x_t, condition, t)
