"""
UNet building blocks

Every unit takes (h, temb) so encoder and decoder stacks can be run as
plain lists, and every 3x3 convolution honours the configured padding mode.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def normalization(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


def conv3x3(c_in: int, c_out: int, padding_mode: str = "zeros", stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1, padding_mode=padding_mode)


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """
    [sin | cos] features of a batch of scalars, x: [B] -> [B, dim].
    At x = 0 the sin half is all zeros and the cos half all ones.
    """
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=x.device) / half)
    args = x.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    """sinusoidal(t) -> Linear -> SiLU -> Linear"""

    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.base_dim).to(dtype))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, padding_mode: str = "zeros"):
        super().__init__()
        self.norm1 = normalization(c_in)
        self.conv1 = conv3x3(c_in, c_out, padding_mode)
        self.temb_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = normalization(c_out)
        self.conv2 = conv3x3(c_out, c_out, padding_mode)
        self.skip = nn.Conv2d(c_in, c_out, kernel_size=1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Global multi-head self-attention over spatial positions, residual."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads if channels % heads == 0 else 1
        self.norm = normalization(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, kernel_size=1)
        self.proj = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, self.heads, C // self.heads, H * W).unbind(1)
        out = F.scaled_dot_product_attention(q.transpose(-1, -2), k.transpose(-1, -2), v.transpose(-1, -2))
        out = out.transpose(-1, -2).reshape(B, C, H, W)
        return x + self.proj(out)


class ConvIn(nn.Module):
    def __init__(self, c_in: int, c_out: int, padding_mode: str = "zeros"):
        super().__init__()
        self.conv = conv3x3(c_in, c_out, padding_mode)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Downsample(nn.Module):
    def __init__(self, channels: int, padding_mode: str = "zeros"):
        super().__init__()
        self.conv = conv3x3(channels, channels, padding_mode, stride=2)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class ResUnit(nn.Module):
    """ResBlock, optionally followed by attention and a 2x upsample."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int, padding_mode: str = "zeros", attention: bool = False, heads: int = 4, upsample: bool = False):
        super().__init__()
        self.res = ResBlock(c_in, c_out, temb_dim, padding_mode)
        self.attn = AttentionBlock(c_out, heads) if attention else None
        self.up = conv3x3(c_out, c_out, padding_mode) if upsample else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h)
        if self.up is not None:
            h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return h


class MidBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int, padding_mode: str = "zeros", heads: int = 4):
        super().__init__()
        self.res1 = ResBlock(channels, channels, temb_dim, padding_mode)
        self.attn = AttentionBlock(channels, heads)
        self.res2 = ResBlock(channels, channels, temb_dim, padding_mode)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.res2(self.attn(self.res1(x, temb)), temb)


class ConvOut(nn.Module):
    def __init__(self, c_in: int, c_out: int, padding_mode: str = "zeros"):
        super().__init__()
        self.norm = normalization(c_in)
        self.conv = conv3x3(c_in, c_out, padding_mode)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.silu(self.norm(x)))
