"""Building blocks shared by the two noise predictors."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import Attention, GroupNorm, RowLinear


class TimeResBlock(nn.Module):
    """Residual conv block with an additive time embedding."""

    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.n1, self.c1 = GroupNorm(cin), nn.Conv2d(cin, cout, 3, padding=1)
        self.t = RowLinear(temb, cout)
        self.n2, self.c2 = GroupNorm(cout), nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(F.silu(temb))[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class TokenNorm(nn.Module):
    """Group normalisation for token layouts [B, L, C] (statistics over L and the channel group)."""

    def __init__(self, ch: int, groups: int = 8):
        super().__init__()
        self.norm = GroupNorm(ch, groups)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class FeedForward(nn.Module):
    def __init__(self, ch: int, mult: int = 2, zero_out: bool = False):
        super().__init__()
        self.inp = nn.Linear(ch, ch * mult)
        self.out = nn.Linear(ch * mult, ch)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(F.gelu(self.inp(x)))


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(b n) c h w -> (b n) (h w) c"""
    return x.flatten(2).transpose(1, 2)


def from_tokens(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(b n) (h w) c -> (b n) c h w"""
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], h, w).contiguous()


def frames_to_time(x: torch.Tensor, n: int) -> torch.Tensor:
    """(b n) (h w) c -> (b h w) n c"""
    bn, l, c = x.shape
    if bn % n:
        raise ValueError(f"batch {bn} not divisible by {n} frames")
    return x.reshape(bn // n, n, l, c).transpose(1, 2).reshape(bn // n * l, n, c)


def time_to_frames(x: torch.Tensor, n: int, l: int) -> torch.Tensor:
    """(b h w) n c -> (b n) (h w) c"""
    bl, _, c = x.shape
    return x.reshape(bl // l, l, n, c).transpose(1, 2).reshape(bl // l * n, l, c)


class TemporalAttention(nn.Module):
    """Self-attention across frames at every spatial site, starting as the identity."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.norm = TokenNorm(ch)
        self.attn = Attention(ch, heads, zero_out=True)

    def forward(self, tokens: torch.Tensor, n: int) -> torch.Tensor:
        l = tokens.shape[1]
        t = frames_to_time(tokens, n)
        t = self.attn(self.norm(t)) + t
        return time_to_frames(t, n, l)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
