"""Differentiable kernels shared by every model in the package.

All kernels are thin torch compositions so reverse-mode gradients come from
autograd; ``finite_difference_check`` is the independent route used by the
test-suite to validate them.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def assert_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def fourier_embed(x, n_freqs: int = 8) -> torch.Tensor:
    """Interleaved sin/cos embedding with frequencies 2^k * pi.

    ``x`` may be a python scalar or a tensor of any shape; the embedding is
    appended as a trailing axis of size ``2 * n_freqs``.
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    x = torch.as_tensor(x, dtype=torch.get_default_dtype() if not torch.is_tensor(x) else x.dtype)
    assert_finite(x, "fourier_embed input")
    freqs = (2.0 ** torch.arange(n_freqs, dtype=torch.float64) * math.pi).to(x.dtype)
    ang = x[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


def group_norm(x: torch.Tensor, groups: int, scale: torch.Tensor, shift: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    # two-pass moments: a constant group normalises to exact zeros
    xg = x.reshape(n, groups, -1)
    centred = xg - xg.mean(-1, keepdim=True)
    var = (centred * centred).mean(-1, keepdim=True)
    out = (centred * torch.rsqrt(var + eps)).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.dim() - 2)
    return out * scale.reshape(bshape) + shift.reshape(bshape)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.weight, self.bias, self.eps)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Softmax(q k^T / sqrt(d)) over the last axis; q, k are [..., L, d]."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1)


def rowwise_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` computed so each row's result is independent of the row count.

    BLAS picks different kernels for one or two rows than for many, which makes
    a sample's output depend on what it was batched with.
    """
    out = (x[..., None, :] * weight).sum(-1)
    return out if bias is None else out + bias


class RowLinear(nn.Linear):
    def forward(self, x):
        return rowwise_linear(x, self.weight, self.bias)


def attention(q_src: torch.Tensor, kv_src: torch.Tensor, heads: int,
              wq: torch.Tensor, wk: torch.Tensor, wv: torch.Tensor, wo: torch.Tensor,
              bo: torch.Tensor | None = None, rowwise: str = "none") -> torch.Tensor:
    """Multi-head attention of ``q_src`` [B, Lq, C] over ``kv_src`` [B, Lkv, Ckv].

    Projection matrices are stored (out, in) like ``nn.Linear``. ``rowwise``
    ("none", "context" or "all") routes the key/value projections, or every
    projection, through :func:`rowwise_linear`.
    """
    if rowwise not in ("none", "context", "all"):
        raise ValueError(f"unknown rowwise mode {rowwise!r}")
    b, lq, c = q_src.shape
    if kv_src.shape[0] != b or kv_src.shape[-1] != wk.shape[1] or wq.shape[1] != c:
        raise ValueError("incompatible channel counts for attention")
    inner = wq.shape[0]
    if inner % heads:
        raise ValueError(f"inner width {inner} not divisible by {heads} heads")
    dh = inner // heads

    def split(t):
        return t.reshape(b, t.shape[1], heads, dh).transpose(1, 2)

    def gemm(x, w):
        return x @ w.t()

    lin_q = rowwise_linear if rowwise == "all" else gemm
    lin_kv = gemm if rowwise == "none" else rowwise_linear
    q = split(lin_q(q_src, wq))
    k = split(lin_kv(kv_src, wk))
    v = split(lin_kv(kv_src, wv))
    out = attention_weights(q, k) @ v
    out = lin_q(out.transpose(1, 2).reshape(b, lq, inner), wo)
    if bo is not None:
        out = out + bo
    return out


class Attention(nn.Module):
    """Multi-head self/cross attention with an optionally zeroed output projection."""

    def __init__(self, dim: int, heads: int = 4, context_dim: int | None = None,
                 zero_out: bool = False, rowwise: str = "none"):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.rowwise = rowwise
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x, context=None):
        context = x if context is None else context
        return attention(x, context, self.heads, self.to_q.weight, self.to_k.weight,
                         self.to_v.weight, self.to_out.weight, self.to_out.bias, self.rowwise)


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if kernel.shape[-1] % 2 == 0 or kernel.shape[-1] != kernel.shape[-2]:
        raise ValueError("kernel must be square with odd extent")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def trilinear_sample(volume: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``volume`` [C, Z, H, W] at continuous (z, y, x) voxel indices.

    Returns [P, C]. Points outside the closed box [0, Z-1] x [0, H-1] x [0, W-1]
    yield zero.
    """
    c, zd, hd, wd = volume.shape
    pts = points.to(volume.dtype)
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= zd - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= hd - 1)
              & (pts[:, 2] >= 0) & (pts[:, 2] <= wd - 1))
    p = torch.where(inside[:, None], pts, torch.zeros_like(pts))
    lo = torch.floor(p).long()
    # clamp so the +1 corner stays in range; its weight is 0 on the far face
    lo = torch.minimum(lo, torch.tensor([max(zd - 2, 0), max(hd - 2, 0), max(wd - 2, 0)]))
    frac = p - lo.to(p.dtype)
    flat = volume.reshape(c, -1)
    out = torch.zeros(pts.shape[0], c, dtype=volume.dtype)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                iz = torch.clamp(lo[:, 0] + dz, max=zd - 1)
                iy = torch.clamp(lo[:, 1] + dy, max=hd - 1)
                ix = torch.clamp(lo[:, 2] + dx, max=wd - 1)
                wz = frac[:, 0] if dz else 1 - frac[:, 0]
                wy = frac[:, 1] if dy else 1 - frac[:, 1]
                wx = frac[:, 2] if dx else 1 - frac[:, 2]
                idx = (iz * hd + iy) * wd + ix
                out = out + (wz * wy * wx)[:, None] * flat[:, idx].t()
    return out * inside[:, None].to(volume.dtype)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError("backward requires a scalar loss")
    assert_finite(loss.detach(), "loss")
    loss.backward()


def _fd_loop(objective, inputs, j: int, step: float) -> torch.Tensor:
    t = inputs[j]
    g_fd = torch.zeros_like(t)
    flat = t.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = objective(*inputs).item()
        flat[i] = orig - step
        minus = objective(*inputs).item()
        flat[i] = orig
        g_fd.view(-1)[i] = (plus - minus) / (2 * step)
    return g_fd


def _fd_batched(objective, inputs, j: int, step: float) -> torch.Tensor:
    """All central differences of one input in a single vmapped evaluation."""
    t = inputs[j].detach()
    n = t.numel()
    basis = torch.eye(n, dtype=t.dtype).reshape(n, *t.shape) * step
    probes = torch.cat([t + basis, t - basis])

    def one(x):
        args = list(inputs)
        args[j] = x
        return objective(*args)

    vals = torch.func.vmap(one, chunk_size=512)(probes)
    return ((vals[:n] - vals[n:]) / (2 * step)).reshape(t.shape)


def finite_difference_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                            step: float = 1e-3, seed: int = 0) -> float:
    """Relative error between autograd and central differences for ``fn``.

    ``fn`` maps the float64 ``inputs`` to a tensor; it is contracted with a
    fixed random cotangent so every output element contributes. The error is
    ``max|g_ad - g_fd| / max(max|g_fd|, 1e-8)`` across all inputs. Perturbed
    evaluations are batched with ``vmap`` when ``fn`` allows it and looped
    otherwise (data-dependent control flow cannot be vmapped).
    """
    inputs = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    cot = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    (out * cot).sum().backward()

    def objective(*args):
        return (fn(*args) * cot).sum()

    worst = 0.0
    with torch.no_grad():
        for j, t in enumerate(inputs):
            try:
                g_fd = _fd_batched(objective, [x.detach() for x in inputs], j, step)
            except (RuntimeError, ValueError, TypeError, NotImplementedError):
                g_fd = _fd_loop(objective, inputs, j, step)
            scale = max(g_fd.abs().max().item(), 1e-8)
            worst = max(worst, (t.grad - g_fd).abs().max().item() / scale)
    return worst
