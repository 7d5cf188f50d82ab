"""Latent world-volume autoencoder.

The encoder folds the height axis away with strided 3D convolutions, then
downsamples the ground plane 4x; the decoder mirrors it and emits per-voxel
class logits plus a map head (RGB regression and a validity logit).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import volume as wv
from .numerics import GroupNorm, NonFiniteError, assert_finite

log = logging.getLogger(__name__)


@dataclass
class AEConfig:
    latent_channels: int = 8
    codes: int = 256
    beta_commit: float = 0.25
    lambda_map: float = 1.0
    lr: float = 1e-3
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    width: int = 64
    class_weight_power: float = 0.5


class ResBlock2d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.n1, self.c1 = GroupNorm(ch), nn.Conv2d(ch, ch, 3, padding=1)
        self.n2, self.c2 = GroupNorm(ch), nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.c1(F.silu(self.n1(x)))
        return x + self.c2(F.silu(self.n2(h)))


class HeightConv(nn.Conv3d):
    """Conv3d with kernel = stride = (k, 1, 1), evaluated as a 1x1 conv over folded channels."""

    def __init__(self, cin: int, cout: int, k: int):
        super().__init__(cin, cout, (k, 1, 1), stride=(k, 1, 1))
        self.k = k

    def forward(self, x):
        b, c, z, h, w = x.shape
        m = z // self.k
        xf = x.reshape(b, c, m, self.k, h, w).transpose(1, 2).reshape(b * m, c * self.k, h, w)
        wt = self.weight.reshape(self.out_channels, c * self.k, 1, 1)
        y = F.conv2d(xf, wt, self.bias)
        return y.reshape(b, m, self.out_channels, h, w).transpose(1, 2)


class HeightConvTranspose(nn.ConvTranspose3d):
    """ConvTranspose3d with kernel = stride = (k, 1, 1), evaluated as a 1x1 conv."""

    def __init__(self, cin: int, cout: int, k: int):
        super().__init__(cin, cout, (k, 1, 1), stride=(k, 1, 1))
        self.k = k

    def forward(self, x):
        b, c, m, h, w = x.shape
        cout = self.out_channels
        xf = x.transpose(1, 2).reshape(b * m, c, h, w)
        wt = self.weight.reshape(c, cout * self.k).t().reshape(cout * self.k, c, 1, 1)
        y = F.conv2d(xf, wt)
        y = y.reshape(b, m, cout, self.k, h, w).permute(0, 2, 1, 3, 4, 5).reshape(b, cout, m * self.k, h, w)
        return y + self.bias[None, :, None, None, None]


class _StraightThrough(torch.autograd.Function):
    """Forward returns the code vectors exactly; backward passes gradients to the encoder output."""

    @staticmethod
    def forward(ctx, z, zq):
        return zq.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Nearest-code quantisation of ``z`` [B, C, H, W] with straight-through gradients.

    Returns (z_q, indices [B, H, W], commit_loss, codebook_loss). Distances are
    plain squared differences so ties resolve exactly to the lowest index.
    """
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    b, c, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, c)
    d = ((flat.detach()[:, None, :] - codebook.detach()[None]) ** 2).sum(-1)
    idx = torch.argmin(d, dim=1)
    zq = codebook[idx].reshape(b, h, w, c).permute(0, 3, 1, 2)
    commit = F.mse_loss(z, zq.detach())
    book = F.mse_loss(zq, z.detach())
    zq_st = _StraightThrough.apply(z, zq.detach())
    return zq_st, idx.reshape(b, h, w), commit, book


class VolumeAutoencoder(nn.Module):
    def __init__(self, cfg: AEConfig | None = None, depth: int = wv.Z):
        super().__init__()
        cfg = cfg or AEConfig()
        self.cfg = cfg
        self.depth = depth
        cin = wv.C_OCC + wv.C_MAP
        w = cfg.width
        zk = int(round(math.sqrt(depth)))
        if zk * zk != depth:
            raise ValueError("height extent must be a perfect square")
        self.zk = zk
        self.enc = nn.ModuleDict(dict(
            z1=HeightConv(cin, 16, zk),
            z2=HeightConv(16, 32, zk),
            d1=nn.Conv2d(32, 48, 3, stride=2, padding=1),
            d2=nn.Conv2d(48, w, 3, stride=2, padding=1),
            res=ResBlock2d(w),
            norm=GroupNorm(w),
            out=nn.Conv2d(w, cfg.latent_channels, 1),
        ))
        self.dec = nn.ModuleDict(dict(
            inp=nn.Conv2d(cfg.latent_channels, w, 3, padding=1),
            res=ResBlock2d(w),
            u1=nn.Conv2d(w, 48, 3, padding=1),
            u2=nn.Conv2d(48, 32, 3, padding=1),
            norm=GroupNorm(32),
            z1=HeightConvTranspose(32, 16, zk),
            z2=HeightConvTranspose(16, wv.C_OCC, zk),
            map=nn.Conv2d(32, 4, 1),
        ))
        nn.init.zeros_(self.dec["z2"].weight)
        nn.init.zeros_(self.dec["z2"].bias)
        self.codebook = nn.Parameter(torch.randn(cfg.codes, cfg.latent_channels))
        self.register_buffer("usage", torch.zeros(cfg.codes))
        self.register_buffer("class_weights", torch.ones(wv.C_OCC))

    # x: [B, C_occ + 3, Z, H, W]
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != wv.C_OCC + wv.C_MAP or x.shape[2] != self.depth:
            raise ValueError(f"expected [B, {wv.C_OCC + wv.C_MAP}, {self.depth}, H, W], got {tuple(x.shape)}")
        e = self.enc
        h = F.silu(e["z1"](x))
        h = F.silu(e["z2"](h)).squeeze(2)
        h = F.silu(e["d1"](h))
        h = e["d2"](h)
        h = e["res"](h)
        return e["out"](F.silu(e["norm"](h)))

    def quantize(self, z):
        return quantize(z, self.codebook)

    def decode(self, zq: torch.Tensor):
        if zq.dim() != 4 or zq.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected a 2D latent [B, {self.cfg.latent_channels}, h, w], got {tuple(zq.shape)}")
        d = self.dec
        h = d["res"](d["inp"](zq))
        h = F.silu(d["u1"](F.interpolate(h, scale_factor=2, mode="nearest")))
        h = d["u2"](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = F.silu(d["norm"](h))
        occ = d["z2"](F.silu(d["z1"](h[:, :, None])))
        return occ, d["map"](h)

    def forward(self, x):
        z = self.encode(x)
        zq, idx, commit, book = self.quantize(z)
        occ, mp = self.decode(zq)
        return occ, mp, idx, commit, book

    # -- volume level helpers ------------------------------------------------------

    @torch.no_grad()
    def encode_volumes(self, volumes) -> torch.Tensor:
        return self.encode(volumes_to_tensor(volumes))

    @torch.no_grad()
    def decode_volumes(self, z: torch.Tensor, like=None) -> list:
        zq, _, _, _ = self.quantize(z)
        occ, mp = self.decode(zq)
        return logits_to_volumes(occ, mp, like)


def volumes_to_tensor(volumes) -> torch.Tensor:
    return channels_from_arrays(*volumes_to_arrays(volumes))


def volumes_to_arrays(volumes):
    """Compact (occupancy uint8 [N, Z, H, W], map uint8 [N, 3, H, W]) tensors."""
    occ = torch.from_numpy(np.stack([v.occupancy for v in volumes]))
    mp = torch.from_numpy(np.stack([v.map_plane for v in volumes])).permute(0, 3, 1, 2).contiguous()
    return occ, mp


def channels_from_arrays(occ: torch.Tensor, mp: torch.Tensor) -> torch.Tensor:
    """Dense channel view [N, C_occ + 3, Z, H, W], identical to ``WorldVolume.channels``."""
    n, z, h, w = occ.shape
    x = torch.zeros(n, wv.C_OCC + wv.C_MAP, z, h, w)
    x[:, :wv.C_OCC] = F.one_hot(occ.long(), wv.C_OCC).permute(0, 4, 1, 2, 3).float()
    x[:, wv.C_OCC:, 0] = mp.float() / 255.0
    return x


def logits_to_volumes(occ: torch.Tensor, mp: torch.Tensor, like=None) -> list:
    occ, mp = occ.detach(), mp.detach()
    cls = occ.argmax(1).to(torch.uint8).numpy()
    rgb = torch.clamp(mp[:, :3], 0, 1).permute(0, 2, 3, 1).numpy()
    valid = (mp[:, 3] > 0).numpy()
    palette = np.array(wv.MAP_PALETTE[1:], np.float64) / 255.0
    near = ((rgb[..., None, :] - palette) ** 2).sum(-1).argmin(-1)
    colours = (palette[near] * 255).round().astype(np.uint8) * valid[..., None]
    out = []
    for i in range(len(cls)):
        ref = like[i] if like is not None else None
        out.append(wv.WorldVolume(cls[i], colours[i],
                                  ref.voxel_size if ref else wv.VOXEL_SIZE,
                                  ref.ego_pose if ref else (0.0, 0.0, 0.0)))
    return out


def class_frequency_weights(occ: torch.Tensor, power: float = 0.5) -> torch.Tensor:
    """Inverse-frequency weights ``freq ** -power``, normalised so the frequency-weighted mean is 1."""
    counts = torch.bincount(occ.reshape(-1).long(), minlength=wv.C_OCC).double().numpy()
    freq = np.maximum(counts / counts.sum(), 1e-6)
    w = freq ** -power
    w /= (freq * w).sum()
    return torch.tensor(w, dtype=torch.float32)


def ae_loss(model: VolumeAutoencoder, occ_t: torch.Tensor, map_t: torch.Tensor):
    """Weighted cross-entropy + map regression + VQ terms for uint8 batches."""
    x = channels_from_arrays(occ_t, map_t)
    occ, mp, idx, commit, book = model(x)
    target = occ_t.long()
    # weighted per-voxel mean; equals ln(C_occ) for uniform logits
    ce = F.cross_entropy(occ, target, weight=model.class_weights, reduction="sum") / target.numel()
    rgb_t = x[:, wv.C_OCC:, 0]
    valid_t = (rgb_t.sum(1) > 0).float()
    map_loss = F.mse_loss(mp[:, :3], rgb_t) + F.binary_cross_entropy_with_logits(mp[:, 3], valid_t)
    cfg = model.cfg
    total = ce + cfg.lambda_map * map_loss + cfg.beta_commit * commit + book
    parts = dict(ce=ce.item(), map=(cfg.lambda_map * map_loss).item(), commit=commit.item(),
                 codebook=book.item())
    return total, parts, idx


def train_autoencoder(volumes, cfg: AEConfig | None = None, model: VolumeAutoencoder | None = None,
                      log_every: int = 100):
    """Fit the autoencoder; returns (model, loss history)."""
    cfg = cfg or AEConfig()
    if not volumes:
        raise ValueError("need at least one training volume")
    torch.manual_seed(cfg.seed)
    model = model or VolumeAutoencoder(cfg)
    occ_all, map_all = volumes_to_arrays(volumes)
    model.class_weights.copy_(class_frequency_weights(occ_all, cfg.class_weight_power))
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    n = len(occ_all)
    epoch = max(1, n // cfg.batch)
    usage = torch.zeros(cfg.codes)
    for step in range(cfg.steps):
        sel = torch.randint(0, n, (min(cfg.batch, n),), generator=gen)
        x = channels_from_arrays(occ_all[sel], map_all[sel])
        if step == 0:
            with torch.no_grad():
                z = model.encode(x).permute(0, 2, 3, 1).reshape(-1, cfg.latent_channels)
                pick = torch.randperm(len(z), generator=gen)[:cfg.codes]
                model.codebook.copy_(z[pick % len(z)] if len(z) < cfg.codes else z[pick])
        loss, parts, idx = ae_loss(model, occ_all[sel], map_all[sel])
        if not torch.isfinite(loss):
            raise NonFiniteError(f"autoencoder loss is {loss.item()} at step {step}: {parts}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            usage += torch.bincount(idx.reshape(-1), minlength=cfg.codes).float()
            if (step + 1) % epoch == 0:
                dead = torch.nonzero(usage == 0).flatten()
                if len(dead):
                    z = model.encode(x).permute(0, 2, 3, 1).reshape(-1, cfg.latent_channels)
                    pick = torch.randint(0, len(z), (len(dead),), generator=gen)
                    model.codebook[dead] = z[pick]
                model.usage.copy_(usage)
                usage.zero_()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("ae step %d loss %.4f %s", step, loss.item(), parts)
    return model, history


@torch.no_grad()
def evaluate(model: VolumeAutoencoder, volumes, batch: int = 8) -> dict:
    acc_num = 0
    total = 0
    inter = union = 0
    for i in range(0, len(volumes), batch):
        chunk = volumes[i:i + batch]
        x = volumes_to_tensor(chunk)
        occ, _, _, _, _ = model(x)
        pred = occ.argmax(1)
        tgt = x[:, :wv.C_OCC].argmax(1)
        acc_num += (pred == tgt).sum().item()
        total += tgt.numel()
        inter += ((pred == wv.ROAD) & (tgt == wv.ROAD)).sum().item()
        union += ((pred == wv.ROAD) | (tgt == wv.ROAD)).sum().item()
    return dict(accuracy=acc_num / total, road_iou=inter / union if union else 1.0)
