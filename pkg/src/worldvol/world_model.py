"""Action-conditioned latent diffusion over future world volumes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffusion, sim
from . import volume as wv
from .autoencoder import VolumeAutoencoder, volumes_to_tensor
from .blocks import (FeedForward, TemporalAttention, TimeResBlock, TokenNorm, Upsample,
                     from_tokens, to_tokens)
from .numerics import Attention, GroupNorm, NonFiniteError, fourier_embed

log = logging.getLogger(__name__)

V_MAX = 10.0                 # m/s, velocity normaliser for the Fourier tokens
STEER_MAX = math.pi / 2


@dataclass
class WMConfig:
    n_past: int = 3
    n_future: int = 3
    latent_channels: int = 8
    n_freqs: int = 8
    token_dim: int = 64
    width: int = 32
    deep_width: int = 64
    heads: int = 4
    T: int = 100
    beta_1: float = 1e-3      # classic endpoints scaled by 1000 / T
    beta_T: float = 0.2
    prediction: str = "v"     # network output: "eps" (noise) or "v" (alpha * noise - sigma * clean)
    lr: float = 1e-3
    batch: int = 4
    steps: int = 2000
    seed: int = 0
    conditioned: bool = True


class ActionEncoder(nn.Module):
    """Fourier-embedded (velocity, steering) pairs refined by a two-layer Transformer."""

    def __init__(self, n_past: int, n_freqs: int, dim: int, heads: int = 4, layers: int = 2):
        super().__init__()
        self.n_freqs = n_freqs
        self.vel = nn.Linear(2 * n_freqs, dim)
        self.steer = nn.Linear(2 * n_freqs, dim)
        self.pos = nn.Parameter(torch.randn(2 * n_past, dim) * 0.02)
        self.layers = nn.ModuleList()
        for _ in range(layers):
            self.layers.append(nn.ModuleDict(dict(
                n1=nn.LayerNorm(dim), attn=Attention(dim, heads),
                n2=nn.LayerNorm(dim), ff=FeedForward(dim))))

    def forward(self, actions: torch.Tensor) -> torch.Tensor:
        """actions [B, n_past, 2] -> tokens [B, 2 * n_past, dim] ordered v1, a1, v2, a2, ..."""
        v = self.vel(fourier_embed(actions[..., 0] / V_MAX, self.n_freqs))
        a = self.steer(fourier_embed(actions[..., 1] / STEER_MAX, self.n_freqs))
        tok = torch.stack([v, a], dim=2).flatten(1, 2) + self.pos
        for layer in self.layers:
            tok = tok + layer["attn"](layer["n1"](tok))
            tok = tok + layer["ff"](layer["n2"](tok))
        return tok


class STBlock(nn.Module):
    """Spatial self-attention, temporal self-attention, action cross-attention, FFN."""

    def __init__(self, ch: int, context_dim: int, heads: int = 4):
        super().__init__()
        self.n_s, self.spatial = TokenNorm(ch), Attention(ch, heads)
        self.temporal = TemporalAttention(ch, heads)
        self.n_a, self.action = TokenNorm(ch), Attention(ch, heads, context_dim=context_dim)
        self.n_f, self.ff = TokenNorm(ch), FeedForward(ch)

    def forward(self, z: torch.Tensor, tokens: torch.Tensor, n: int, temporal: bool = True):
        """z [(b n), C, H, W]; tokens [(b n), L, C_tok]."""
        bn, c, h, w = z.shape
        if bn % n:
            raise ValueError(f"batch {bn} not divisible by {n} frames")
        x = to_tokens(z)
        x = self.spatial(self.n_s(x)) + x
        if temporal:
            x = self.temporal(x, n)
        x = self.action(self.n_a(x), tokens) + x
        x = self.ff(self.n_f(x)) + x
        return from_tokens(x, h, w)


class WorldNoisePredictor(nn.Module):
    def __init__(self, cfg: WMConfig):
        super().__init__()
        if cfg.prediction not in ("eps", "v"):
            raise ValueError(f"prediction must be 'eps' or 'v', got {cfg.prediction!r}")
        self.cfg = cfg
        c1, c2 = cfg.width, cfg.deep_width
        temb = 4 * c1
        self.temb_dim = c1
        self.time_mlp = nn.Sequential(nn.Linear(c1, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.frame_emb = nn.Parameter(torch.zeros(cfg.n_future, temb))
        self.actions = ActionEncoder(cfg.n_past, cfg.n_freqs, cfg.token_dim, cfg.heads)
        cin = cfg.latent_channels * (1 + cfg.n_past)
        self.conv_in = nn.Conv2d(cin, c1, 3, padding=1)
        self.r1 = TimeResBlock(c1, c1, temb)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.r2 = TimeResBlock(c2, c2, temb)
        self.st2 = STBlock(c2, cfg.token_dim, cfg.heads)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.r3 = TimeResBlock(c2, c2, temb)
        self.st3 = STBlock(c2, cfg.token_dim, cfg.heads)
        self.mid = TimeResBlock(c2, c2, temb)
        self.u3 = TimeResBlock(2 * c2, c2, temb)
        self.ust3 = STBlock(c2, cfg.token_dim, cfg.heads)
        self.up2 = Upsample(c2, c2)
        self.u2 = TimeResBlock(2 * c2, c2, temb)
        self.ust2 = STBlock(c2, cfg.token_dim, cfg.heads)
        self.up1 = Upsample(c2, c1)
        self.u1 = TimeResBlock(2 * c1, c1, temb)
        self.norm_out = GroupNorm(c1)
        self.conv_out = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.register_buffer("latent_scale", torch.ones(()))

    def forward(self, z_noisy, tau, past, actions, temporal: bool = True):
        """Raw output for every future frame, in the parameterisation named by ``cfg.prediction``.

        z_noisy [B, N_f, C, h, w]; tau [B]; past [B, N_p, C, h, w]; actions [B, N_p, 2].
        """
        cfg = self.cfg
        b, n = z_noisy.shape[:2]
        if n != cfg.n_future or past.shape[1] != cfg.n_past or actions.shape[1] != cfg.n_past:
            raise ValueError(f"expected {cfg.n_past} past / {cfg.n_future} future frames, "
                             f"got {past.shape[1]} / {n}")
        h, w = z_noisy.shape[-2:]
        tokens = self.actions(actions)
        if not cfg.conditioned:
            past = torch.zeros_like(past)
            tokens = torch.zeros_like(tokens)
        tokens = tokens.repeat_interleave(n, 0)
        pasts = past.flatten(1, 2)[:, None].expand(b, n, -1, h, w)
        x = torch.cat([z_noisy, pasts], dim=2).flatten(0, 1)
        temb = self.time_mlp(diffusion.timestep_embedding(tau, self.temb_dim))
        temb = (temb[:, None] + self.frame_emb[None]).flatten(0, 1)

        h1 = self.r1(self.conv_in(x), temb)
        h2 = self.st2(self.r2(self.down1(h1), temb), tokens, n, temporal)
        h3 = self.st3(self.r3(self.down2(h2), temb), tokens, n, temporal)
        m = self.mid(h3, temb)
        u = self.ust3(self.u3(torch.cat([m, h3], 1), temb), tokens, n, temporal)
        u = self.ust2(self.u2(torch.cat([self.up2(u), h2], 1), temb), tokens, n, temporal)
        u = self.u1(torch.cat([self.up1(u), h1], 1), temb)
        out = self.conv_out(F.silu(self.norm_out(u)))
        return out.reshape(b, n, *out.shape[1:])


class WorldModel:
    """Frozen autoencoder plus the latent noise predictor."""

    def __init__(self, ae: VolumeAutoencoder, net: WorldNoisePredictor):
        self.ae = ae.eval()
        for p in self.ae.parameters():
            p.requires_grad_(False)
        self.net = net
        cfg = net.cfg
        self.schedule = diffusion.make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)

    @property
    def cfg(self) -> WMConfig:
        return self.net.cfg

    @torch.no_grad()
    def encode(self, volumes) -> torch.Tensor:
        return self.ae.encode_volumes(volumes) / self.net.latent_scale

    @torch.no_grad()
    def decode(self, latents: torch.Tensor, like=None) -> list:
        return self.ae.decode_volumes(latents * self.net.latent_scale, like)

    @torch.no_grad()
    def sample_future(self, past: torch.Tensor, actions: torch.Tensor, generator: torch.Generator,
                      trace: list | None = None) -> torch.Tensor:
        """past [B, N_p, C, h, w] scaled latents -> [B, N_f, C, h, w]."""
        self.net.eval()
        b = past.shape[0]
        shape = (b, self.cfg.n_future) + tuple(past.shape[2:])

        def predict(z, tau):
            t = torch.full((b,), tau, dtype=torch.long)
            return noise_estimate(self.net, self.schedule, self.net(z, t, past, actions), z, t)

        return diffusion.sample(self.schedule, predict, shape, generator, trace=trace)

    def rollout(self, initial, initial_actions, action_stream, horizon: int,
                generator: torch.Generator, dt: float = sim.DT) -> wv.WorldVolumeSequence:
        """Autoregressive prediction: N_past volumes in, ``horizon`` new volumes out.

        Generated frames are decoded and re-encoded before serving as the next
        window's past. Returns the initial frames followed by the generated ones.
        """
        cfg = self.cfg
        if len(initial) != cfg.n_past or len(initial_actions) != cfg.n_past:
            raise ValueError(f"rollout needs exactly {cfg.n_past} initial volumes and actions")
        if horizon % cfg.n_future:
            raise ValueError(f"horizon {horizon} is not a multiple of {cfg.n_future}")
        if len(action_stream) < horizon:
            raise ValueError(f"action stream has {len(action_stream)} entries, horizon is {horizon}")
        window = list(initial)
        acts = [tuple(map(float, a)) for a in initial_actions]
        frames, all_actions = list(initial), list(acts)
        stream = [tuple(map(float, a)) for a in action_stream]
        pose = sim.EgoState(*initial[-1].ego_pose, velocity=0.0)
        for r in range(horizon // cfg.n_future):
            past = self.encode(window)[None]
            a = torch.tensor([acts], dtype=torch.float32)
            fut = self.sample_future(past, a, generator)[0]
            new_acts = stream[r * cfg.n_future:(r + 1) * cfg.n_future]
            poses = []
            step_act = acts[-1]
            for act in new_acts:
                pose = sim.step_ego(pose, step_act, dt)
                poses.append(pose)
                step_act = act
            like = [wv.WorldVolume(window[-1].occupancy, window[-1].map_plane,
                                   window[-1].voxel_size, p.pose) for p in poses]
            decoded = self.decode(fut, like)
            # the next past window is the most recent n_past frames, generated or given
            window = (window + decoded)[-cfg.n_past:]
            acts = (acts + new_acts)[-cfg.n_past:]
            frames += decoded
            all_actions += new_acts
        return wv.WorldVolumeSequence(frames, all_actions, dt)


def sequence_windows(sequences, n_past: int, n_future: int):
    """(past volumes, past actions, future volumes) for every window of each sequence."""
    out = []
    span = n_past + n_future
    for seq in sequences:
        for s in range(len(seq) - span + 1):
            out.append((seq.frames[s:s + n_past], seq.actions[s:s + n_past],
                        seq.frames[s + n_past:s + span]))
    return out


@torch.no_grad()
def encode_windows(ae: VolumeAutoencoder, windows, batch: int = 16):
    """Encode every frame once; returns (past [N, Np, C, h, w], actions [N, Np, 2], future [N, Nf, C, h, w])."""
    vols = [v for p, _, f in windows for v in list(p) + list(f)]
    zs = torch.cat([ae.encode(volumes_to_tensor(vols[i:i + batch])) for i in range(0, len(vols), batch)])
    n_p = len(windows[0][0])
    zs = zs.reshape(len(windows), -1, *zs.shape[1:])
    actions = torch.tensor([w[1] for w in windows], dtype=torch.float32)
    return zs[:, :n_p], actions, zs[:, n_p:]


def train_world_model(ae: VolumeAutoencoder, sequences, cfg: WMConfig | None = None,
                      log_every: int = 100, encoded=None):
    """Fit the noise predictor on frozen-autoencoder latents; returns (WorldModel, history)."""
    cfg = cfg or WMConfig()
    if ae is None:
        raise ValueError("a trained autoencoder is required")
    torch.manual_seed(cfg.seed)
    net = WorldNoisePredictor(cfg)
    model = WorldModel(ae, net)
    past, actions, future = encoded if encoded is not None else \
        encode_windows(ae, sequence_windows(sequences, cfg.n_past, cfg.n_future))
    scale = torch.cat([past, future], 1).std()
    net.latent_scale.copy_(scale)
    past, future = past / scale, future / scale
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        sel = torch.randint(0, len(past), (min(cfg.batch, len(past)),), generator=gen)
        loss = denoising_loss(net, model.schedule, past[sel], actions[sel], future[sel], gen)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"world-model loss is {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("wm step %d loss %.4f", step, loss.item())
    net.eval()
    return model, history


def _signal_noise(schedule, tau, like: torch.Tensor) -> tuple:
    ab = schedule.alpha_bar[torch.as_tensor(tau)].to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return ab.sqrt(), (1 - ab).sqrt()


def noise_estimate(net, schedule, out, z, tau):
    """Convert a raw network output at noisy latents ``z`` into a noise estimate."""
    if net.cfg.prediction == "eps":
        return out
    a, s = _signal_noise(schedule, tau, z)
    return a * out + s * z


def denoising_loss(net, schedule, past, actions, future, gen, tau=None, noise_mse: bool = False):
    """Training objective on one batch; ``noise_mse`` reports the noise-estimate MSE instead.

    For the v parameterisation the objective is v-MSE, the noise MSE divided by
    alpha_bar, which keeps a useful signal at the high-noise end.
    """
    b = future.shape[0]
    if tau is None:
        tau = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(future.shape, generator=gen)
    zt = diffusion.q_sample(schedule, future, tau, eps)
    out = net(zt, tau, past, actions)
    if noise_mse:
        return F.mse_loss(noise_estimate(net, schedule, out, zt, tau), eps)
    if net.cfg.prediction == "eps":
        return F.mse_loss(out, eps)
    a, s = _signal_noise(schedule, tau, future)
    return F.mse_loss(out, a * eps - s * future)


@torch.no_grad()
def heldout_loss(model: WorldModel, encoded, seed: int = 1234, repeats: int = 4, noise_mse: bool = False) -> float:
    """Mean training objective on scaled held-out windows with a fixed noise stream.

    ``noise_mse`` reports the noise-estimate MSE instead, which equals the
    objective for the eps parameterisation.
    """
    past, actions, future = encoded
    s = model.net.latent_scale
    gen = torch.Generator().manual_seed(seed)
    model.net.eval()
    losses = []
    for _ in range(repeats):
        for i in range(0, len(past), 16):
            losses.append(denoising_loss(model.net, model.schedule, past[i:i + 16] / s,
                                         actions[i:i + 16], future[i:i + 16] / s, gen,
                                         noise_mse=noise_mse).item())
    return float(np.mean(losses))
