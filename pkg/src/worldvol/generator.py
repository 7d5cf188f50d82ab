"""Controlled panoptic diffusion over the tiled six-camera canvas, plus temporal finetuning.

The image "latent" is the tiled RGB canvas itself, normalised to [-1, 1].
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import conditioning as cd
from . import diffusion, sim
from . import volume as wv
from .blocks import FeedForward, TemporalAttention, TimeResBlock, TokenNorm, Upsample, from_tokens, to_tokens
from .camera import CameraRig, default_rig
from .checkpoint import state_hash
from .numerics import Attention, GroupNorm, NonFiniteError, RowLinear

log = logging.getLogger(__name__)

VOCAB = (
    "<unk>",
    "sunny", "rainy", "night", "cloudy", "foggy", "snowy", "dusk",
    "town", "city", "boston", "singapore", "harbor", "campus", "village", "port",
    "suburb", "downtown", "residential area", "highway", "industrial zone", "countryside",
    "parking lot", "market", "intersection", "bridge", "tunnel", "plaza", "old town",
    "riverside", "airport", "stadium",
)
UNK = 0
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}
_PROMPT_RE = re.compile(r"^Drive in (.+?) in (.+?)\. The driving scene is in (.+?), "
                        r"captured by multi-view camera\.$")
SLOTS = ("weather", "location", "environment")


@dataclass
class GenConfig:
    c1: int = 16
    c2: int = 32
    c3: int = 64
    token_dim: int = 32
    heads: int = 4
    T: int = 100
    beta_1: float = 1e-3      # classic endpoints scaled by 1000 / T
    beta_T: float = 0.2
    prediction: str = "v"     # network output: "eps" (noise) or "v" (alpha * noise - sigma * clean)
    lr: float = 1e-3
    batch: int = 4
    steps: int = 1500
    temporal_lr: float = 1e-3
    temporal_steps: int = 200
    clip_frames: int = 6
    seed: int = 0


# -- scene guidance --------------------------------------------------------------------

def parse_prompt(prompt: str) -> tuple:
    m = _PROMPT_RE.match(prompt.strip())
    if m is None:
        raise ValueError(f"prompt does not follow the template: {prompt!r}")
    return m.groups()


def prompt_ids(prompt: str) -> torch.Tensor:
    """Vocabulary ids of the (weather, location, environment) slots; unknown words map to <unk>."""
    return torch.tensor([_WORD_ID.get(w.lower(), UNK) for w in parse_prompt(prompt)])


class SceneEncoder(nn.Module):
    """Fixed-vocabulary slot embeddings standing in for a text encoder."""

    def __init__(self, dim: int):
        super().__init__()
        self.table = nn.Embedding(len(VOCAB), dim)
        self.slot = nn.Parameter(torch.randn(len(SLOTS), dim) * 0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids [B, 3] -> tokens [B, 3, dim]"""
        return self.table(ids) + self.slot


def scene_embed(prompt: str, encoder: SceneEncoder) -> torch.Tensor:
    return encoder(prompt_ids(prompt)[None])[0]


# -- object guidance -------------------------------------------------------------------

def pool_masks(masks: torch.Tensor, size) -> torch.Tensor:
    """Logical-OR pooling of boolean masks [..., H, W] down to ``size``."""
    h, w = masks.shape[-2:]
    fh, fw = h // size[0], w // size[1]
    if fh * size[0] != h or fw * size[1] != w:
        raise ValueError(f"mask extent {(h, w)} is not a multiple of {tuple(size)}")
    lead = masks.shape[:-2]
    pooled = F.max_pool2d(masks.reshape(-1, 1, h, w).float(), (fh, fw))
    return pooled.reshape(*lead, *size) > 0


def object_guidance_attend(z: torch.Tensor, masks: torch.Tensor, class_tokens: torch.Tensor,
                           attn: Attention) -> torch.Tensor:
    """Residual cross-attention from masked latent sites to each class token.

    z [B, C, h, w]; masks [B, K, h, w] boolean; class_tokens [K, C_tok]. Classes
    are applied in order; sites outside every mask are returned untouched.
    """
    b, c, h, w = z.shape
    if masks.shape != (b, class_tokens.shape[0], h, w):
        raise ValueError(f"masks {tuple(masks.shape)} do not match latent {tuple(z.shape)} "
                         f"with {class_tokens.shape[0]} classes")
    x = z.permute(0, 2, 3, 1)
    for k in range(class_tokens.shape[0]):
        m = masks[:, k]
        if not bool(m.any()):
            continue
        q = x[m]
        upd = attn(q[None], class_tokens[k][None, None])[0]
        x = x.index_put((m,), q + upd)
    return x.permute(0, 3, 1, 2)


# -- network ---------------------------------------------------------------------------

class TBlock(nn.Module):
    """Spatial self-attention, optional temporal attention, scene cross-attention, FFN."""

    def __init__(self, ch: int, token_dim: int, heads: int):
        super().__init__()
        self.n_s, self.spatial = TokenNorm(ch), Attention(ch, heads)
        self.temporal = TemporalAttention(ch, heads)
        self.n_c, self.cross = TokenNorm(ch), Attention(ch, heads, context_dim=token_dim, rowwise="context")
        self.n_f, self.ff = TokenNorm(ch), FeedForward(ch)

    def forward(self, z, scene, n: int = 1, temporal: bool = False):
        bn, c, h, w = z.shape
        x = to_tokens(z)
        x = self.spatial(self.n_s(x)) + x
        if temporal:
            x = temporal_block(x, n, self.temporal)
        x = self.cross(self.n_c(x), scene) + x
        x = self.ff(self.n_f(x)) + x
        return from_tokens(x, h, w)


def temporal_block(tokens: torch.Tensor, n: int, block: TemporalAttention) -> torch.Tensor:
    """(b n) (h w) c -> (b h w) n c, normalised self-attention over frames, residual, and back."""
    if tokens.shape[0] % n:
        raise ValueError(f"batch {tokens.shape[0]} not divisible by {n} frames")
    return block(tokens, n)


def _zero_conv(ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlledUNet(nn.Module):
    """Three-resolution noise predictor over the panoptic canvas with a feature controller."""

    def __init__(self, cfg: GenConfig, feature_dim: int = cd.FEATURE_DIM,
                 n_classes: int = len(cd.GUIDED_CLASSES)):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, td = cfg.c1, cfg.c2, cfg.c3, cfg.token_dim
        temb = 4 * c1
        self.temb_dim = c1
        self.time_mlp = nn.Sequential(RowLinear(c1, temb), nn.SiLU(), RowLinear(temb, temb))
        self.scene = SceneEncoder(td)
        # base encoder
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.r1 = TimeResBlock(c1, c1, temb)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.r2 = TimeResBlock(c2, c2, temb)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.r3 = TimeResBlock(c3, c3, temb)
        self.t3 = TBlock(c3, td, cfg.heads)
        self.mid = TimeResBlock(c3, c3, temb)
        self.class_tokens = nn.Parameter(torch.randn(n_classes, td))
        self.guide = Attention(c3, cfg.heads, context_dim=td, rowwise="all")
        self.tm = TBlock(c3, td, cfg.heads)
        # base decoder
        self.u3 = TimeResBlock(2 * c3, c3, temb)
        self.ut3 = TBlock(c3, td, cfg.heads)
        self.up2 = Upsample(c3, c2)
        self.u2 = TimeResBlock(2 * c2, c2, temb)
        self.up1 = Upsample(c2, c1)
        self.u1 = TimeResBlock(2 * c1, c1, temb)
        self.norm_out = GroupNorm(c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        # controller: trainable copy of the encoder half fed with the noisy canvas and F_pano
        self.ctrl = nn.ModuleDict(dict(
            conv_in=nn.Conv2d(3 + feature_dim, c1, 3, padding=1),
            r1=TimeResBlock(c1, c1, temb), down1=nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            r2=TimeResBlock(c2, c2, temb), down2=nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            r3=TimeResBlock(c3, c3, temb), t3=TBlock(c3, td, cfg.heads),
            mid=TimeResBlock(c3, c3, temb), tm=TBlock(c3, td, cfg.heads)))
        self.inject = nn.ModuleList([_zero_conv(c1), _zero_conv(c2), _zero_conv(c3), _zero_conv(c3)])

    def temporal_parameters(self):
        return [p for name, p in self.named_parameters() if ".temporal." in name]

    def controller(self, z, f_pano, temb, scene, n, temporal):
        c = self.ctrl
        h1 = c["r1"](c["conv_in"](torch.cat([z, f_pano], 1)), temb)
        h2 = c["r2"](c["down1"](h1), temb)
        h3 = c["t3"](c["r3"](c["down2"](h2), temb), scene, n, temporal)
        m = c["tm"](c["mid"](h3, temb), scene, n, temporal)
        return [proj(h) for proj, h in zip(self.inject, (h1, h2, h3, m))]

    def forward(self, z, tau, scene_ids, masks, f_pano=None, n: int = 1, temporal: bool = False):
        """Noise estimate for the canvases ``z`` [(B n), 3, 2H, 3W].

        tau [(B n)]; scene_ids [(B n), 3]; masks [(B n), K, 2H, 3W] boolean at
        canvas resolution; f_pano [(B n), C_f, 2H, 3W] or None to skip the controller.
        """
        if f_pano is not None and f_pano.shape[-2:] != z.shape[-2:]:
            raise ValueError(f"F_pano extent {tuple(f_pano.shape[-2:])} != canvas {tuple(z.shape[-2:])}")
        if z.shape[-2] % 4 or z.shape[-1] % 4:
            raise ValueError("canvas extent must be divisible by 4")
        scene = self.scene(scene_ids)
        temb = self.time_mlp(diffusion.timestep_embedding(tau, self.temb_dim))
        h1 = self.r1(self.conv_in(z), temb)
        h2 = self.r2(self.down1(h1), temb)
        h3 = self.t3(self.r3(self.down2(h2), temb), scene, n, temporal)
        m = self.mid(h3, temb)
        m = object_guidance_attend(m, pool_masks(masks, m.shape[-2:]), self.class_tokens, self.guide)
        m = self.tm(m, scene, n, temporal)
        if f_pano is not None:
            c1, c2, c3, cm = self.controller(z, f_pano, temb, scene, n, temporal)
            h1, h2, h3, m = h1 + c1, h2 + c2, h3 + c3, m + cm
        u = self.ut3(self.u3(torch.cat([m, h3], 1), temb), scene, n, temporal)
        u = self.u2(torch.cat([self.up2(u), h2], 1), temb)
        u = self.u1(torch.cat([self.up1(u), h1], 1), temb)
        return self.conv_out(F.silu(self.norm_out(u)))


class PanopticGenerator(nn.Module):
    """World-volume conditioner plus the controlled UNet."""

    def __init__(self, cfg: GenConfig | None = None, rig: CameraRig | None = None):
        super().__init__()
        self.cfg = cfg or GenConfig()
        if self.cfg.prediction not in ("eps", "v"):
            raise ValueError(f"prediction must be 'eps' or 'v', got {self.cfg.prediction!r}")
        self.rig = rig or default_rig()
        self.conditioner = cd.WorldConditioner(self.rig)
        self.unet = ControlledUNet(self.cfg)
        self.schedule = diffusion.make_schedule(self.cfg.T, self.cfg.beta_1, self.cfg.beta_T)


# -- data ------------------------------------------------------------------------------

@dataclass
class GenExample:
    occupancy: torch.Tensor     # [Z, H, W] int64
    map_index: torch.Tensor     # [H, W] int64
    masks: torch.Tensor         # [K, 2H, 3W] bool
    ids: torch.Tensor           # [3] vocabulary ids
    target: torch.Tensor | None  # [3, 2H, 3W] in [-1, 1]


def image_to_unit(canvas: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(canvas.astype(np.float32)).permute(2, 0, 1) / 127.5 - 1.0


def unit_to_image(z: torch.Tensor) -> np.ndarray:
    return ((z.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()


def make_example(volume: wv.WorldVolume, prompt: str, images: dict | None = None,
                 rig: CameraRig | None = None) -> GenExample:
    rig = rig or default_rig()
    target = image_to_unit(cd.tile_images(images)) if images else None
    return GenExample(torch.from_numpy(volume.occupancy.astype(np.int64)),
                      torch.from_numpy(cd.map_palette_index(volume.map_plane)),
                      torch.from_numpy(cd.panoptic_masks(volume, rig)), prompt_ids(prompt), target)


def examples_from_samples(samples, rig: CameraRig | None = None) -> list:
    """One example per frame of every simulator sample; returns a list of per-sample lists."""
    return [[make_example(v, s.prompt, imgs, rig) for v, imgs in zip(s.sequence.frames, s.images)]
            for s in samples]


def _stack(examples):
    return (torch.stack([e.occupancy for e in examples]), torch.stack([e.map_index for e in examples]),
            torch.stack([e.masks for e in examples]), torch.stack([e.ids for e in examples]))


def _signal_noise(model: PanopticGenerator, tau, like: torch.Tensor) -> tuple:
    """Per-sample (sqrt(alpha_bar), sqrt(1 - alpha_bar)) broadcastable against ``like``."""
    ab = model.schedule.alpha_bar[torch.as_tensor(tau)].to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return ab.sqrt(), (1 - ab).sqrt()


def network_output(model: PanopticGenerator, z, tau, examples, f_pano=None, n: int = 1,
                   temporal: bool = False, control: bool = True):
    """Raw UNet output in the parameterisation named by ``model.cfg.prediction``."""
    occ, mi, masks, ids = _stack(examples)
    if control and f_pano is None:
        f_pano = model.conditioner(occ, mi)
    return model.unet(z, tau, ids, masks, f_pano if control else None, n, temporal)


def controlled_predict(model: PanopticGenerator, z, tau, examples, f_pano=None, n: int = 1,
                       temporal: bool = False, control: bool = True):
    """Noise estimate for the canvases ``z`` at steps ``tau``."""
    out = network_output(model, z, tau, examples, f_pano, n, temporal, control)
    if model.cfg.prediction == "eps":
        return out
    a, s = _signal_noise(model, tau, z)
    return a * out + s * z


# -- training --------------------------------------------------------------------------

def _loss(model, examples, gen, n=1, temporal=False):
    z0 = torch.stack([e.target for e in examples])
    b = z0.shape[0] // n
    tau = torch.randint(1, model.schedule.T + 1, (b,), generator=gen).repeat_interleave(n)
    eps = torch.randn(z0.shape, generator=gen)
    zt = diffusion.q_sample(model.schedule, z0, tau, eps)
    out = network_output(model, zt, tau, examples, n=n, temporal=temporal)
    if model.cfg.prediction == "eps":
        return F.mse_loss(out, eps)
    # v-MSE equals the noise MSE divided by alpha_bar: near the noise end it
    # becomes a regression on the clean canvas instead of vanishing
    a, s = _signal_noise(model, tau, z0)
    return F.mse_loss(out, a * eps - s * z0)


def train_generator(examples, cfg: GenConfig | None = None, log_every: int = 100,
                    model: PanopticGenerator | None = None):
    """Single-frame denoising training of conditioner, controller and base UNet together.

    ``examples`` is a flat list of GenExample with targets. Returns (model, history).
    """
    cfg = cfg or GenConfig()
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(cfg.seed)
    model = model or PanopticGenerator(cfg)
    model.train()
    params = [p for name, p in model.named_parameters() if ".temporal." not in name]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for step in range(cfg.steps):
        sel = torch.randint(0, len(examples), (min(cfg.batch, len(examples)),), generator=gen)
        loss = _loss(model, [examples[i] for i in sel.tolist()], gen)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"generator loss is {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("gen step %d loss %.4f", step, loss.item())
    model.eval()
    return model, history


def frozen_names(model: PanopticGenerator) -> list:
    return [name for name, _ in model.named_parameters() if ".temporal." not in name]


def finetune_temporal(model: PanopticGenerator, clips, cfg: GenConfig | None = None, log_every: int = 50):
    """Train only the temporal attention stages on multi-frame clips.

    ``clips`` is a list of per-sequence example lists. Returns (history,
    frozen-parameter hash before, hash after).
    """
    if model is None:
        raise ValueError("a trained single-frame generator is required")
    cfg = cfg or model.cfg
    n = cfg.clip_frames
    clips = [c[:n] for c in clips if len(c) >= n]
    if not clips:
        raise ValueError(f"no clips with {n} frames")
    names = frozen_names(model)
    before = state_hash(dict(model.named_parameters()), names)
    temporal = set(id(p) for p in model.unet.temporal_parameters())
    for p in model.parameters():
        p.requires_grad_(id(p) in temporal)
    opt = torch.optim.Adam(model.unet.temporal_parameters(), lr=cfg.temporal_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    history = []
    try:
        model.train()
        for step in range(cfg.temporal_steps):
            clip = clips[int(torch.randint(0, len(clips), (1,), generator=gen))]
            loss = _loss(model, clip, gen, n=n, temporal=True)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"temporal loss is {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
            if log_every and step % log_every == 0:
                log.info("temporal step %d loss %.4f", step, loss.item())
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
    after = state_hash(dict(model.named_parameters()), names)
    return history, before, after


# -- sampling --------------------------------------------------------------------------

def frame_generators(seed: int, n: int) -> list:
    return [torch.Generator().manual_seed(seed * 1000 + i) for i in range(n)]


@torch.no_grad()
def sample_canvases(model: PanopticGenerator, examples, seed: int, temporal: bool = False,
                    control: bool = True) -> torch.Tensor:
    """Jointly denoise one canvas per example; frame i draws its noise from stream (seed, i)."""
    model.eval()
    n = len(examples)
    h, w = examples[0].masks.shape[-2:]
    gens = frame_generators(seed, n)
    occ, mi, _, _ = _stack(examples)
    f_pano = model.conditioner(occ, mi) if control else None

    def noise(_tau):
        return torch.cat([torch.randn((1, 3, h, w), generator=g) for g in gens])

    def predict(z, tau):
        t = torch.full((n,), tau, dtype=torch.long)
        return controlled_predict(model, z, t, examples, f_pano, n=n, temporal=temporal, control=control)

    return diffusion.sample(model.schedule, predict, (n, 3, h, w), gens[0], noise=noise, clip=(-1.0, 1.0))


def sample_panoptic(model: PanopticGenerator, example: GenExample, seed: int = 0, control: bool = True):
    """Six per-camera uint8 images plus the sampled canvas for one world volume."""
    canvas = unit_to_image(sample_canvases(model, [example], seed, control=control)[0])
    return cd.split_images(canvas), canvas


def sample_video(model: PanopticGenerator, examples, seed: int = 0, temporal: bool = True) -> list:
    """Per-frame dicts of six images for a sequence of world volumes."""
    z = sample_canvases(model, examples, seed, temporal=temporal)
    return [cd.split_images(unit_to_image(zi)) for zi in z]


def examples_for_sequence(volumes, prompts, rig: CameraRig | None = None) -> list:
    if isinstance(prompts, str):
        prompts = [prompts] * len(volumes)
    return [make_example(v, p, None, rig) for v, p in zip(volumes, prompts)]


def weather_of(prompt: str) -> str:
    w = parse_prompt(prompt)[0]
    if w not in sim.WEATHERS:
        raise ValueError(f"weather {w!r} has no renderer tint")
    return w
