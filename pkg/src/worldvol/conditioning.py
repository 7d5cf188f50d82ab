"""World-volume-aware 2D conditioning: features, frustum sampling and object masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import volume as wv
from .camera import IMG_W, Camera, CameraRig
from .numerics import RowLinear, trilinear_sample

FEATURE_DIM = 16
DEPTHS = 16
D_MIN, D_MAX = 1.0, 30.0
MASK_D = 375.0 * IMG_W / 448.0      # splat scale at desk resolution
GUIDED_CLASSES = (wv.BUILDING, wv.VEHICLE, wv.PEDESTRIAN, wv.VEGETATION)

# 2 x 3 tiling of the six cameras
PANO_LAYOUT = (("front-left", "front", "front-right"),
               ("back-right", "back", "back-left"))


# -- class featurisation ---------------------------------------------------------

class ClassEmbedding(nn.Module):
    """One row per semantic class followed by one row per map palette colour.

    Rows for the empty class and the blank map colour are pinned to zero.
    """

    def __init__(self, dim: int = FEATURE_DIM, scale: float = 1.0, seed: int = 0):
        super().__init__()
        rows = wv.C_OCC + len(wv.MAP_PALETTE)
        if dim < rows:
            raise ValueError(f"embedding width {dim} cannot hold {rows} orthogonal rows")
        gen = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(dim, rows, generator=gen))
        table = q.t()[:rows] * scale * math.sqrt(dim) / 2
        self.table = nn.Parameter(table.contiguous())
        pin = torch.ones(rows, 1)
        pin[0] = 0.0
        pin[wv.C_OCC] = 0.0
        self.register_buffer("pin", pin)

    @property
    def weight(self) -> torch.Tensor:
        return self.table * self.pin

    def class_rows(self) -> torch.Tensor:
        return self.weight[:wv.C_OCC]


def map_palette_index(map_plane: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 -> palette index per pixel; raises on colours outside the palette."""
    out = np.full(map_plane.shape[:2], -1, np.int64)
    for i, colour in enumerate(wv.MAP_PALETTE):
        out[np.all(map_plane == np.array(colour, np.uint8), axis=-1)] = i
    if (out < 0).any():
        bad = map_plane[out < 0][0]
        raise ValueError(f"map colour {tuple(int(c) for c in bad)} is not in the palette")
    return out


def featurize_classes(occupancy: torch.Tensor, map_index: torch.Tensor,
                      embed: ClassEmbedding) -> torch.Tensor:
    """Per-voxel class embedding plus the map-colour embedding on the ground layer.

    occupancy [Z, H, W] integer ids; map_index [H, W] palette indices.
    Returns [C_f, Z, H, W].
    """
    occ = occupancy.long()
    if occ.numel() and (occ.min() < 0 or occ.max() >= wv.C_OCC):
        raise ValueError(f"unknown class id {int(occ.max())}")
    table = embed.weight
    feat = table[occ]                                        # [Z, H, W, C]
    ground = feat[0] + table[wv.C_OCC + map_index.long()]
    feat = torch.cat([ground[None], feat[1:]], 0)
    return feat.permute(3, 0, 1, 2)


def featurize_volume(volume: wv.WorldVolume, embed: ClassEmbedding) -> torch.Tensor:
    return featurize_classes(torch.from_numpy(volume.occupancy.astype(np.int64)),
                             torch.from_numpy(map_palette_index(volume.map_plane)), embed)


# -- submanifold sparse convolution ----------------------------------------------

OFFSETS = torch.tensor([(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])


def neighbour_table(mask: torch.Tensor):
    """Occupied coordinates [N, 3] and the 27-neighbour index table [N, 27] (N marks 'absent')."""
    coords = torch.nonzero(mask)
    n = len(coords)
    z, h, w = mask.shape
    index = torch.full((z + 2, h + 2, w + 2), n, dtype=torch.long)
    index[coords[:, 0] + 1, coords[:, 1] + 1, coords[:, 2] + 1] = torch.arange(n)
    nb = coords[:, None, :] + 1 + OFFSETS[None]
    return coords, index[nb[..., 0], nb[..., 1], nb[..., 2]]


class SubmanifoldConv3d(nn.Module):
    """3x3x3 convolution evaluated only at occupied sites, gathering occupied neighbours."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(27, cin, cout) / math.sqrt(27 * cin))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward_sites(self, feats: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
        """feats [N, cin] at occupied sites -> [N, cout]."""
        padded = torch.cat([feats, feats.new_zeros(1, feats.shape[1])], 0)
        gathered = padded[table]                              # [N, 27, cin]
        return gathered.flatten(1) @ self.weight.flatten(0, 1) + self.bias

    def dense_kernel(self) -> torch.Tensor:
        """Equivalent dense Conv3d weight [cout, cin, 3, 3, 3]."""
        return self.weight.reshape(3, 3, 3, *self.weight.shape[1:]).permute(4, 3, 0, 1, 2)


class SparseEncoder(nn.Module):
    def __init__(self, dim: int = FEATURE_DIM):
        super().__init__()
        self.c1 = SubmanifoldConv3d(dim, dim)
        self.c2 = SubmanifoldConv3d(dim, dim)

    def forward(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return sparse_conv_encode(features, mask, self)


def sparse_conv_encode(features: torch.Tensor, mask: torch.Tensor, enc: SparseEncoder) -> torch.Tensor:
    """Two submanifold layers; features [C, Z, H, W] with mask [Z, H, W]. Off-mask output is zero."""
    if features.shape[1:] != mask.shape:
        raise ValueError(f"mask {tuple(mask.shape)} does not match features {tuple(features.shape)}")
    coords, table = neighbour_table(mask)
    out = features.new_zeros(enc.c2.weight.shape[-1], *mask.shape)
    if not len(coords):
        return out
    f = features[:, coords[:, 0], coords[:, 1], coords[:, 2]].t()
    f = F.silu(enc.c1.forward_sites(f, table))
    f = enc.c2.forward_sites(f, table)
    out[:, coords[:, 0], coords[:, 1], coords[:, 2]] = f.t()
    return out


# -- frustum sampling -------------------------------------------------------------

@dataclass(frozen=True)
class CameraFrustum:
    points: np.ndarray     # [D, H, W, 3] ego-frame points
    depths: np.ndarray     # [D]


def build_frustum(camera: Camera, depths: int = DEPTHS, d_min: float = D_MIN, d_max: float = D_MAX,
                  height: int | None = None, width: int | None = None) -> CameraFrustum:
    """Pixel-centre rays of the conditioning grid sampled at linearly spaced camera depths."""
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    if abs(np.linalg.det(camera.K)) < 1e-12:
        raise ValueError("singular intrinsics")
    h, w = height or camera.height, width or camera.width
    # conditioning grid may be coarser than the image; pixel centres map through the scale
    su, sv = camera.width / w, camera.height / h
    v, u = np.meshgrid(np.arange(h) * sv, np.arange(w) * su, indexing="ij")
    pix = np.stack([u, v, np.ones_like(u)], -1)
    rays = pix @ np.linalg.inv(camera.K).T                            # camera frame, z = 1
    ds = np.linspace(d_min, d_max, depths)
    pc = ds[:, None, None, None] * rays[None]
    c2e = camera.cam_to_ego
    pe = pc @ c2e[:3, :3].T + c2e[:3, 3]
    return CameraFrustum(pe, ds)


def ego_to_voxel(points: np.ndarray, shape=(wv.Z, wv.H, wv.W), voxel_size: float = wv.VOXEL_SIZE):
    """Ego points [..., 3] (x, y, z) -> continuous voxel indices [..., 3] (z, y, x)."""
    z, h, w = shape
    ix = (points[..., 0] + w * voxel_size / 2) / voxel_size - 0.5
    iy = (points[..., 1] + h * voxel_size / 2) / voxel_size - 0.5
    iz = points[..., 2] / voxel_size - 0.5
    return np.stack([iz, iy, ix], -1)


def sample_frustum(frustum: CameraFrustum, features: torch.Tensor,
                   voxel_size: float = wv.VOXEL_SIZE) -> torch.Tensor:
    """F_cam [C, D, H, W]: trilinear samples of ``features`` [C, Z, H, W] at the frustum points."""
    d, h, w, _ = frustum.points.shape
    idx = torch.from_numpy(ego_to_voxel(frustum.points, features.shape[1:], voxel_size).reshape(-1, 3))
    out = trilinear_sample(features, idx)
    return out.t().reshape(features.shape[0], d, h, w)


class SqueezeExcite(nn.Module):
    """Per-(channel, depth) gate from globally pooled frustum features."""

    def __init__(self, channels: int = FEATURE_DIM, depths: int = DEPTHS, reduction: int = 4):
        super().__init__()
        n = channels * depths
        self.fc1 = RowLinear(n, n // reduction)
        self.fc2 = RowLinear(n // reduction, n)

    def forward(self, f_cam: torch.Tensor) -> torch.Tensor:
        """[B, C, D, H, W] -> gated [B, C, D, H, W]"""
        b, c, d = f_cam.shape[:3]
        s = f_cam.mean(dim=(3, 4)).reshape(b, c * d)
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(s)))).reshape(b, c, d, 1, 1)
        return f_cam * g


def se_depth_collapse(f_cam: torch.Tensor, se: SqueezeExcite) -> torch.Tensor:
    """F_img = sum over depth of SE(F_cam); accepts [C, D, H, W] or [B, C, D, H, W]."""
    single = f_cam.dim() == 4
    x = f_cam[None] if single else f_cam
    out = se(x).sum(2)
    return out[0] if single else out


# -- panoptic tiling ------------------------------------------------------------------

def panoptic_tile(views: dict) -> torch.Tensor:
    """Six [..., C, H, W] tensors keyed by camera name -> [..., C, 2H, 3W]."""
    missing = [n for row in PANO_LAYOUT for n in row if n not in views]
    if missing:
        raise KeyError(f"missing cameras {missing}")
    rows = [torch.cat([views[n] for n in row], dim=-1) for row in PANO_LAYOUT]
    return torch.cat(rows, dim=-2)


def panoptic_split(pano: torch.Tensor) -> dict:
    h, w = pano.shape[-2] // 2, pano.shape[-1] // 3
    return {name: pano[..., r * h:(r + 1) * h, c * w:(c + 1) * w]
            for r, row in enumerate(PANO_LAYOUT) for c, name in enumerate(row)}


def tile_images(images: dict) -> np.ndarray:
    """Six HxWx3 images -> one (2H)x(3W)x3 canvas."""
    return np.concatenate([np.concatenate([images[n] for n in row], 1) for row in PANO_LAYOUT], 0)


def split_images(canvas: np.ndarray) -> dict:
    h, w = canvas.shape[0] // 2, canvas.shape[1] // 3
    return {name: canvas[r * h:(r + 1) * h, c * w:(c + 1) * w]
            for r, row in enumerate(PANO_LAYOUT) for c, name in enumerate(row)}


# -- object guidance masks -------------------------------------------------------------

def _voxel_centres(idx: np.ndarray, shape, vs: float) -> np.ndarray:
    z, h, w = shape
    return np.stack([(idx[:, 2] + 0.5) * vs - w * vs / 2, (idx[:, 1] + 0.5) * vs - h * vs / 2,
                     (idx[:, 0] + 0.5) * vs], axis=1)


def _project_splats(volume: wv.WorldVolume, camera: Camera, cls: int, d: float):
    """(x, y, delta) in pixels for every voxel of ``cls`` in front of the camera."""
    idx = np.argwhere(volume.occupancy == cls)
    if not len(idx):
        return np.zeros((0, 3))
    pts = _voxel_centres(idx, volume.shape, volume.voxel_size)
    # T here is camera -> ego; its inverse maps ego points into the camera
    inv = np.linalg.inv(camera.cam_to_ego)
    R, t = inv[:3, :3], inv[:3, 3]
    p = (pts @ R.T + t) @ camera.K.T
    keep = p[:, 2] > 0
    p = p[keep]
    return np.stack([p[:, 0] / p[:, 2], p[:, 1] / p[:, 2], d / p[:, 2]], axis=1)


def project_masks(volume: wv.WorldVolume, camera: Camera, d: float = MASK_D,
                  classes=GUIDED_CLASSES) -> dict:
    """Per-class boolean masks [H, W] from square splats of half-width d / depth around each voxel.

    A pixel centre (i, j) is marked when |i - x| <= delta and |j - y| <= delta.
    """
    if d <= 0:
        raise ValueError("d must be positive")
    hgt, wid = camera.height, camera.width
    out = {}
    for cls in classes:
        s = _project_splats(volume, camera, cls, d)
        acc = np.zeros((hgt + 1, wid + 1), np.int64)
        if len(s):
            x, y, delta = s[:, 0], s[:, 1], s[:, 2]
            u0 = np.ceil(x - delta)
            u1 = np.floor(x + delta)
            v0 = np.ceil(y - delta)
            v1 = np.floor(y + delta)
            ok = (u1 >= 0) & (u0 <= wid - 1) & (v1 >= 0) & (v0 <= hgt - 1) & (u0 <= u1) & (v0 <= v1)
            u0 = np.clip(u0[ok], 0, wid - 1).astype(np.int64)
            u1 = np.clip(u1[ok], 0, wid - 1).astype(np.int64) + 1
            v0 = np.clip(v0[ok], 0, hgt - 1).astype(np.int64)
            v1 = np.clip(v1[ok], 0, hgt - 1).astype(np.int64) + 1
            np.add.at(acc, (v0, u0), 1)
            np.add.at(acc, (v0, u1), -1)
            np.add.at(acc, (v1, u0), -1)
            np.add.at(acc, (v1, u1), 1)
        out[cls] = acc.cumsum(0).cumsum(1)[:hgt, :wid] > 0
    return out


def project_masks_oracle(volume: wv.WorldVolume, camera: Camera, d: float = MASK_D,
                         classes=GUIDED_CLASSES) -> dict:
    """Exhaustive per-pixel box-membership test; O(pixels x voxels)."""
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    out = {}
    for cls in classes:
        m = np.zeros((camera.height, camera.width), bool)
        for x, y, delta in _project_splats(volume, camera, cls, d):
            m |= (ii >= x - delta) & (ii <= x + delta) & (jj >= y - delta) & (jj <= y + delta)
        out[cls] = m
    return out


def panoptic_masks(volume: wv.WorldVolume, rig: CameraRig, d: float = MASK_D,
                   classes=GUIDED_CLASSES) -> np.ndarray:
    """[K, 2H, 3W] boolean masks for the guided classes, tiled like the panoptic canvas."""
    per_cam = {cam.name: project_masks(volume, cam, d, classes) for cam in rig}
    layers = []
    for cls in classes:
        views = {n: per_cam[n][cls][..., None] for n in per_cam}
        layers.append(tile_images(views)[..., 0])
    return np.stack(layers)


# -- full conditioning network ---------------------------------------------------------

class WorldConditioner(nn.Module):
    """World volume -> panoptic feature F_pano [C_f, 2H_c, 3W_c]."""

    def __init__(self, rig: CameraRig, dim: int = FEATURE_DIM, depths: int = DEPTHS,
                 cond_hw: tuple | None = None):
        super().__init__()
        self.embed = ClassEmbedding(dim)
        self.sparse = SparseEncoder(dim)
        self.se = SqueezeExcite(dim, depths)
        self.names = tuple(n for row in PANO_LAYOUT for n in row)
        pts = []
        for name in self.names:
            fr = build_frustum(rig[name], depths, height=cond_hw[0] if cond_hw else None,
                               width=cond_hw[1] if cond_hw else None)
            pts.append(ego_to_voxel(fr.points))
        self.frustum_shape = pts[0].shape[:3]
        idx = np.stack(pts).reshape(-1, 3)
        hi = np.array([wv.Z - 1, wv.H - 1, wv.W - 1], np.float64)
        inside = np.all((idx >= 0) & (idx <= hi), axis=1)
        # grid_sample wants (x, y, z) normalised to [-1, 1] with corners aligned to voxel centres
        norm = idx[inside] / hi * 2 - 1
        self.n_points = len(idx)
        self.register_buffer("grid", torch.from_numpy(norm[:, ::-1].copy()).float().reshape(1, 1, 1, -1, 3),
                             persistent=False)
        self.register_buffer("inside", torch.from_numpy(np.nonzero(inside)[0]), persistent=False)

    def world_features(self, occupancy: torch.Tensor, map_index: torch.Tensor) -> torch.Tensor:
        f = featurize_classes(occupancy, map_index, self.embed)
        return sparse_conv_encode(f, occupancy != wv.EMPTY, self.sparse)

    def forward(self, occupancy: torch.Tensor, map_index: torch.Tensor) -> torch.Tensor:
        """occupancy [B, Z, H, W], map_index [B, H, W] -> F_pano [B, C_f, 2H_c, 3W_c]."""
        b = occupancy.shape[0]
        fw = torch.stack([self.world_features(occupancy[i], map_index[i]) for i in range(b)])
        c = fw.shape[1]
        # same result as trilinear_sample restricted to in-volume points, via the fused kernel
        inner = F.grid_sample(fw, self.grid.expand(b, -1, -1, -1, -1), mode="bilinear",
                              padding_mode="zeros", align_corners=True).reshape(b, c, -1)
        samples = inner.new_zeros(b, c, self.n_points)
        samples[:, :, self.inside] = inner
        d, h, w = self.frustum_shape
        n = len(self.names)
        f_cam = samples.reshape(b, c, n, d, h, w).transpose(1, 2).reshape(b * n, c, d, h, w)
        f_img = se_depth_collapse(f_cam, self.se).reshape(b, n, c, h, w)
        return panoptic_tile({name: f_img[:, i] for i, name in enumerate(self.names)})
