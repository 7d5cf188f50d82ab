"""Ray-cast rendering of world volumes and palette classification of images."""

from __future__ import annotations

import numpy as np

from . import volume as wv
from .camera import Camera

MAX_RAY = 40.0
SHADE_MIN = 0.75          # brightness at MAX_RAY; 1.0 at the camera
PALETTE = np.array([c.display_rgb for c in wv.CLASSES], np.float64)

# weather tint: rgb' = M @ rgb + o (0..255 scale)
_GRAY = np.full((3, 3), 1 / 3)
TINTS = {
    "sunny": (np.eye(3), np.zeros(3)),
    "rainy": (0.75 * (0.5 * np.eye(3) + 0.5 * _GRAY), np.zeros(3)),
    "night": (np.diag([0.45 * 0.85, 0.45 * 0.9, 0.45]), np.array([0.0, 0.0, 40.0])),
}


def dda_hits(volume: wv.WorldVolume, origin: np.ndarray, dirs: np.ndarray, max_t: float = MAX_RAY):
    """March rays through the voxel grid.

    ``origin`` [3] and unit ``dirs`` [N, 3] are in the ego frame (metres).
    Returns (class [N], voxel index [N, 3] as (z, y, x) or -1, entry distance [N]).
    """
    occ = volume.occupancy
    zd, hd, wd = occ.shape
    vs = volume.voxel_size
    grid_lo = np.array([-wd * vs / 2, -hd * vs / 2, 0.0])
    extent = np.array([wd, hd, zd])
    n = len(dirs)
    g0 = (np.asarray(origin, np.float64) - grid_lo) / vs          # (x, y, z) in voxel units
    d = np.asarray(dirs, np.float64)

    # advance rays that start outside the grid to their entry point
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (0.0 - g0) * inv * vs
        t2 = (extent - g0) * inv * vs
    tnear = np.nanmax(np.where(np.isnan(np.minimum(t1, t2)), -np.inf, np.minimum(t1, t2)), axis=1)
    tfar = np.nanmin(np.where(np.isnan(np.maximum(t1, t2)), np.inf, np.maximum(t1, t2)), axis=1)
    t_start = np.maximum(tnear, 0.0)
    alive = (tfar > t_start) & (t_start <= max_t)
    p = g0 + d * (t_start / vs)[:, None]
    cell = np.floor(p).astype(np.int64)
    inside0 = np.all((g0 >= 0) & (g0 < extent))
    if not inside0:
        # entry point lies on a face; step into the grid along that face
        cell = np.clip(cell, 0, extent - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        nxt = cell + (step > 0)
        t_max = np.where(step != 0, (nxt - g0) * vs / d, np.inf)
        t_delta = np.where(step != 0, vs / np.abs(d), np.inf)
    t_cell = t_start.copy()

    cls = np.zeros(n, np.int64)
    hit_idx = np.full((n, 3), -1, np.int64)
    hit_t = np.full(n, np.inf)
    active = alive.copy()
    while active.any():
        idx = np.nonzero(active)[0]
        c = cell[idx]
        inb = np.all((c >= 0) & (c < extent), axis=1) & (t_cell[idx] <= max_t)
        done = idx[~inb]
        active[done] = False
        idx, c = idx[inb], c[inb]
        if not len(idx):
            break
        k = occ[c[:, 2], c[:, 1], c[:, 0]]
        hit = k != wv.EMPTY
        h = idx[hit]
        cls[h] = k[hit]
        hit_idx[h] = c[hit][:, ::-1]
        hit_t[h] = t_cell[h]
        active[h] = False
        idx = idx[~hit]
        tm = t_max[idx]
        axis = np.argmin(tm, axis=1)
        r = np.arange(len(idx))
        t_cell[idx] = tm[r, axis]
        cell[idx, axis] += step[idx, axis]
        t_max[idx, axis] += t_delta[idx, axis]
    return cls, hit_idx, hit_t


def brute_force_hit(volume: wv.WorldVolume, origin, direction, max_t: float = MAX_RAY):
    """Nearest occupied voxel along one ray by slab-testing every occupied voxel."""
    vs = volume.voxel_size
    zd, hd, wd = volume.shape
    occ_idx = np.argwhere(volume.occupancy != wv.EMPTY)            # (z, y, x)
    if not len(occ_idx):
        return wv.EMPTY, (-1, -1, -1), np.inf
    lo = np.stack([occ_idx[:, 2] * vs - wd * vs / 2, occ_idx[:, 1] * vs - hd * vs / 2,
                   occ_idx[:, 0] * vs], axis=1)
    hi = lo + vs
    o = np.asarray(origin, np.float64)
    d = np.asarray(direction, np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - o) / d
        b = (hi - o) / d
    tn = np.nanmax(np.minimum(a, b), axis=1)
    tf = np.nanmin(np.maximum(a, b), axis=1)
    ok = (tf >= np.maximum(tn, 0.0)) & (np.maximum(tn, 0.0) <= max_t)
    # rays parallel to an axis: half-open cell membership, as floor() in the DDA
    par = d == 0
    ok &= np.all(~par | ((lo <= o) & (o < hi)), axis=1)
    if not ok.any():
        return wv.EMPTY, (-1, -1, -1), np.inf
    entry = np.where(ok, np.maximum(tn, 0.0), np.inf)
    i = int(np.argmin(entry))
    z, y, x = occ_idx[i]
    return int(volume.occupancy[z, y, x]), (int(z), int(y), int(x)), float(entry[i])


def shade_and_tint(cls: np.ndarray, dist: np.ndarray, weather: str) -> np.ndarray:
    rgb = PALETTE[cls]
    shade = np.where(cls == wv.EMPTY, 1.0,
                     1.0 - (1.0 - SHADE_MIN) * np.minimum(np.nan_to_num(dist, posinf=MAX_RAY) / MAX_RAY, 1.0))
    return apply_tint(rgb * shade[..., None], weather)


def apply_tint(rgb: np.ndarray, weather: str) -> np.ndarray:
    M, o = TINTS[weather]
    out = np.asarray(rgb, np.float64) @ M.T + o
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def remove_tint(rgb: np.ndarray, weather: str) -> np.ndarray:
    M, o = TINTS[weather]
    return (np.asarray(rgb, np.float64) - o) @ np.linalg.inv(M).T


def raycast_render(volume: wv.WorldVolume, camera: Camera, weather: str = "sunny") -> np.ndarray:
    """RGB uint8 image [H, W, 3] of ``volume`` seen from ``camera``."""
    origin, dirs = camera.pixel_rays()
    cls, _, dist = dda_hits(volume, origin, dirs.reshape(-1, 3))
    img = shade_and_tint(cls, dist, weather)
    return img.reshape(camera.height, camera.width, 3)


def render_classes(volume: wv.WorldVolume, camera: Camera) -> np.ndarray:
    origin, dirs = camera.pixel_rays()
    cls, _, _ = dda_hits(volume, origin, dirs.reshape(-1, 3))
    return cls.reshape(camera.height, camera.width)


def classify_pixels(img: np.ndarray, weather: str = "sunny") -> np.ndarray:
    """Nearest palette class per pixel after undoing the weather tint.

    Each class colour may appear at any distance shade in [SHADE_MIN, 1], so
    the distance is measured to the segment {s * colour}.
    """
    p = remove_tint(img, weather)[..., None, :]                        # [..., 1, 3]
    c = PALETTE
    s = np.clip((p * c).sum(-1) / (c * c).sum(-1), SHADE_MIN, 1.0)     # [..., K]
    dist = ((p - s[..., None] * c) ** 2).sum(-1)
    return np.argmin(dist, axis=-1)
