"""Pixel, voxel and consistency metrics used by the CLI and the acceptance suite."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import volume as wv
from .camera import CameraRig, default_rig
from .render import classify_pixels, dda_hits

# horizontally adjacent camera pairs around the rig
ADJACENT = (("front", "front-right"), ("front-right", "back-right"), ("back-right", "back"),
            ("back", "back-left"), ("back-left", "front-left"), ("front-left", "front"))


class InventoryMismatch(ValueError):
    pass


def class_agreement(img_a: np.ndarray, weather_a: str, img_b: np.ndarray, weather_b: str) -> float:
    """Fraction of pixels whose palette classes agree between two images."""
    if img_a.shape != img_b.shape:
        raise InventoryMismatch(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    return float((classify_pixels(img_a, weather_a) == classify_pixels(img_b, weather_b)).mean())


def chance_agreement(cls_a: np.ndarray, cls_b: np.ndarray, n_classes: int = wv.C_OCC) -> float:
    """Expected agreement of two independent labelings with the observed class frequencies."""
    pa = np.bincount(cls_a.ravel(), minlength=n_classes) / cls_a.size
    pb = np.bincount(cls_b.ravel(), minlength=n_classes) / cls_b.size
    return float((pa * pb).sum())


def frame_consistency(frames: list) -> float:
    """Mean absolute frame-to-frame pixel difference in [0, 1]; 0 for identical frames."""
    if len(frames) < 2:
        return 0.0
    diffs = [np.abs(frames[i + 1][n].astype(np.float64) - frames[i][n].astype(np.float64)).mean() / 255
             for i in range(len(frames) - 1) for n in frames[i]]
    return float(np.mean(diffs))


def _hits(volume: wv.WorldVolume, cam):
    origin, dirs = cam.pixel_rays()
    cls, idx, t = dda_hits(volume, origin, dirs.reshape(-1, 3))
    return origin, dirs.reshape(-1, 3), cls, idx, t


def shared_points(volume: wv.WorldVolume, cam_a, cam_b):
    """Pixel pairs (flat index in a, flat index in b) that see the same voxel surface point."""
    oa, da, cls_a, idx_a, t_a = _hits(volume, cam_a)
    _, _, _, idx_b, _ = _hits(volume, cam_b)
    hit = cls_a != wv.EMPTY
    pts = oa + da[hit] * t_a[hit, None]
    uvz = cam_b.project(pts)
    u, v = np.rint(uvz[:, 0]), np.rint(uvz[:, 1])
    ok = (uvz[:, 2] > 0) & (u >= 0) & (u < cam_b.width) & (v >= 0) & (v < cam_b.height)
    src = np.nonzero(hit)[0][ok]
    dst = (v[ok] * cam_b.width + u[ok]).astype(np.int64)
    same = np.all(idx_a[src] == idx_b[dst], axis=1)
    return src[same], dst[same]


def cross_view_agreement(images: dict, weather: str, volume: wv.WorldVolume,
                         rig: CameraRig | None = None) -> float:
    """Class agreement between adjacent cameras at pixels that image the same voxel.

    Returns NaN when no camera pair shares a visible voxel.
    """
    rig = rig or default_rig()
    agree, total = 0, 0
    for a, b in ADJACENT:
        src, dst = shared_points(volume, rig[a], rig[b])
        if not len(src):
            continue
        ca = classify_pixels(images[a], weather).ravel()[src]
        cb = classify_pixels(images[b], weather).ravel()[dst]
        agree += int((ca == cb).sum())
        total += len(src)
    return agree / total if total else float("nan")


def tint_statistics(images: dict) -> list:
    """Mean RGB over all views, a global tint descriptor."""
    return np.mean([img.reshape(-1, 3).mean(0) for img in images.values()], axis=0).tolist()


@dataclass
class MetricsReport:
    voxel_iou: dict = field(default_factory=dict)          # class name -> IoU in [0, 1]
    pixel_agreement: float | None = None                   # fraction of pixels, [0, 1]
    consistency: float | None = None                       # mean |frame diff| / 255, [0, 1]
    cross_view_agreement: float | None = None              # fraction of shared points, [0, 1]
    tint_shift: float | None = None                        # mean |RGB mean difference| / 255
    losses: dict = field(default_factory=dict)             # curve name -> values

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not np.isfinite(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean(asdict(self)), indent=1, sort_keys=True) + "\n"


def volume_ious(a: list, b: list, classes=None) -> dict:
    if len(a) != len(b):
        raise InventoryMismatch(f"{len(a)} vs {len(b)} volumes")
    classes = classes or range(1, wv.C_OCC)
    return {wv.CLASSES[c].name: float(np.mean([wv.voxel_iou(x, y, c) for x, y in zip(a, b)]))
            for c in classes}


def compare_frames(run_frames: list, run_weather: str, ref_frames: list, ref_weather: str) -> tuple:
    """(pixel agreement, tint shift) between two per-frame image inventories."""
    if len(run_frames) != len(ref_frames) or any(set(r) != set(q) for r, q in zip(run_frames, ref_frames)):
        raise InventoryMismatch("frame/camera inventories differ")
    agree = [class_agreement(r[n], run_weather, q[n], ref_weather)
             for r, q in zip(run_frames, ref_frames) for n in r]
    shift = [np.abs(np.subtract(tint_statistics(r), tint_statistics(q))).mean() / 255
             for r, q in zip(run_frames, ref_frames)]
    return float(np.mean(agree)), float(np.mean(shift))
