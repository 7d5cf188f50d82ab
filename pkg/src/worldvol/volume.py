"""Semantic world volumes: occupancy grid plus an HD-map plane at ground level."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

Z, H, W = 16, 64, 64
VOXEL_SIZE = 0.5


class SemanticClass(NamedTuple):
    id: int
    name: str
    display_rgb: tuple[int, int, int]


CLASSES = (
    SemanticClass(0, "empty", (135, 206, 235)),  # drawn as sky
    SemanticClass(1, "road", (90, 90, 90)),
    SemanticClass(2, "sidewalk", (200, 160, 120)),
    SemanticClass(3, "lane-marking", (250, 250, 250)),
    SemanticClass(4, "building", (170, 50, 40)),
    SemanticClass(5, "vehicle", (30, 50, 210)),
    SemanticClass(6, "pedestrian", (235, 200, 20)),
    SemanticClass(7, "vegetation", (30, 150, 40)),
)
C_OCC = len(CLASSES)
CLASS_IDS = {c.name: c.id for c in CLASSES}
EMPTY, ROAD, SIDEWALK, LANE, BUILDING, VEHICLE, PEDESTRIAN, VEGETATION = range(C_OCC)
DYNAMIC_CLASSES = (VEHICLE, PEDESTRIAN)

MAP_NONE = (0, 0, 0)
MAP_ROAD = (128, 128, 128)
MAP_LANE = (255, 255, 255)
MAP_CROSSWALK = (255, 255, 0)
MAP_PALETTE = (MAP_NONE, MAP_ROAD, MAP_LANE, MAP_CROSSWALK)
C_MAP = 3


class VolumeFormatError(ValueError):
    pass


class BadMagic(VolumeFormatError):
    pass


class VersionMismatch(VolumeFormatError):
    pass


class TruncatedPayload(VolumeFormatError):
    pass


class EditError(ValueError):
    pass


class CollisionError(EditError):
    def __init__(self, voxels):
        self.voxels = [tuple(int(i) for i in v) for v in voxels]
        super().__init__(f"{len(self.voxels)} occupied voxels in the way, first {self.voxels[0]}")


@dataclass(frozen=True, eq=False)
class WorldVolume:
    occupancy: np.ndarray            # uint8 [Z, H, W], z outermost
    map_plane: np.ndarray            # uint8 [H, W, 3]
    voxel_size: float = VOXEL_SIZE
    ego_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.uint8)
        mp = np.ascontiguousarray(self.map_plane, dtype=np.uint8)
        if occ.ndim != 3 or mp.shape != occ.shape[1:] + (3,):
            raise ValueError(f"map plane {mp.shape} does not match occupancy {occ.shape}")
        if occ.size and occ.max() >= C_OCC:
            raise ValueError(f"occupancy id {int(occ.max())} >= {C_OCC}")
        occ.flags.writeable = False
        mp.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "map_plane", mp)
        object.__setattr__(self, "ego_pose", tuple(float(v) for v in self.ego_pose))

    @property
    def shape(self):
        return self.occupancy.shape

    def __eq__(self, other):
        if not isinstance(other, WorldVolume):
            return NotImplemented
        return (np.array_equal(self.occupancy, other.occupancy)
                and np.array_equal(self.map_plane, other.map_plane)
                and np.float32(self.voxel_size) == np.float32(other.voxel_size)
                and np.array_equal(np.float32(self.ego_pose), np.float32(other.ego_pose)))

    def channels(self) -> np.ndarray:
        """Dense [C_occ + 3, Z, H, W] float32 view: one-hot occupancy then map RGB at z = 0."""
        z, h, w = self.shape
        out = np.zeros((C_OCC + C_MAP, z, h, w), dtype=np.float32)
        np.put_along_axis(out[:C_OCC], self.occupancy[None].astype(np.int64), 1.0, axis=0)
        out[C_OCC:, 0] = self.map_plane.transpose(2, 0, 1) / 255.0
        return out


@dataclass(frozen=True, eq=False)
class WorldVolumeSequence:
    frames: list
    actions: list                    # (velocity m/s, steering rad) per frame
    dt: float = 0.5

    def __post_init__(self):
        if len(self.frames) != len(self.actions):
            raise ValueError("one action per frame required")
        if self.frames:
            f0 = self.frames[0]
            for f in self.frames[1:]:
                if f.shape != f0.shape or np.float32(f.voxel_size) != np.float32(f0.voxel_size):
                    raise ValueError("frames must share dims and voxel size")

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, WorldVolumeSequence):
            return NotImplemented
        return (len(self) == len(other) and np.float32(self.dt) == np.float32(other.dt)
                and np.array_equal(np.float32(self.actions), np.float32(other.actions))
                and all(a == b for a, b in zip(self.frames, other.frames)))


def compose(occupancy: np.ndarray, map_plane: np.ndarray, voxel_size: float = VOXEL_SIZE,
            ego_pose=(0.0, 0.0, 0.0)) -> WorldVolume:
    occupancy = np.asarray(occupancy)
    map_plane = np.asarray(map_plane)
    if occupancy.ndim != 3 or map_plane.shape[:2] != occupancy.shape[1:]:
        raise ValueError(f"extent mismatch: occupancy {occupancy.shape}, map {map_plane.shape}")
    return WorldVolume(occupancy, map_plane, voxel_size, ego_pose)


def empty_volume(shape=(Z, H, W), **kw) -> WorldVolume:
    return WorldVolume(np.zeros(shape, np.uint8), np.zeros(shape[1:] + (3,), np.uint8), **kw)


# -- .wvol / .wseq --------------------------------------------------------------

WVOL_MAGIC = b"WVOL"
WSEQ_MAGIC = b"WSEQ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf3f")


def volume_to_bytes(v: WorldVolume) -> bytes:
    z, h, w = v.shape
    head = _HEADER.pack(WVOL_MAGIC, VERSION, z, h, w, C_OCC, v.voxel_size, *v.ego_pose)
    return head + v.occupancy.tobytes() + v.map_plane.tobytes()


def _read_volume(buf: memoryview, off: int) -> tuple[WorldVolume, int]:
    if len(buf) - off < 4:
        raise TruncatedPayload("file ends inside the magic")
    if bytes(buf[off:off + 4]) != WVOL_MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[off:off + 4])!r}")
    if len(buf) - off < _HEADER.size:
        raise TruncatedPayload("file ends inside the header")
    _, version, z, h, w, c_occ, vs, ex, ey, eyaw = _HEADER.unpack_from(buf, off)
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}")
    if c_occ != C_OCC:
        raise VolumeFormatError(f"file has {c_occ} classes, expected {C_OCC}")
    off += _HEADER.size
    n_occ, n_map = z * h * w, h * w * 3
    if len(buf) - off < n_occ + n_map:
        raise TruncatedPayload(f"need {n_occ + n_map} payload bytes, have {len(buf) - off}")
    occ = np.frombuffer(buf, np.uint8, n_occ, off).reshape(z, h, w).copy()
    mp = np.frombuffer(buf, np.uint8, n_map, off + n_occ).reshape(h, w, 3).copy()
    return WorldVolume(occ, mp, float(vs), (ex, ey, eyaw)), off + n_occ + n_map


def volume_from_bytes(data: bytes) -> WorldVolume:
    v, end = _read_volume(memoryview(data), 0)
    if end != len(data):
        raise VolumeFormatError(f"{len(data) - end} trailing bytes")
    return v


def save(volume: WorldVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(volume))


def load(path) -> WorldVolume:
    return volume_from_bytes(Path(path).read_bytes())


def sequence_to_bytes(seq: WorldVolumeSequence) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<4sIf", WSEQ_MAGIC, len(seq), seq.dt))
    for frame, (vel, steer) in zip(seq.frames, seq.actions):
        out.write(struct.pack("<ff", vel, steer))
        out.write(volume_to_bytes(frame))
    return out.getvalue()


def sequence_from_bytes(data: bytes) -> WorldVolumeSequence:
    buf = memoryview(data)
    if len(buf) < 4:
        raise TruncatedPayload("file ends inside the magic")
    if bytes(buf[:4]) != WSEQ_MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < 12:
        raise TruncatedPayload("file ends inside the header")
    _, n, dt = struct.unpack_from("<4sIf", buf, 0)
    off, frames, actions = 12, [], []
    for _ in range(n):
        if len(buf) - off < 8:
            raise TruncatedPayload("file ends inside a frame action")
        actions.append(struct.unpack_from("<ff", buf, off))
        frame, off = _read_volume(buf, off + 8)
        frames.append(frame)
    if off != len(buf):
        raise VolumeFormatError(f"{len(buf) - off} trailing bytes")
    return WorldVolumeSequence(frames, actions, dt)


def save_sequence(seq: WorldVolumeSequence, path) -> None:
    Path(path).write_bytes(sequence_to_bytes(seq))


def load_sequence(path) -> WorldVolumeSequence:
    return sequence_from_bytes(Path(path).read_bytes())


# -- editing -----------------------------------------------------------------------

def _check_box(shape, lo, hi):
    if any(l < 0 or h > s or l >= h for l, h, s in zip(lo, hi, shape)):
        raise EditError(f"box {tuple(lo)}..{tuple(hi)} outside volume {shape}")


def edit_insert_object(volume: WorldVolume, template: np.ndarray, pose) -> WorldVolume:
    """Place ``template`` [tz, ty, tx] (0 = transparent) with its min corner at voxel ``pose``.

    ``pose`` is (x, y, yaw) in voxel units with yaw snapped to a multiple of 90
    degrees; the template is rotated about the z axis before placement and sits
    on layer z = 1 (directly above the ground plane) unless ``pose`` has a
    fourth element giving the base layer.
    """
    x, y, yaw = int(pose[0]), int(pose[1]), float(pose[2])
    z0 = int(pose[3]) if len(pose) > 3 else 1
    quarter = int(round(yaw / 90.0)) % 4
    if abs(yaw - 90.0 * round(yaw / 90.0)) > 1e-6:
        raise EditError("yaw must be a multiple of 90 degrees")
    tmpl = np.rot90(np.asarray(template, np.uint8), k=quarter, axes=(1, 2))
    lo = (z0, y, x)
    hi = tuple(l + s for l, s in zip(lo, tmpl.shape))
    _check_box(volume.shape, lo, hi)
    occ = volume.occupancy.copy()
    region = occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    solid = tmpl != 0
    clash = np.argwhere(solid & (region != EMPTY))
    if len(clash):
        raise CollisionError(clash + np.array(lo))
    region[solid] = tmpl[solid]
    return WorldVolume(occ, volume.map_plane, volume.voxel_size, volume.ego_pose)


def edit_remove_object(volume: WorldVolume, lo, hi, classes=None) -> WorldVolume:
    """Clear voxels in the half-open (z, y, x) box [lo, hi) whose class is in ``classes``."""
    lo, hi = tuple(int(v) for v in lo), tuple(int(v) for v in hi)
    _check_box(volume.shape, lo, hi)
    occ = volume.occupancy.copy()
    region = occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    if classes is None:
        region[:] = EMPTY
    else:
        region[np.isin(region, list(classes))] = EMPTY
    return WorldVolume(occ, volume.map_plane, volume.voxel_size, volume.ego_pose)


def voxel_iou(a: WorldVolume, b: WorldVolume, cls) -> float:
    """IoU of the voxel sets labelled ``cls`` (an id or a collection of ids)."""
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch {a.shape} vs {b.shape}")
    ids = [cls] if np.isscalar(cls) else list(cls)
    ma, mb = np.isin(a.occupancy, ids), np.isin(b.occupancy, ids)
    # for multi-class sets a voxel only counts as shared if the labels agree
    inter = np.count_nonzero(ma & mb & (a.occupancy == b.occupancy))
    union = np.count_nonzero(ma | mb)
    return 1.0 if union == 0 else inter / union
