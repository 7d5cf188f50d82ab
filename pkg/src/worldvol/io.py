"""Binary PPM images and the on-disk dataset layout.

A dataset directory holds, per sequence ``seqN``::

    seqN.wseq                       world volumes and actions
    seqN/prompt.txt                 scene prompt
    seqN/<frame>/<camera>.ppm       rendered views (optional)
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from . import volume as wv
from .camera import CAMERA_NAMES


class PPMError(ValueError):
    pass


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise PPMError(f"expected uint8 HxWx3 image, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if m is None or int(m.group(3)) != 255:
        raise PPMError(f"{path}: not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end():]
    if len(body) != w * h * 3:
        raise PPMError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).copy()


def to_gray(x: np.ndarray) -> np.ndarray:
    """Min-max normalise a 2D array to uint8 (constant arrays map to 0)."""
    x = np.asarray(x, np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, np.uint8)
    return np.rint((x - lo) / (hi - lo) * 255).astype(np.uint8)


def write_frames(directory, frames: list) -> None:
    """Write per-frame dicts of camera images as ``<frame>/<camera>.ppm``."""
    directory = Path(directory)
    for f, views in enumerate(frames):
        (directory / str(f)).mkdir(parents=True, exist_ok=True)
        for name, img in views.items():
            write_ppm(directory / str(f) / f"{name}.ppm", img)


def read_frames(directory) -> list:
    directory = Path(directory)
    frames = []
    f = 0
    while (directory / str(f)).is_dir():
        frames.append({n: read_ppm(directory / str(f) / f"{n}.ppm") for n in CAMERA_NAMES
                       if (directory / str(f) / f"{n}.ppm").exists()})
        f += 1
    return frames


def save_sequence_dir(directory, name: str, seq: wv.WorldVolumeSequence, frames: list, prompt: str) -> None:
    directory = Path(directory)
    wv.save_sequence(seq, directory / f"{name}.wseq")
    (directory / name).mkdir(parents=True, exist_ok=True)
    (directory / name / "prompt.txt").write_text(prompt + "\n")
    if frames and frames[0]:
        write_frames(directory / name, frames)


def sequence_names(directory) -> list:
    names = [p.stem for p in Path(directory).glob("*.wseq")]
    return sorted(names, key=lambda s: (len(s), s))


def load_sequence_dir(directory, name: str, images: bool = True):
    """(sequence, frames, prompt) for one sequence of a dataset directory."""
    directory = Path(directory)
    seq = wv.load_sequence(directory / f"{name}.wseq")
    pfile = directory / name / "prompt.txt"
    prompt = pfile.read_text().strip() if pfile.exists() else ""
    frames = read_frames(directory / name) if images else []
    return seq, frames, prompt
