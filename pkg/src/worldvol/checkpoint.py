"""Checkpoint directories: a text manifest plus one little-endian float32 blob.

Layout::

    <dir>/manifest.txt   one line per tensor: "<name> <d0>x<d1>x..." ("-" for scalars)
    <dir>/params.bin     concatenated float32 data in manifest order
    <dir>/meta.txt       optional key=value metadata
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch


class CheckpointError(ValueError):
    pass


def save_state(state: dict, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().to(torch.float32).numpy()
        shape = "x".join(str(s) for s in arr.shape) or "-"
        lines.append(f"{name} {shape}")
        blobs.append(arr.astype("<f4").tobytes())
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    (path / "params.bin").write_bytes(b"".join(blobs))
    if meta:
        (path / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(meta.items())))


def load_state(path) -> dict:
    path = Path(path)
    man, blob = path / "manifest.txt", path / "params.bin"
    for f in (man, blob):
        if not f.exists():
            raise FileNotFoundError(f)
    data = blob.read_bytes()
    out, off = {}, 0
    for line in man.read_text().splitlines():
        if not line.strip():
            continue
        name, shape = line.rsplit(" ", 1)
        dims = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
        n = int(np.prod(dims)) if dims else 1
        if off + 4 * n > len(data):
            raise CheckpointError(f"params.bin truncated at {name}")
        arr = np.frombuffer(data, "<f4", n, off).reshape(dims).copy()
        out[name] = torch.from_numpy(arr)
        off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} unreferenced bytes in params.bin")
    return out


def load_meta(path) -> dict:
    f = Path(path) / "meta.txt"
    if not f.exists():
        return {}
    return dict(line.split("=", 1) for line in f.read_text().splitlines() if line)


def save_module(module: torch.nn.Module, path, meta: dict | None = None) -> None:
    save_state(module.state_dict(), path, meta)


def load_module(module: torch.nn.Module, path) -> torch.nn.Module:
    state = load_state(path)
    own = module.state_dict()
    missing = set(own) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
    module.load_state_dict({k: state[k].to(own[k].dtype).reshape(own[k].shape) for k in own})
    return module


def state_hash(state: dict, names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
