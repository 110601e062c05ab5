"""Binary map file: a flat little-endian record array of live splats.

Layout: 8-byte magic, u32 version, u64 count, then `count` records of
14 float32 values (mean xyz, quat wxyz, log-scale xyz, opacity logit,
color rgb). Storage in memory is float32 too, so save -> load -> render
reproduces the original bit for bit.

Provenance labels are a synthetic-dataset extra and live in a `.labels.npy`
sidecar next to the map file, never inside it.
"""
from __future__ import annotations

import os

import numpy as np

from .gmap import GaussianMap

MAGIC = b"EVOMAP\x00\x00"
VERSION = 1
_RECORD_FLOATS = 14


class MapFormatError(ValueError):
    """Corrupt or unsupported map file."""


def _labels_path(path: str) -> str:
    return path + ".labels.npy"


def save_map(gmap: GaussianMap, path: str):
    """Write live splats in row order (stable across save/load cycles)."""
    rows = gmap.live_rows()
    n = len(rows)
    rec = np.empty((n, _RECORD_FLOATS), dtype="<f4")
    rec[:, 0:3] = gmap.means[rows]
    rec[:, 3:7] = gmap.quats[rows]
    rec[:, 7:10] = gmap.log_scales[rows]
    rec[:, 10] = gmap.opacity_logits[rows]
    rec[:, 11:14] = gmap.colors[rows]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint64(n).tobytes())
        f.write(rec.tobytes())
    labels = gmap.labels[rows]
    if labels.any():
        np.save(_labels_path(path), labels)
    elif os.path.exists(_labels_path(path)):
        os.remove(_labels_path(path))


def load_map(path: str) -> GaussianMap:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise MapFormatError(f"{path}: bad magic {magic!r}")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != VERSION:
            raise MapFormatError(f"{path}: unsupported version {version}")
        n = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        payload = f.read()
    expected = n * _RECORD_FLOATS * 4
    if len(payload) != expected:
        raise MapFormatError(f"{path}: payload is {len(payload)} bytes, "
                             f"expected {expected} for {n} records")
    rec = np.frombuffer(payload, dtype="<f4").reshape(n, _RECORD_FLOATS)

    gmap = GaussianMap(capacity=max(n, 1))
    labels = None
    if os.path.exists(_labels_path(path)):
        labels = np.load(_labels_path(path))
        if labels.shape != (n,):
            raise MapFormatError(f"{path}: labels sidecar has shape "
                                 f"{labels.shape}, expected ({n},)")
    if n:
        gmap.insert(rec[:, 0:3], rec[:, 11:14], log_scales=rec[:, 7:10],
                    quats=rec[:, 3:7], opacity_logits=rec[:, 10],
                    labels=labels)
    return gmap
