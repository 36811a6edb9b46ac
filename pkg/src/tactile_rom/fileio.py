"""Binary file formats.

Trajectory (``.traj``), little-endian::

    magic  b"TROM"
    u32    version
    u64    particle count N
    u64    frame count T
    f64    dt
    f64    dx
    u32 x3 grid dims
    T x { f32 x (N*3), f32 v (N*3), f32 F (N*9), f32 indenter pose (7) }

Checkpoint (``.romw``)::

    magic  b"ROMW"
    u32    version
    u32    header byte length H
    H      UTF-8 JSON header (architecture, normalization, metadata, layout)
    f32    parameter blob in the order listed by header["layout"]
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TRAJ_MAGIC = b"TROM"
TRAJ_VERSION = 1
_TRAJ_HEADER = struct.Struct("<4sIQQdd3I")

CKPT_MAGIC = b"ROMW"
CKPT_VERSION = 1


class FormatError(IOError):
    pass


def frame_floats(n):
    return n * 15 + 7


def write_trajectory(path, x, v, F, poses, dt, dx, grid_dims):
    """Write frames; x, v: (T, N, 3), F: (T, N, 3, 3), poses: (T, 7)."""
    x = np.asarray(x)
    T = 0 if x.size == 0 and x.ndim < 3 else x.shape[0]
    n = x.shape[1] if x.ndim == 3 else 0
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, n, T, float(dt), float(dx),
                                   *(int(d) for d in grid_dims)))
        for k in range(T):
            fh.write(np.ascontiguousarray(x[k], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(v[k], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(np.asarray(F[k]).reshape(n, 9), dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(poses[k], dtype="<f4").tobytes())


def write_header_only(path, n, dt, dx, grid_dims):
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, n, 0, float(dt), float(dx),
                                   *(int(d) for d in grid_dims)))


def read_trajectory_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_TRAJ_HEADER.size)
    if len(raw) < _TRAJ_HEADER.size:
        raise FormatError(f"{path}: truncated trajectory header")
    magic, version, n, T, dt, dx, d0, d1, d2 = _TRAJ_HEADER.unpack(raw)
    if magic != TRAJ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TRAJ_VERSION:
        raise FormatError(f"{path}: unsupported trajectory version {version}")
    return {"n": n, "frames": T, "dt": dt, "dx": dx, "grid_dims": (d0, d1, d2)}


def read_trajectory(path):
    """Returns (header, x, v, F, poses) with float32 arrays."""
    head = read_trajectory_header(path)
    n, T = head["n"], head["frames"]
    data = np.fromfile(path, dtype="<f4", offset=_TRAJ_HEADER.size)
    if data.size != T * frame_floats(n):
        raise FormatError(f"{path}: expected {T * frame_floats(n)} floats, found {data.size}")
    data = data.reshape(T, frame_floats(n))
    x = data[:, : 3 * n].reshape(T, n, 3)
    v = data[:, 3 * n: 6 * n].reshape(T, n, 3)
    F = data[:, 6 * n: 15 * n].reshape(T, n, 3, 3)
    poses = data[:, 15 * n:]
    return head, x, v, F, poses


def write_checkpoint(path, header: dict, arrays: list[tuple[str, np.ndarray]]):
    header = dict(header)
    header["layout"] = [[name, list(a.shape)] for name, a in arrays]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} (expected {CKPT_VERSION})")
    header = json.loads(raw[12:12 + hlen].decode())
    off = 12 + hlen
    arrays = []
    for name, shape in header["layout"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(raw):
            raise FormatError(f"{path}: parameter blob truncated in {name}")
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays.append((name, a.astype(np.float32)))
        off += 4 * count
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after parameter blob")
    return header, arrays
