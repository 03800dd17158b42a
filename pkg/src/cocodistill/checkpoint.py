"""CCDN checkpoint files.

Layout (all little-endian): magic ``CCDN``, u16 version (1), u32 tensor count,
then per tensor: u16 name length, UTF-8 name, u8 ndim, u32 per dim, f64 payload.
Network metadata (role, spec, taps) lives in a JSON sidecar next to the file.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"CCDN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated ({e})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def sidecar_path(path):
    return os.path.splitext(path)[0] + ".json"


def save_network(path, net, meta=None):
    save_tensors(path, net.state_dict())
    info = {"role": net.spec.role, "seed": net.seed, "spec": net.spec.to_dict(), "taps": list(net.spec.taps)}
    if meta:
        info.update(meta)
    with open(sidecar_path(path), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


def load_network(path):
    from .nn import NetworkSpec, build_network

    with open(sidecar_path(path)) as fh:
        info = json.load(fh)
    net = build_network(NetworkSpec.from_dict(info["spec"]), info["seed"])
    net.load_state_dict(load_tensors(path))
    return net, info
