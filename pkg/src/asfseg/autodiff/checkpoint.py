"""Checkpoint container.

Layout (little-endian):

    bytes 0..7    magic b"ASFSEGCK"
    bytes 8..11   format version (u32)
    bytes 12..19  header length in bytes (u64)
    header        UTF-8 JSON
    payload       concatenated raw float32 buffers

The header lists every tensor as {"name", "kind", "shape", "offset"} with
offsets into the payload; kinds are "param", "buffer" (BatchNorm running
statistics), "adam_m" and "adam_v". It also carries the optimizer step count
and a free-form "meta" object (network/preprocessing configuration), so a
checkpoint alone is enough to rebuild the model for inference.
"""

import json
import os

import numpy as np

from ..errors import VolumeFormatError
from .optim import AdamState
from .tensor import Tensor

MAGIC = b"ASFSEGCK"
VERSION = 1


def _entries(kind, tensors, offset):
    out = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        out.append(({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset}, arr))
        offset += arr.nbytes
    return out, offset


def save_checkpoint(path, params, buffers=None, adam=None, step=0, meta=None):
    """Write params {name: Tensor}, buffers {name: array}, optional AdamState."""
    groups = [("param", {k: v.numpy() for k, v in params.items()})]
    if buffers:
        groups.append(("buffer", buffers))
    if adam is not None:
        step = adam.step
        groups.append(("adam_m", adam.m))
        groups.append(("adam_v", adam.v))
    entries, offset = [], 0
    for kind, tensors in groups:
        part, offset = _entries(kind, tensors, offset)
        entries.extend(part)
    header = json.dumps({
        "step": int(step),
        "has_adam": adam is not None,
        "meta": meta or {},
        "tensors": [e for e, _ in entries],
    }, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        for _, arr in entries:
            f.write(arr.tobytes())
    os.replace(tmp, path)


class Checkpoint:
    def __init__(self, params, buffers, adam, step, meta):
        self.params = params
        self.buffers = buffers
        self.adam = adam
        self.step = step
        self.meta = meta


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise VolumeFormatError(f"{path}: not a checkpoint file")
    version = int(np.frombuffer(raw[8:12], dtype=np.uint32)[0])
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(raw[12:20], dtype=np.uint64)[0])
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = raw[20 + hlen:]

    def read(entry):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=start).reshape(shape)
        return arr.copy()

    params, buffers, adam_m, adam_v = {}, {}, {}, {}
    for entry in header["tensors"]:
        arr = read(entry)
        kind = entry["kind"]
        if kind == "param":
            params[entry["name"]] = Tensor(arr, requires_grad=True)
        elif kind == "buffer":
            buffers[entry["name"]] = arr
        elif kind == "adam_m":
            adam_m[entry["name"]] = arr
        elif kind == "adam_v":
            adam_v[entry["name"]] = arr
        else:
            raise VolumeFormatError(f"{path}: unknown tensor kind '{kind}'")
    adam = AdamState(step=header["step"], m=adam_m, v=adam_v) if header.get("has_adam") else None
    return Checkpoint(params, buffers, adam, header["step"], header.get("meta", {}))
