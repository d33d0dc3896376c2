"""Binary checkpoints: networks, memory bank and training state in one file.

Layout (little-endian throughout)::

    b"VIPG"  u32 version
    u32 n    config JSON (n bytes, UTF-8, sorted keys)
    u32 n    metadata JSON
    u32 count
    count x [u16 name_len, name, u8 dtype code, u8 ndim, ndim x u32 extent, raw payload]

dtype codes: 0 float32 ("single"), 1 float64 ("double"), 2 uint8.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VIPG"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_KINDS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2, np.dtype("bool"): 2}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> ndarray, in insertion order
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<I", VERSION)]
        for blob in (self.config, self.metadata):
            raw = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
            out += [struct.pack("<I", len(raw)), raw]
        out.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _KINDS:
                raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
            code = _KINDS[arr.dtype]
            key = name.encode("utf-8")
            out += [struct.pack("<H", len(key)), key, struct.pack("<BB", code, arr.ndim)]
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("checkpoint is truncated")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        blobs = []
        for _ in range(2):
            (n,) = struct.unpack("<I", take(4))
            blobs.append(json.loads(bytes(take(n)).decode("utf-8")))
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2))
            name = bytes(take(n)).decode("utf-8")
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _CODES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            dt = _CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape)
            tensors[name] = arr.astype(dt.newbyteorder("="))
        if pos != len(view):
            raise CheckpointError("trailing bytes after the last tensor record")
        return cls(blobs[0], tensors, blobs[1])

    def save(self, path) -> Path:
        """Write atomically: a crash mid-write never leaves a torn checkpoint."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


# ---------------------------------------------------------------- model <-> checkpoint

def hp_to_dict(hp) -> dict:
    d = asdict(hp)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def hp_from_dict(d: dict):
    from .model import HyperParams

    d = dict(d)
    for k in ("enc_channels", "disc_channels"):
        if k in d:
            d[k] = tuple(d[k])
    return HyperParams(**d)


def pack(params, memory, hp, metadata: dict | None = None) -> Checkpoint:
    tensors = {f"net.{name}": t.data for name, t in params.named_tensors()}
    tensors["memory.F"] = memory.F.data
    tensors["memory.trainable"] = memory.trainable.astype(np.uint8)
    meta = dict(metadata or {})
    meta["steps"] = int(params.steps)
    for group in ("opt_g", "opt_d"):
        st = getattr(params, group)
        meta[f"{group}.t"] = st.t
        for name in sorted(st.m):
            tensors[f"{group}.m.{name}"] = st.m[name]
            tensors[f"{group}.v.{name}"] = st.v[name]
    return Checkpoint(hp_to_dict(hp), tensors, meta)


def unpack(ckpt: Checkpoint):
    """Rebuild ``(hp, params, memory)`` from a checkpoint."""
    from .model import MemoryBank, build_params

    hp = hp_from_dict(ckpt.config)
    params = build_params(hp, 0)
    for name, t in params.named_tensors():
        key = f"net.{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        arr = ckpt.tensors[key]
        if arr.shape != t.data.shape or arr.dtype != t.data.dtype:
            raise CheckpointError(f"tensor {key!r} has shape {arr.shape}/{arr.dtype}, expected "
                                  f"{t.data.shape}/{t.data.dtype}")
        t.data = arr.copy()
    params.steps = int(ckpt.metadata.get("steps", 0))
    for group in ("opt_g", "opt_d"):
        st = getattr(params, group)
        st.t = int(ckpt.metadata.get(f"{group}.t", 0))
        for key, arr in ckpt.tensors.items():
            for kind in ("m", "v"):
                prefix = f"{group}.{kind}."
                if key.startswith(prefix):
                    getattr(st, kind)[key[len(prefix):]] = arr.copy()
    memory = MemoryBank(ckpt.tensors["memory.F"].copy(), ckpt.tensors["memory.trainable"].astype(bool))
    return hp, params, memory
