"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LPNX" | u32 version | u32 spec_len | spec JSON (UTF-8) | u32 epoch
    | u32 n_tensors | n_tensors x record

    record = u32 name_len | name (UTF-8) | u8 dtype tag | u8 rank
             | rank x u32 dims | payload (little-endian, C order)

Optimizer state is stored as ordinary tensors under ``opt/`` names.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..linalg import TOL_RETRACTED, OrthogonalParam, orthogonality_drift
from ..model import LipNeXt, ModelSpec

MAGIC = b"LPNX"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("<u1")}
TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict
    epoch: int = 0
    version: int = VERSION
    optimizer: dict = field(default_factory=dict)


def model_tensors(model: LipNeXt) -> dict:
    out = {}
    for name in model.parameter_names(trainable=False):
        val = model.get(name)
        out[name] = val.value if isinstance(val, OrthogonalParam) else val
    return out


def model_from_tensors(spec: ModelSpec, tensors: dict) -> LipNeXt:
    model = LipNeXt.init(spec, 0)
    for name in model.parameter_names(trainable=False):
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        cur = model.get(name)
        arr = tensors[name]
        expected = cur.value.shape if isinstance(cur, OrthogonalParam) else cur.shape
        if arr.shape != expected:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {expected}")
        model.set(name, OrthogonalParam(arr) if isinstance(cur, OrthogonalParam) else arr.astype(np.float64))
    return model


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in TAG_OF:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    nb = name.encode("utf-8")
    head = struct.pack(f"<I{len(nb)}sBB{arr.ndim}I", len(nb), nb, TAG_OF[dt], arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    spec = ckpt.spec.to_json().encode("utf-8")
    tensors = dict(ckpt.tensors)
    for key, arr in ckpt.optimizer.items():
        tensors[f"opt/{key}"] = arr
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(spec)), spec, struct.pack("<II", ckpt.epoch, len(tensors))]
    for name in tensors:  # insertion order, deterministic
        parts.append(_encode_tensor(name, tensors[name]))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint reading {what} at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw: bytes, orth_tol: float = TOL_RETRACTED) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (spec_len,) = r.unpack("<I", "spec length")
    try:
        spec = ModelSpec.from_json(r.take(spec_len, "model spec").decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid model spec block: {exc}") from exc
    epoch, count = r.unpack("<II", "tensor count")
    tensors, opt = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"header of {name!r}")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        dt = DTYPE_TAGS[tag]
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} has non-finite entries")
        if name.startswith("opt/"):
            opt[name[4:]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    for name, arr in tensors.items():
        if name.endswith((".R", ".M")):
            drift = orthogonality_drift(arr)
            if drift > orth_tol:
                raise CheckpointError(f"tensor {name!r} is not orthogonal: drift {drift:.3e} > {orth_tol:.1e}")
    return Checkpoint(spec, tensors, epoch, version, opt)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path, orth_tol: float = TOL_RETRACTED) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), orth_tol)


def save_model(path, model: LipNeXt, epoch: int = 0, optimizer: dict | None = None) -> None:
    save_checkpoint(path, Checkpoint(model.spec, model_tensors(model), epoch, optimizer=optimizer or {}))


def load_model(path, orth_tol: float = TOL_RETRACTED) -> tuple[LipNeXt, Checkpoint]:
    ckpt = load_checkpoint(path, orth_tol)
    return model_from_tensors(ckpt.spec, ckpt.tensors), ckpt
