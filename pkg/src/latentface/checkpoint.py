"""Binary named-tensor container used for checkpoints and latent packs.

Layout (all integers little-endian):

    b"LFCK" | version u32 | meta_len u64 | meta (UTF-8 JSON)
    | n_tensors u32
    | per tensor: name_len u32, name, rank u32, dims u64 * rank, nbytes u64, f32 data
    | crc32 u32 over everything before it
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError, DataError, VersionMismatchError

MAGIC = b"LFCK"
FORMAT_VERSION = 1


def _as_f32(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.array(t, dtype="<f4", order="C", copy=True)


def dumps(tensors: dict, meta: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = _as_f32(value)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        parts.append(struct.pack("<Q", len(data)))
        parts.append(data)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes, expected_arch: str | None = None) -> tuple[dict, dict]:
    if len(blob) < 4 + 12 + 4 + 4 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not a tensor container (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("checksum mismatch")
    version, meta_len = struct.unpack_from("<IQ", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container format {version}, expected {FORMAT_VERSION}")
    pos = 16
    try:
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            arr = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
            pos += nbytes
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed container: {exc}") from exc
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after tensor directory")
    if expected_arch is not None and meta.get("arch") != expected_arch:
        raise VersionMismatchError(f"architecture {meta.get('arch')!r}, expected {expected_arch!r}")
    return tensors, meta


def save_checkpoint(tensors: dict, meta: dict, path) -> bytes:
    blob = dumps(tensors, meta)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return blob


def load_checkpoint(path, expected_arch: str | None = None) -> tuple[dict, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return loads(blob, expected_arch)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str = "") -> torch.nn.Module:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    own = module.state_dict()
    missing = set(own) - set(state)
    if missing:
        raise VersionMismatchError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for k, v in state.items():
        if k in own and tuple(own[k].shape) != tuple(v.shape):
            raise VersionMismatchError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items() if k in own})
    return module
