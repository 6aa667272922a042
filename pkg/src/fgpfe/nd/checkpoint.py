"""Binary parameter checkpoints: (name, shape) headers + float64 payloads.

Layout, all little-endian:

    magic   8 bytes  b"FGPFCKPT"
    version u32      1
    count   u32      number of parameters
    per parameter:
        name_len u16, name utf-8 bytes
        ndim     u8,  dims u32 * ndim
        payload  float64 * prod(dims), row-major

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from fgpfe.nd.tensor import Parameter

MAGIC = b"FGPFCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(params: Sequence[Parameter], path) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for p in params:
        name_bytes = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
            offset += 8 * n
            out[name] = data.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def restore_parameters(params: Sequence[Parameter], state: dict[str, np.ndarray]) -> None:
    """Load values into named parameters; names and shapes must match exactly."""
    by_name = {p.name: p for p in params}
    missing = set(by_name) - set(state)
    extra = set(state) - set(by_name)
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, value in state.items():
        p = by_name[name]
        if value.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {value.shape} vs model {p.data.shape}"
            )
        p.data = value.copy()
