"""Binary model checkpoints.

Layout (all integers little-endian):

    magic  b"SGDM"
    u32    format version (currently 1)
    u32    T, then T float64 schedule betas
    u32    summary length, then that many bytes of JSON (net sizes plus a
           free-form training summary)
    u32    tensor count
    per tensor, sorted by name:
        u16 name length, name bytes (utf-8)
        u8  rank, u32 dims...
        float32 values, C order

Tensors are stored exactly as held in memory, so a save/load round trip is
bit-identical. The reader validates as it goes and every failure reports
the byte offset where the file first stopped making sense; nothing is
returned from a file that did not parse to the end.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields

import numpy as np

from ..model import NetConfig, Sgdm
from ..schedule import NoiseSchedule
from ..tensor import Tensor

MAGIC = b"SGDM"
VERSION = 1
_MAX_RANK = 8


class CheckpointError(ValueError):
    """A checkpoint file violated the format; offset locates the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def save_checkpoint(model: Sgdm, sched: NoiseSchedule, path,
                    summary: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    beta = np.ascontiguousarray(sched.beta, dtype="<f8")
    parts.append(struct.pack("<I", sched.T))
    parts.append(beta.tobytes())
    blob = json.dumps({"net": asdict(model.cfg), "train": summary or {}},
                      sort_keys=True).encode()
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    names = sorted(model.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        data = model.params[name].data
        if data.dtype != np.float32:
            raise ValueError(f"tensor {name} is {data.dtype}; checkpoints "
                             "store float32")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> tuple[Sgdm, NoiseSchedule]:
    with open(path, "rb") as f:
        r = _Reader(f.read())

    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)

    T = r.u32("schedule length")
    if T < 1:
        raise CheckpointError("schedule length must be positive", r.pos - 4)
    beta = np.frombuffer(r.take(8 * T, "schedule betas"), dtype="<f8").copy()
    alpha = 1.0 - beta
    sched = NoiseSchedule(T=T, beta=beta, alpha=alpha,
                          alpha_bar=np.cumprod(alpha))

    blob_at = r.pos
    blob = r.take(r.u32("summary length"), "summary")
    try:
        meta = json.loads(blob.decode())
        net = {f.name: meta["net"][f.name] for f in fields(NetConfig)}
        cfg = NetConfig(**net)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"bad summary block: {e}", blob_at) from None

    params: dict[str, Tensor] = {}
    count_at = r.pos
    n_tensors = r.u32("tensor count")
    for k in range(n_tensors):
        name_at = r.pos
        name = r.take(r.u16("tensor name length"), "tensor name")
        try:
            name = name.decode()
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not utf-8",
                                  name_at) from None
        if name in params:
            raise CheckpointError(f"duplicate tensor {name!r}", name_at)
        rank_at = r.pos
        rank = r.u8("tensor rank")
        if rank > _MAX_RANK:
            raise CheckpointError(f"tensor rank {rank} exceeds {_MAX_RANK}",
                                  rank_at)
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor shape"))
        n = 1
        for d in shape:
            n *= d
        raw = r.take(4 * n, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(arr)
    if n_tensors == 0:
        raise CheckpointError("checkpoint holds no tensors", count_at)
    if r.pos != len(r.buf):
        raise CheckpointError(
            f"{len(r.buf) - r.pos} trailing bytes after tensor table", r.pos)
    return Sgdm(cfg, params), sched
