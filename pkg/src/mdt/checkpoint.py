"""Binary checkpoint container.

Layout (header integers big-endian, tensor payloads little-endian)::

    b"MDTCKPT1"
    u16 fingerprint length, fingerprint bytes (ascii)
    u64 step
    3 tensor sections (params, optimizer buffers, ema), each:
        u32 count, then per tensor:
        u16 name length, name (utf-8), u8 dtype tag, u8 rank, u32 extents..., raw values
    u32 metadata length, metadata (utf-8 JSON: optimizer kind/count, rng and data states, config)
    u64 checksum: blake2b-64 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .training import OptState, TrainState

MAGIC = b"MDTCKPT1"
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1")}
TAG_OF = {np.dtype(v).str: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """The file is not a valid checkpoint (bad magic, truncation or checksum)."""


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack(">I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = TAG_OF.get(le.dtype.str)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode()
        parts.append(struct.pack(">H", len(raw)) + raw)
        parts.append(struct.pack(">BB", tag, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(le).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError(f"truncated while reading {what} at byte {self.pos}: need {n}, have {self.end - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, section: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack(">I", f"{section} count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack(">H", "name length")
            name = self.take(nlen, "name").decode()
            tag, rank = self.unpack(">BB", f"header of {name!r}")
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag} for {name!r} at byte {self.pos - 2}")
            shape = self.unpack(f">{rank}I", f"extents of {name!r}")
            dt = DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(self.take(nbytes, f"payload of {name!r}"), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="))
        return out


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    params: dict[str, np.ndarray]
    opt_buffers: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    meta: dict


def encode(ck: Checkpoint) -> bytes:
    fp = ck.fingerprint.encode("ascii")
    body = [MAGIC, struct.pack(">H", len(fp)), fp, struct.pack(">Q", ck.step)]
    body += [_pack_tensors(ck.params), _pack_tensors(ck.opt_buffers), _pack_tensors(ck.ema)]
    meta = json.dumps(ck.meta, sort_keys=True, separators=(",", ":")).encode()
    body += [struct.pack(">I", len(meta)), meta]
    blob = b"".join(body)
    return blob + struct.pack(">Q", checksum(blob))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError(f"file too short ({len(buf)} bytes)")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes at offset 0")
    (stored,) = struct.unpack(">Q", buf[-8:])
    if checksum(buf[:-8]) != stored:
        raise CheckpointError("checksum mismatch")
    r = _Reader(buf, len(buf) - 8)
    r.pos = len(MAGIC)
    (fplen,) = r.unpack(">H", "fingerprint length")
    fp = r.take(fplen, "fingerprint").decode("ascii")
    (step,) = r.unpack(">Q", "step")
    params = r.tensors("params")
    opt = r.tensors("optimizer")
    ema = r.tensors("ema")
    (mlen,) = r.unpack(">I", "metadata length")
    meta = json.loads(r.take(mlen, "metadata").decode())
    if r.pos != r.end:
        raise CheckpointError(f"{r.end - r.pos} unexpected trailing bytes at offset {r.pos}")
    return Checkpoint(fp, step, params, opt, ema, meta)


def atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def from_state(state: TrainState, fingerprint: str, extra: dict | None = None) -> Checkpoint:
    opt = {f"{buf}/{k}": v for buf, tree in state.opt.buffers.items() for k, v in tree.items()}
    meta = {
        "opt_kind": state.opt.kind,
        "opt_count": state.opt.count,
        "rng": {k: nx.rng_state(g) for k, g in sorted(state.rngs.items())},
        "data": state.data_state,
    }
    meta.update(extra or {})
    return Checkpoint(fingerprint, state.step, {k: p.data for k, p in state.params.items()}, opt, dict(state.ema), meta)


def to_state(ck: Checkpoint) -> TrainState:
    params = {k: nx.parameter(np.array(v), name=k) for k, v in ck.params.items()}
    buffers: dict[str, dict] = {}
    for key, v in ck.opt_buffers.items():
        buf, _, name = key.partition("/")
        buffers.setdefault(buf, {})[name] = np.array(v)
    opt = OptState(ck.meta["opt_kind"], int(ck.meta["opt_count"]), buffers)
    rngs = {}
    for k, st in ck.meta["rng"].items():
        g = nx.make_rng(0, k)
        nx.set_rng_state(g, st)
        rngs[k] = g
    return TrainState(ck.step, params, opt, {k: np.array(v) for k, v in ck.ema.items()}, rngs, ck.meta.get("data"))


def save(path: str, state: TrainState, fingerprint: str, extra: dict | None = None) -> None:
    atomic_write(path, encode(from_state(state, fingerprint, extra)))


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
