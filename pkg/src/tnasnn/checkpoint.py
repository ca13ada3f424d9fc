"""Binary checkpoint format with 2-bit packed ternary layers.

Layout (all integers little-endian)::

    magic        8 bytes  b"TNASNNCK"
    version      u16
    digest       32 bytes  sha256 of the config snapshot
    epoch        u32
    meta         u32 length + UTF-8 JSON (sorted keys)
    entries      u32 count, then per entry:
                   u16 name length, name, u8 dtype tag, u8 ndim, u32 dims...,
                   u64 payload length, payload
    optimizer    u8 flag; if 1: u32 step count, f64 lr, u32 count + entries

dtype tag 0 is float32 (IEEE-754 little-endian); tag 1 is ternary2bit, four
weights per byte, lowest bits first, codes 00=0, 01=+1, 10=-1 (11 reserved).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import snn
from .errors import ConfigurationError, FormatError
from .tensor import Tensor

MAGIC = b"TNASNNCK"
VERSION = 1
F32 = 0
TERNARY2BIT = 1
DTYPE_NAMES = {F32: "f32", TERNARY2BIT: "ternary2bit"}


def pack_ternary(values: np.ndarray) -> bytes:
    flat = np.asarray(values).reshape(-1)
    if not np.all(np.isin(flat, (-1, 0, 1))):
        raise ValueError("ternary packing needs values in {-1, 0, +1}")
    codes = np.zeros(flat.size + (-flat.size) % 4, dtype=np.uint8)
    codes[:flat.size][flat == 1] = 1
    codes[:flat.size][flat == -1] = 2
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_ternary(payload: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size != (count + 3) // 4:
        raise FormatError(f"ternary payload has {raw.size} bytes, {count} weights need {(count + 3) // 4}")
    codes = np.stack([(raw >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    if np.any(codes == 3):
        raise FormatError("ternary payload uses the reserved code 11")
    out = np.zeros(count, dtype=np.float32)
    out[codes == 1] = 1.0
    out[codes == 2] = -1.0
    return out


@dataclass
class Entry:
    name: str
    shape: tuple[int, ...]
    dtype: int
    payload: bytes

    @classmethod
    def f32(cls, name: str, array) -> "Entry":
        array = np.asarray(array, dtype="<f4")
        return cls(name, tuple(array.shape), F32, array.tobytes())

    @classmethod
    def ternary(cls, name: str, array) -> "Entry":
        array = np.asarray(array)
        return cls(name, tuple(array.shape), TERNARY2BIT, pack_ternary(array))

    def array(self) -> np.ndarray:
        count = int(np.prod(self.shape)) if self.shape else 1
        if self.dtype == F32:
            if len(self.payload) != 4 * count:
                raise FormatError(f"{self.name}: f32 payload has {len(self.payload)} bytes, expected {4 * count}")
            return np.frombuffer(self.payload, dtype="<f4").astype(np.float32).reshape(self.shape)
        return unpack_ternary(self.payload, count).reshape(self.shape)


@dataclass
class Checkpoint:
    digest: bytes
    epoch: int
    meta: dict
    entries: list[Entry]
    optimizer: dict | None = None
    version: int = VERSION

    def entry(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def layer_dtypes(self) -> dict[str, str]:
        return {e.name: DTYPE_NAMES[e.dtype] for e in self.entries}


def _write_entries(buf, entries) -> None:
    buf.write(struct.pack("<I", len(entries)))
    for e in entries:
        name = e.name.encode()
        buf.write(struct.pack("<H", len(name)) + name)
        buf.write(struct.pack("<BB", e.dtype, len(e.shape)))
        buf.write(struct.pack(f"<{len(e.shape)}I", *e.shape))
        buf.write(struct.pack("<Q", len(e.payload)))
        buf.write(e.payload)


def to_bytes(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", ck.version))
    if len(ck.digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    buf.write(ck.digest)
    buf.write(struct.pack("<I", ck.epoch))
    meta = json.dumps(ck.meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)) + meta)
    _write_entries(buf, ck.entries)
    if ck.optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Id", ck.optimizer["step_count"], ck.optimizer["lr"]))
        _write_entries(buf, ck.optimizer["entries"])
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entries(self) -> list[Entry]:
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            dtype, ndim = self.unpack("<BB")
            if dtype not in DTYPE_NAMES:
                raise FormatError(f"{name}: unknown dtype tag {dtype}")
            shape = self.unpack(f"<{ndim}I")
            (size,) = self.unpack("<Q")
            entry = Entry(name, tuple(shape), dtype, self.take(size))
            count_ = int(np.prod(shape)) if shape else 1
            expected = 4 * count_ if dtype == F32 else (count_ + 3) // 4
            if size != expected:
                raise FormatError(f"{name}: payload has {size} bytes, shape {shape} needs {expected}")
            out.append(entry)
        return out


def from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint: magic {magic!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    digest = r.take(32)
    (epoch,) = r.unpack("<I")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from None
    entries = r.entries()
    (flag,) = r.unpack("<B")
    optimizer = None
    if flag == 1:
        step_count, lr = r.unpack("<Id")
        optimizer = {"step_count": step_count, "lr": lr, "entries": r.entries()}
    elif flag != 0:
        raise FormatError(f"bad optimizer flag {flag}")
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(digest, epoch, meta, entries, optimizer, version)


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def network_meta(spec: snn.NetworkSpec, cfg=None, compression=None) -> dict:
    lif = next((l.lif for l in spec.layers if l.kind == snn.LIF), snn.LifParams())
    dropout = next((l.p for l in spec.layers if l.kind == snn.DROPOUT), 0.0)
    meta = {
        "arch": spec.arch,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "timesteps": spec.timesteps,
        "dropout_p": dropout,
        "lif": {"alpha": lif.alpha, "theta": lif.theta, "surrogate_width": lif.surrogate_width},
        "network": "base",
        "compression": None,
    }
    if cfg is not None:
        meta["dataset"] = cfg.dataset
        meta["mode"] = cfg.mode
    if compression is not None and compression.active:
        meta["compression"] = {"mode": compression.policy.mode, "delta": compression.policy.delta,
                               "start_epoch": compression.start_epoch}
    return meta


def export_network(spec: snn.NetworkSpec, params: dict[str, Tensor], compression=None, cfg=None,
                   epoch: int = 0, optimizer=None) -> Checkpoint:
    """Package one network for inference; compressed layers are stored as deployed ternary values."""
    views = compression.views if compression is not None and compression.active else {}
    entries = []
    for name in spec.param_shapes():
        if name in views:
            entries.append(Entry.ternary(name, views[name].deployed))
        else:
            entries.append(Entry.f32(name, params[name].data))
    opt = None
    if optimizer is not None:
        opt_entries = []
        for name in spec.param_shapes():
            if name in optimizer.first_moment:
                opt_entries.append(Entry.f32("m/" + name, optimizer.first_moment[name]))
                opt_entries.append(Entry.f32("v/" + name, optimizer.second_moment[name]))
        opt = {"step_count": optimizer.step_count, "lr": float(optimizer.lr), "entries": opt_entries}
    digest = cfg.digest() if cfg is not None else bytes(32)
    return Checkpoint(digest, int(epoch), network_meta(spec, cfg, compression), entries, opt)


def spec_from_meta(meta: dict) -> snn.NetworkSpec:
    try:
        lif = snn.LifParams(**meta["lif"])
        return snn.parse_architecture(meta["arch"], tuple(meta["input_shape"]), meta["num_classes"],
                                      timesteps=meta["timesteps"], dropout_p=meta["dropout_p"], lif=lif)
    except KeyError as exc:
        raise FormatError(f"checkpoint metadata lacks {exc}") from None


def load_network(path_or_ckpt) -> tuple[snn.NetworkSpec, dict[str, Tensor]]:
    ck = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    spec = spec_from_meta(ck.meta)
    params = {e.name: Tensor(e.array()) for e in ck.entries}
    expected = spec.param_shapes()
    if set(params) != set(expected):
        raise ConfigurationError(f"checkpoint layers {sorted(params)} do not match architecture "
                                 f"{spec.arch!r} ({sorted(expected)})")
    snn.check_params(spec, params)
    return spec, params
