"""Portable named-tensor container.

Byte layout, all integers little-endian::

    magic       4 bytes  b"C4RF"
    version     u32      1
    count       u32      number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8       0=fp32, 1=int16, 2=fp64
        ndim     u8, dims ndim x u32
        scale    f32      only when dtype is int16
        payload  row-major, numel * itemsize bytes
    meta_len    u32, then UTF-8 ``key=value`` lines
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"C4RF"
VERSION = 1

DTYPES = {0: ("fp32", np.dtype("<f4")), 1: ("int16", np.dtype("<i2")), 2: ("fp64", np.dtype("<f8"))}
DTYPE_CODES = {name: (code, dt) for code, (name, dt) in DTYPES.items()}


class ContainerError(ValueError):
    """Malformed container bytes; ``offset`` is where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MagicMismatchError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncationError(ContainerError):
    pass


@dataclass
class TensorEntry:
    name: str
    dtype: str
    data: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE_CODES[self.dtype][1])
        if self.dtype == "int16":
            if self.scale is None or not np.isfinite(self.scale) or self.scale <= 0:
                raise ValueError(f"int16 tensor {self.name} needs one positive finite scale")
            self.scale = float(np.float32(self.scale))
        elif self.scale is not None:
            raise ValueError(f"tensor {self.name}: scale is only allowed on int16 tensors")

    def dequantize(self) -> np.ndarray:
        if self.dtype == "int16":
            return self.data.astype(np.float64) * self.scale
        return self.data.astype(np.float64)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


@dataclass
class ModelContainer:
    tensors: dict[str, TensorEntry] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    def add(self, name: str, data, dtype: str = "fp32", scale: float | None = None) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.tensors[name] = TensorEntry(name, dtype, np.asarray(data), scale)

    def names(self) -> list[str]:
        return list(self.tensors)

    def payload_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<II", self.version, len(self.tensors))
        for t in self.tensors.values():
            name = t.name.encode("utf-8")
            code, _ = DTYPE_CODES[t.dtype]
            out += struct.pack("<H", len(name)) + name
            out += struct.pack("<BB", code, t.data.ndim)
            out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
            if t.dtype == "int16":
                out += struct.pack("<f", t.scale)
            out += t.data.tobytes()
        meta = "".join(f"{k}={v}\n" for k, v in self.metadata.items()).encode("utf-8")
        out += struct.pack("<I", len(meta)) + meta
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelContainer":
        r = _Reader(raw)
        if r.take(4, "magic") != MAGIC:
            raise MagicMismatchError("magic mismatch, not a model container", 0)
        version_at = r.pos
        version = r.unpack("<I", "version")[0]
        if version != VERSION:
            raise VersionError(f"unsupported container version {version}", version_at)
        count = r.unpack("<I", "tensor count")[0]
        c = cls(version=version)
        for i in range(count):
            start = r.pos
            (name_len,) = r.unpack("<H", f"tensor #{i} name length")
            name = r.take(name_len, f"tensor #{i} name").decode("utf-8")
            code, ndim = r.unpack("<BB", f"tensor {name!r} header")
            if code not in DTYPES:
                raise ContainerError(f"tensor {name!r}: unknown dtype code {code}", r.pos - 2)
            dtype, np_dtype = DTYPES[code]
            dims = r.unpack(f"<{ndim}I", f"tensor {name!r} dims")
            scale = r.unpack("<f", f"tensor {name!r} scale")[0] if dtype == "int16" else None
            nbytes = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
            payload = r.take(nbytes, f"tensor {name!r} payload")
            data = np.frombuffer(payload, dtype=np_dtype).reshape(dims).copy()
            if name in c.tensors:
                raise ContainerError(f"duplicate tensor name {name!r}", start)
            try:
                c.tensors[name] = TensorEntry(name, dtype, data, scale)
            except ValueError as exc:
                raise ContainerError(str(exc), start) from None
        (meta_len,) = r.unpack("<I", "metadata length")
        meta_at = r.pos
        text = r.take(meta_len, "metadata").decode("utf-8")
        for line in text.splitlines():
            if not line:
                continue
            if "=" not in line:
                raise ContainerError(f"bad metadata line {line!r}", meta_at)
            k, v = line.split("=", 1)
            c.metadata[k] = v
        if r.pos != len(raw):
            raise ContainerError(f"{len(raw) - r.pos} trailing bytes", r.pos)
        return c

    def equals(self, other: "ModelContainer") -> bool:
        """Field-for-field equality with bitwise tensor comparison."""
        if self.version != other.version or self.metadata != other.metadata:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if (a.dtype, a.scale, a.data.shape) != (b.dtype, b.scale, b.data.shape):
                return False
            if a.data.tobytes() != b.data.tobytes():
                return False
        return True


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncationError(f"truncated while reading {what}", self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_container(c: ModelContainer, path) -> int:
    raw = c.to_bytes()
    try:
        Path(path).write_bytes(raw)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from None
    return len(raw)


def load_container(path) -> ModelContainer:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from None
    return ModelContainer.from_bytes(raw)
