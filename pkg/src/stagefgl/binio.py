"""Little-endian primitives shared by the MAG1/ANB1/SRV1/STG1 containers."""
from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, b: bytes):
        self._parts.append(bytes(b))

    def u8(self, x):
        self.raw(struct.pack("<B", int(x)))

    def u32(self, x):
        self.raw(struct.pack("<I", int(x)))

    def f32(self, x):
        self.raw(struct.pack("<f", float(x)))

    def f64(self, x):
        self.raw(struct.pack("<d", float(x)))

    def array(self, a, dtype):
        self.raw(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(bytes(buf))
        self.pos = 0

    def take(self, n: int, what="data") -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise ParseError(f"truncated buffer while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes):
        got = bytes(self.take(len(expected), "magic"))
        if got != expected:
            raise ParseError(f"bad magic {got!r}, expected {expected!r}", self.pos - len(expected))

    def u8(self, what="u8"):
        return struct.unpack("<B", self.take(1, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what="f32"):
        return struct.unpack("<f", self.take(4, what))[0]

    def f64(self, what="f64"):
        return struct.unpack("<d", self.take(8, what))[0]

    def array(self, count: int, dtype, what="array") -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(count * dt.itemsize, what)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))

    def text(self, what="text") -> str:
        n = self.u32(what + " length")
        return bytes(self.take(n, what)).decode("utf-8")

    def done(self):
        if self.pos != len(self.buf):
            raise ParseError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def encode_arrays(magic: bytes, arrays: dict, meta: str = "") -> bytes:
    """Named float64 arrays plus a free-form text field, in a tagged container."""
    w = Writer()
    w.raw(magic)
    w.u32(1)
    w.text(meta)
    w.u32(len(arrays))
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        w.text(name)
        w.u32(a.ndim)
        for s in a.shape:
            w.u32(s)
        w.array(a, "f8")
    return w.getvalue()


def decode_arrays(magic: bytes, buf: bytes):
    r = Reader(buf)
    r.magic(magic)
    if r.u32("version") != 1:
        raise ParseError("unsupported container version", 4)
    meta = r.text("meta")
    out = {}
    for _ in range(r.u32("entry count")):
        name = r.text("entry name")
        shape = tuple(r.u32("dim") for _ in range(r.u32("ndim")))
        out[name] = r.array(int(np.prod(shape)), "f8", name).reshape(shape)
    r.done()
    return out, meta
