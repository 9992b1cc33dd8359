"""Little-endian binary helpers shared by the checkpoint ("AHDR") and
perceptual-extractor ("AHPX") file formats.

Both formats store named float32 arrays as repeated records:
u32 name length, utf-8 name, u32 rank, rank x u32 extents, float32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class ByteReader:
    """Cursor over bytes; every read is bounds-checked and failures carry
    the byte offset."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def expect(self, magic: bytes, what: str) -> None:
        got = self.take(len(magic), what)
        if got != magic:
            raise FormatError(f"bad {what}: expected {magic!r}, got {got!r}",
                              offset=self.pos - len(magic))

    def done(self) -> bool:
        return self.pos == len(self.data)


def pack_named_arrays(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray()
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def unpack_named_arrays(reader: ByteReader) -> list[tuple[str, np.ndarray]]:
    count = reader.u32("array count")
    arrays: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        name_len = reader.u32("name length")
        if name_len > 4096:
            raise FormatError(f"implausible name length {name_len}", offset=reader.pos - 4)
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid utf-8", offset=reader.pos - name_len) from None
        rank = reader.u32("rank")
        if rank > 8:
            raise FormatError(f"implausible rank {rank}", offset=reader.pos - 4)
        shape = tuple(reader.u32("extent") for _ in range(rank))
        size = 1
        for extent in shape:
            if extent == 0 or size * extent > (1 << 28):
                raise FormatError(f"implausible shape {shape}", offset=reader.pos)
            size *= extent
        payload = reader.take(size * 4, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        arrays.append((name, arr))
    return arrays
