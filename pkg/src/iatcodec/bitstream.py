"""Bit-exact bitstream container for coded images.

Big-endian layout:

    magic "IATB" (4) | version u8 = 1 | flags u8 (bit0: uniform quality)
    | width u16 | height u16 | model-hash u64
    | quality field (uniform: one u8 level; else height*width u8 levels)
    | z-length u32 | y-length u32 | z payload | y payload

Width/height are the original image dimensions; any transform padding is
re-derived on decode. parse(serialize(...)) is the identity, and every
malformed input is rejected with a structured error.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .iat import QualityLevel

MAGIC = b"IATB"
VERSION = 1
FLAG_UNIFORM = 0x01
FILE_EXTENSION = ".iatb"

_FIXED = struct.Struct(">4sBBHHQ")
_LENGTHS = struct.Struct(">II")


class BitstreamError(ValueError):
    """Malformed or inconsistent bitstream."""


@dataclass
class Header:
    width: int
    height: int
    model_hash: int
    qlevel: QualityLevel

    def __post_init__(self):
        if not (1 <= self.width <= 0xFFFF and 1 <= self.height <= 0xFFFF):
            raise BitstreamError(f"dimensions {self.width}x{self.height} out of range")
        if not 0 <= self.model_hash < 1 << 64:
            raise BitstreamError("model hash out of range")
        if self.qlevel.shape != (self.height, self.width):
            raise BitstreamError(
                f"quality map shape {self.qlevel.shape} does not match {self.height}x{self.width}")


def serialize(header: Header, z_payload: bytes, y_payload: bytes) -> bytes:
    flags = FLAG_UNIFORM if header.qlevel.uniform else 0
    out = bytearray()
    out += _FIXED.pack(MAGIC, VERSION, flags, header.width, header.height, header.model_hash)
    levels = header.qlevel.levels()
    if header.qlevel.uniform:
        out.append(int(levels.flat[0]))
    else:
        out += levels.tobytes()
    out += _LENGTHS.pack(len(z_payload), len(y_payload))
    out += z_payload
    out += y_payload
    return bytes(out)


def parse(data: bytes) -> tuple[Header, bytes, bytes]:
    if len(data) < _FIXED.size:
        raise BitstreamError("truncated header")
    magic, version, flags, width, height, model_hash = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if flags & ~FLAG_UNIFORM:
        raise BitstreamError(f"unknown flag bits 0x{flags:02x}")
    if width == 0 or height == 0:
        raise BitstreamError("zero image dimension")
    pos = _FIXED.size
    if flags & FLAG_UNIFORM:
        if len(data) < pos + 1:
            raise BitstreamError("truncated quality field")
        level = data[pos]
        pos += 1
        qlevel = QualityLevel.from_levels(np.full((height, width), level, dtype=np.uint8))
    else:
        n = height * width
        if len(data) < pos + n:
            raise BitstreamError("truncated quality map")
        levels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(height, width)
        pos += n
        qlevel = QualityLevel.from_levels(levels.copy())
    if len(data) < pos + _LENGTHS.size:
        raise BitstreamError("truncated payload lengths")
    z_len, y_len = _LENGTHS.unpack_from(data, pos)
    pos += _LENGTHS.size
    if len(data) != pos + z_len + y_len:
        raise BitstreamError(
            f"payload length mismatch: header says {z_len}+{y_len}, "
            f"{len(data) - pos} bytes present")
    z_payload = data[pos : pos + z_len]
    y_payload = data[pos + z_len :]
    return Header(width, height, model_hash, qlevel), z_payload, y_payload
