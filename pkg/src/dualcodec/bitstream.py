"""Bit-exact token streams and bitrate accounting.

Layout (all multi-byte integers little-endian)::

    offset 0   4 bytes  magic "DCS1"
    offset 4   u8       version
    offset 5   u32      frame rate in milli-Hz
    offset 9   u8       number of layers L
    offset 10  L x u32  codebook size per layer
    ...        u32      frame count T
    payload             ceil(log2 K_l) bits per token, MSB first,
                        layer-major then frame-major, zero-padded to a byte
"""

from __future__ import annotations

import math
import struct
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .quantizer import TokenMatrix

STREAM_MAGIC = b"DCS1"
STREAM_VERSION = 1


class StreamFormatError(ValueError):
    """Corrupt or truncated token stream."""


def bits_per_token(codebook_size: int) -> int:
    if codebook_size < 2:
        raise ValueError(f"codebook size must be >= 2, got {codebook_size}")
    return math.ceil(math.log2(codebook_size))


def bitrate_bps(frame_rate: float, layer_sizes: Sequence[int]) -> float:
    return frame_rate * sum(bits_per_token(k) for k in layer_sizes)


def tokens_per_second(frame_rate: float, n_layers: int) -> float:
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    return frame_rate * n_layers


def kbps_2dp(bps: float) -> Decimal:
    """Bitrate in kbps rounded half-up to two decimals (how tables print it)."""
    return (Decimal(repr(bps)) / 1000).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def header_size(n_layers: int) -> int:
    return 4 + 1 + 4 + 1 + 4 * n_layers + 4


def serialize(tokens: TokenMatrix) -> bytes:
    codes = tokens.codes
    n_layers, n_frames = codes.shape
    if n_layers > 255:
        raise ValueError("at most 255 layers fit in the header")
    header = bytearray(STREAM_MAGIC)
    header += struct.pack("<BIB", STREAM_VERSION, int(round(tokens.frame_rate * 1000)), n_layers)
    header += struct.pack(f"<{n_layers}I", *tokens.layer_sizes)
    header += struct.pack("<I", n_frames)
    chunks = []
    for layer, k in enumerate(tokens.layer_sizes):
        row = codes[layer]
        if row.size and (row.min() < 0 or row.max() >= k):
            bad = int(np.flatnonzero((row < 0) | (row >= k))[0])
            raise ValueError(f"code {row[bad]} out of range [0, {k}) at layer {layer}, frame {bad}")
        width = bits_per_token(k)
        shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
        chunks.append(((row[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1))
    bits = np.concatenate(chunks) if chunks else np.zeros(0, np.uint8)
    return bytes(header) + np.packbits(bits).tobytes()


def deserialize(blob: bytes) -> TokenMatrix:
    if len(blob) < 10:
        raise StreamFormatError(f"stream truncated: {len(blob)} bytes, header needs at least 10")
    if blob[:4] != STREAM_MAGIC:
        raise StreamFormatError(f"bad magic {bytes(blob[:4])!r} at offset 0, expected {STREAM_MAGIC!r}")
    version, milli, n_layers = struct.unpack_from("<BIB", blob, 4)
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version} at offset 4")
    if n_layers == 0:
        raise StreamFormatError("zero layers declared at offset 9")
    hsize = header_size(n_layers)
    if len(blob) < hsize:
        raise StreamFormatError(f"header truncated: need {hsize} bytes, have {len(blob)}")
    sizes = list(struct.unpack_from(f"<{n_layers}I", blob, 10))
    for i, k in enumerate(sizes):
        if k < 2:
            raise StreamFormatError(f"codebook size {k} < 2 for layer {i} at offset {10 + 4 * i}")
    (n_frames,) = struct.unpack_from("<I", blob, 10 + 4 * n_layers)
    widths = [bits_per_token(k) for k in sizes]
    n_bits = n_frames * sum(widths)
    need = hsize + (n_bits + 7) // 8
    if len(blob) != need:
        what = "truncated" if len(blob) < need else "has trailing bytes"
        raise StreamFormatError(f"payload {what}: expected {need} bytes in total, got {len(blob)} "
                                f"(payload starts at offset {hsize})")
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=hsize))
    codes = np.zeros((n_layers, n_frames), dtype=np.int64)
    pos = 0
    for layer, (k, width) in enumerate(zip(sizes, widths)):
        chunk = bits[pos : pos + n_frames * width].reshape(n_frames, width).astype(np.int64)
        codes[layer] = chunk @ (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
        bad = np.flatnonzero(codes[layer] >= k)
        if len(bad):
            bit = pos + int(bad[0]) * width
            raise StreamFormatError(f"code {codes[layer, bad[0]]} >= {k} at layer {layer}, frame {bad[0]} "
                                    f"(byte offset {hsize + bit // 8}, bit {bit % 8})")
        pos += n_frames * width
    if np.any(bits[pos:]):
        raise StreamFormatError(f"nonzero padding bits after bit {pos} of the payload")
    return TokenMatrix(codes, sizes, milli / 1000.0)


def payload_bits(tokens: TokenMatrix) -> int:
    return tokens.frames * sum(bits_per_token(k) for k in tokens.layer_sizes)
