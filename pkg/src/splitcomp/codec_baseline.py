"""Conventional-codec baseline for feature compression.

Feature maps are grouped into 3-channel tiles, min-max normalized to byte
range, transformed with an 8x8 block DCT, quantized by a quality-scaled
table, and packed with DEFLATE. The container is self-describing:
[magic "SCFC"][C,H,W: u16][quality: u8][per-tile min,max: f32][DEFLATE][CRC32].
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .coder import CorruptStreamError
from .layers import ConfigError

MAGIC = b"SCFC"
BLOCK = 8

# standard luminance quantization table used as the quality-50 reference
_BASE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class TilePlan:
    """Inverse-mapping constants for a tiled feature map."""

    shape: tuple[int, int, int]  # C, H, W of the source
    n_tiles: int
    pad: int  # zero channels appended to fill the last tile
    mins: list[float]
    maxs: list[float]

    def __post_init__(self):
        c = self.shape[0]
        if self.n_tiles * 3 - self.pad != c:
            raise ConfigError(f"tile plan inconsistent: {self.n_tiles}*3-{self.pad} != {c}")
        if not all(np.isfinite(self.mins)) or not all(np.isfinite(self.maxs)):
            raise ConfigError("normalization constants must be finite")


def quant_table(quality: int) -> np.ndarray:
    """Quality-scaled 8x8 quantization table; quality 100 is near-lossless."""
    if not 1 <= quality <= 100:
        raise ConfigError(f"quality must be in [1, 100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((_BASE_TABLE * s + 50.0) / 100.0), 1.0, 255.0)


def tile_features(f: np.ndarray) -> tuple[list[np.ndarray], TilePlan]:
    """Group channels in threes and min-max normalize each tile to [0, 255]."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 1:
        raise ConfigError(f"expected a C x H x W feature map, got shape {f.shape}")
    c, h, w = f.shape
    n_tiles = -(-c // 3)
    pad = n_tiles * 3 - c
    padded = np.concatenate([f, np.zeros((pad, h, w))], axis=0) if pad else f
    tiles, mins, maxs = [], [], []
    for i in range(n_tiles):
        t = padded[3 * i : 3 * i + 3]
        mn, mx = float(t.min()), float(t.max())
        if mx > mn:
            codes = np.clip(np.round((t - mn) / (mx - mn) * 255.0), 0, 255)
        else:
            codes = np.zeros_like(t)
        tiles.append(codes.astype(np.uint8))
        mins.append(mn)
        maxs.append(mx)
    return tiles, TilePlan((c, h, w), n_tiles, pad, mins, maxs)


def untile(tiles: list[np.ndarray], plan: TilePlan) -> np.ndarray:
    """Denormalize tiles and drop padding channels."""
    c, h, w = plan.shape
    out = np.empty((plan.n_tiles * 3, h, w))
    for i, t in enumerate(tiles):
        mn, mx = plan.mins[i], plan.maxs[i]
        scale = (mx - mn) / 255.0 if mx > mn else 0.0
        out[3 * i : 3 * i + 3] = t.astype(np.float64) * scale + mn
    return out[:c]


def _pad_to_blocks(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    return np.pad(img, ((0, ph), (0, pw)), mode="edge")


def _blocked(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _unblocked(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.transpose(0, 2, 1, 3).reshape(h, w)


def _transform_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    # no level shift: zero-code planes must stay all-zero after the DCT
    padded = _pad_to_blocks(plane.astype(np.float64))
    blocks = _blocked(padded)
    coeffs = dctn(blocks, axes=(-2, -1), norm="ortho")
    return np.round(coeffs / table).astype(np.int16)


def _inverse_plane(q: np.ndarray, table: np.ndarray, h: int, w: int) -> np.ndarray:
    coeffs = q.astype(np.float64) * table
    blocks = idctn(coeffs, axes=(-2, -1), norm="ortho")
    ph, pw = q.shape[0] * BLOCK, q.shape[1] * BLOCK
    full = _unblocked(blocks, ph, pw)[:h, :w]
    return np.clip(np.round(full), 0, 255).astype(np.uint8)


def codec_compress(f: np.ndarray, quality: int) -> bytes:
    """Compress a C x H x W feature map; the payload is self-describing."""
    tiles, plan = tile_features(f)
    c, h, w = plan.shape
    if max(c, h, w) > 0xFFFF:
        raise ConfigError("feature map dimensions exceed u16 container fields")
    table = quant_table(quality)
    planes = [_transform_plane(ch, table) for t in tiles for ch in t]
    stream = zlib.compress(np.concatenate([p.ravel() for p in planes])
                           .astype("<i2").tobytes(), 9)
    head = MAGIC + struct.pack("<HHHB", c, h, w, quality)
    consts = b"".join(struct.pack("<ff", mn, mx) for mn, mx in zip(plan.mins, plan.maxs))
    body = head + consts + stream
    return body + struct.pack("<I", zlib.crc32(body))


def codec_decompress(payload: bytes) -> np.ndarray:
    """Inverse of codec_compress; raises CorruptStreamError on damage."""
    if len(payload) < 15 or payload[:4] != MAGIC:
        raise CorruptStreamError("bad codec container magic")
    (crc,) = struct.unpack_from("<I", payload, len(payload) - 4)
    if zlib.crc32(payload[:-4]) != crc:
        raise CorruptStreamError("codec container CRC mismatch")
    c, h, w, quality = struct.unpack_from("<HHHB", payload, 4)
    n_tiles = -(-c // 3)
    pos = 4 + 7
    mins, maxs = [], []
    for _ in range(n_tiles):
        mn, mx = struct.unpack_from("<ff", payload, pos)
        mins.append(mn)
        maxs.append(mx)
        pos += 8
    try:
        raw = zlib.decompress(payload[pos:-4])
    except zlib.error as exc:
        raise CorruptStreamError(f"codec coefficient stream damaged: {exc}") from None
    bh, bw = -(-h // BLOCK), -(-w // BLOCK)
    per_plane = bh * bw * BLOCK * BLOCK
    q = np.frombuffer(raw, dtype="<i2")
    if len(q) != per_plane * 3 * n_tiles:
        raise CorruptStreamError("codec coefficient count does not match header shape")
    table = quant_table(quality)
    tiles = []
    for i in range(n_tiles):
        chans = []
        for j in range(3):
            plane = q[(3 * i + j) * per_plane : (3 * i + j + 1) * per_plane]
            chans.append(_inverse_plane(plane.reshape(bh, bw, BLOCK, BLOCK), table, h, w))
        tiles.append(np.stack(chans))
    plan = TilePlan((c, h, w), n_tiles, n_tiles * 3 - c, mins, maxs)
    return untile(tiles, plan)
