"""Datasets: synthetic 2D densities, bit quantization, and the NXNI format.

NXNI is a flat little-endian binary container for small integer image sets:

    offset 0   magic  b"NXNI"
    offset 4   u32 version (currently 1)
    offset 8   u32 count, u32 channels, u32 height, u32 width, u32 bits
    offset 28  payload: count*channels*height*width unsigned bytes, NCHW order

Every payload value must be < 2^bits. PPM (P6, maxval 255) can be imported
one-way for convenience.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import Rng

NXNI_MAGIC = b"NXNI"
NXNI_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

GENERATORS_2D = ("eight_gaussians", "two_moons", "checkerboard")


@dataclass
class Dataset2D:
    points: np.ndarray  # N x 2 float64
    kind: str
    seed: int


@dataclass
class ImageDataset:
    images: np.ndarray  # count x C x H x W uint8
    bits: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be rank 4, got rank {self.images.ndim}")
        if self.images.size and self.images.max() >= (1 << self.bits):
            raise DataError(f"image values must be < 2^{self.bits}")


def _normalize(points: np.ndarray) -> np.ndarray:
    mu = points.mean(axis=0)
    sigma = points.std(axis=0)
    sigma[sigma < 1e-12] = 1.0
    return (points - mu) / sigma


def gen_2d(kind: str, n: int, rng: Rng) -> Dataset2D:
    """Standard synthetic 2D densities, normalized to zero mean, unit scale."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if kind == "eight_gaussians":
        # modes on a radius-2 circle, std 0.2, before normalization
        angles = 2.0 * math.pi * np.arange(8) / 8.0
        centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        which = rng.integers(0, 8, (n,))
        points = centers[which] + 0.2 * rng.normal((n, 2))
    elif kind == "two_moons":
        theta = math.pi * rng.uniform((n,))
        upper = rng.integers(0, 2, (n,)).astype(bool)
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        points = np.stack([x, y], axis=1) + 0.08 * rng.normal((n, 2))
    elif kind == "checkerboard":
        x = rng.uniform((n,), -4.0, 4.0)
        shift = rng.integers(0, 2, (n,)) * 2.0 - 1.0
        y = rng.uniform((n,), 0.0, 1.0) + shift + np.floor(x) % 2
        points = np.stack([x, 2.0 * y - 1.0], axis=1)
    else:
        raise ConfigError(f"unknown 2D generator {kind!r}")
    if n == 1:
        return Dataset2D(points=points, kind=kind, seed=rng.seed)
    return Dataset2D(points=_normalize(points), kind=kind, seed=rng.seed)


def quantize_bits(x_int8: np.ndarray, target_bits: int) -> np.ndarray:
    """Reduce 8-bit values to target_bits by dropping low bits."""
    if not (1 <= target_bits <= 8):
        raise ConfigError(f"target_bits must be in [1, 8], got {target_bits}")
    x = np.asarray(x_int8)
    if x.size and (x.min() < 0 or x.max() > 255):
        raise DataError("values must be 8-bit")
    return (x.astype(np.uint16) >> (8 - target_bits)).astype(np.uint8)


def save_images(ds: ImageDataset, path) -> None:
    count, c, h, w = ds.images.shape
    header = _HEADER.pack(NXNI_MAGIC, NXNI_VERSION, count, c, h, w, ds.bits)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())


def load_images(path) -> ImageDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated NXNI header", offset=len(raw))
    magic, version, count, c, h, w, bits = _HEADER.unpack_from(raw, 0)
    if magic != NXNI_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != NXNI_VERSION:
        raise FormatError(f"unsupported NXNI version {version}", offset=4)
    if not (1 <= bits <= 8):
        raise FormatError(f"invalid bit depth {bits}", offset=24)
    expected = count * c * h * w
    if len(raw) != _HEADER.size + expected:
        raise FormatError(
            f"payload length {len(raw) - _HEADER.size} != expected {expected}",
            offset=_HEADER.size)
    payload = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    limit = 1 << bits
    if payload.size and payload.max() >= limit:
        bad = int(np.argmax(payload >= limit))
        raise FormatError(f"value {payload[bad]} >= 2^{bits}", offset=_HEADER.size + bad)
    return ImageDataset(images=payload.reshape(count, c, h, w).copy(), bits=bits)


def import_ppm(path, bits: int = 8) -> ImageDataset:
    """One-way import of a single P6 PPM (maxval 255) image."""
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"not a P6 PPM: {fields[0]!r}", offset=0)
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if pixels.size != 3 * w * h:
        raise FormatError(f"payload length {pixels.size} != {3 * w * h}", offset=pos)
    img = pixels.reshape(h, w, 3).transpose(2, 0, 1)[None]
    return ImageDataset(images=quantize_bits(img, bits), bits=bits)


def save_ppm_montage(images: np.ndarray, bits: int, path, cols: int = 8) -> None:
    """Write a grid of C x H x W integer images as one P6 PPM."""
    count = images.shape[0]
    c, h, w = images.shape[1:]
    cols = max(1, min(cols, max(count, 1)))
    rows = max(1, (count + cols - 1) // cols)
    canvas = np.zeros((3, rows * h, cols * w), dtype=np.uint8)
    scale = 255 // max((1 << bits) - 1, 1)
    for i in range(count):
        r, col = divmod(i, cols)
        img = images[i].astype(np.uint16) * scale
        if c == 1:
            img = np.repeat(img, 3, axis=0)
        canvas[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = img[:3].astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{canvas.shape[2]} {canvas.shape[1]}\n255\n".encode())
        f.write(canvas.transpose(1, 2, 0).tobytes())


def gen_textures(n: int, channels: int, size: int, bits: int, rng: Rng) -> ImageDataset:
    """Synthetic low-entropy textures: smooth two-color gradients plus a
    little quantization noise. Structured enough that a small flow beats the
    uniform baseline quickly."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    levels = (1 << bits) - 1
    ii, jj = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    out = np.empty((n, channels, size, size), dtype=np.uint8)
    for i in range(n):
        theta = rng.uniform((), 0.0, 2.0 * math.pi)
        ramp = (math.cos(theta) * ii + math.sin(theta) * jj + 1.0) / 2.0
        phase = rng.uniform((), 0.0, 2.0 * math.pi)
        freq = rng.uniform((), 0.5, 2.0)
        wave = 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * ramp + phase)
        for ch in range(channels):
            lo = rng.uniform((), 0.0, 0.4)
            hi = rng.uniform((), 0.6, 1.0)
            vals = lo + (hi - lo) * wave + 0.02 * rng.normal((size, size))
            out[i, ch] = np.clip(np.rint(vals * levels), 0, levels).astype(np.uint8)
    return ImageDataset(images=out, bits=bits)


def save_points_csv(points: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in points:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def load_points_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    if not rows:
        return np.zeros((0, 2))
    return np.asarray(rows, dtype=np.float64)
