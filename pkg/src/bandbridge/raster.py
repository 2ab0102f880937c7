"""Raster patches: band layout, resampling, the BBP1 file format and RGB export."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

REFLECTANCE_MAX = 1.5


class Band(enum.IntEnum):
    BLUE = 1
    GREEN = 2
    RED = 3
    NIR = 4
    SWIR1 = 5
    SWIR2 = 6
    PAN = 7


INPUT_BANDS = (Band.BLUE, Band.GREEN, Band.RED, Band.NIR, Band.SWIR1, Band.SWIR2, Band.PAN)
TARGET_BANDS = INPUT_BANDS[:6]


class RasterError(ValueError):
    pass


class RasterFormatError(RasterError):
    pass


class CorruptHeaderError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class UnknownVersionError(RasterFormatError):
    pass


class MissingBandError(RasterError):
    pass


@dataclass
class RasterPatch:
    """A C x H x W tile of reflectance-like values.

    ``gsd_m`` is the ground sample distance in meters per pixel and
    ``origin`` the (x, y) offset in meters of the top-left corner inside
    the parent scene.
    """

    bands: tuple[Band, ...]
    pixels: np.ndarray
    gsd_m: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.bands = tuple(Band(b) for b in self.bands)
        self.pixels = np.asarray(self.pixels)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self.gsd_m = float(self.gsd_m)
        if self.pixels.ndim != 3:
            raise RasterError(f"pixels must be C x H x W, got shape {self.pixels.shape}")
        c, h, w = self.pixels.shape
        if c != len(self.bands):
            raise RasterError(f"{len(self.bands)} bands but {c} pixel planes")
        if h <= 0 or w <= 0:
            raise RasterError("empty raster")
        if len(set(self.bands)) != len(self.bands):
            raise RasterError(f"duplicate bands {self.bands}")
        if self.pixels.size and not (
            np.all(np.isfinite(self.pixels))
            and self.pixels.min() >= 0.0
            and self.pixels.max() <= REFLECTANCE_MAX
        ):
            raise RasterError(f"pixel values must be finite and within [0, {REFLECTANCE_MAX}]")
        if not self.gsd_m > 0:
            raise RasterError("gsd_m must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    @property
    def hw(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def band(self, b: Band) -> np.ndarray:
        try:
            return self.pixels[self.bands.index(Band(b))]
        except ValueError:
            raise MissingBandError(f"band {Band(b).name} not present in {[x.name for x in self.bands]}") from None

    def select(self, bands: Sequence[Band]) -> "RasterPatch":
        planes = np.stack([self.band(b) for b in bands])
        return RasterPatch(tuple(bands), planes, self.gsd_m, self.origin)


# ---------------------------------------------------------------------------
# resampling

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    """Keys cubic convolution kernel W(x); a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def cubic_taps(t: float, a: float = CUBIC_A) -> np.ndarray:
    """Weights of the 4 neighbours at offsets -1, 0, 1, 2 for fractional phase t in [0, 1)."""
    return cubic_kernel(np.array([1 + t, t, 1 - t, 2 - t]), a)


def bicubic_matrix(n_in: int, n_out: int, a: float = CUBIC_A) -> np.ndarray:
    """n_out x n_in interpolation matrix with half-pixel centres and clamped edges."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in range(-1, 3):
        idx = np.clip(base + off, 0, n_in - 1)
        np.add.at(m, (rows, idx), cubic_kernel(t - off, a))
    return m


def bicubic_resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Separable cubic-convolution resize of a (..., H, W) array, in float64, no clipping."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    my = bicubic_matrix(h, out_hw[0])
    mx = bicubic_matrix(w, out_hw[1])
    return my @ arr @ mx.T


def bicubic_upsample(patch: RasterPatch, target_hw: tuple[int, int]) -> RasterPatch:
    h, w = patch.hw
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < h or tw < w:
        raise RasterError(f"bicubic_upsample cannot downscale {(h, w)} -> {(th, tw)}")
    out = np.clip(bicubic_resize(patch.pixels, (th, tw)), 0.0, REFLECTANCE_MAX)
    return RasterPatch(patch.bands, out.astype(patch.pixels.dtype), patch.gsd_m * h / th, patch.origin)


def area_downsample(patch: RasterPatch, factor: int) -> RasterPatch:
    c, h, w = patch.shape
    if factor < 1 or h % factor or w % factor:
        raise RasterError(f"size {(h, w)} not divisible by factor {factor}")
    out = area_mean(patch.pixels, factor)
    return RasterPatch(patch.bands, out.astype(patch.pixels.dtype), patch.gsd_m * factor, patch.origin)


def area_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Block means of a (..., H, W) array, computed in float64."""
    *lead, h, w = arr.shape
    blocks = np.asarray(arr, dtype=np.float64).reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


# ---------------------------------------------------------------------------
# BBP1 file format

MAGIC = b"BBP1"
VERSION = 1
HEADER_SIZE = 64
_HEADER = struct.Struct("<4sHB7sIIfff")


def encode_patch(patch: RasterPatch) -> bytes:
    c, h, w = patch.shape
    if c > 7:
        raise RasterError("BBP1 holds at most 7 bands")
    codes = bytes(int(b) for b in patch.bands).ljust(7, b"\0")
    header = _HEADER.pack(MAGIC, VERSION, c, codes, h, w, patch.gsd_m, patch.origin[0], patch.origin[1])
    header = header.ljust(HEADER_SIZE, b"\0")
    return header + np.ascontiguousarray(patch.pixels, dtype="<f4").tobytes()


def decode_patch(buf: bytes, offset: int = 0) -> tuple[RasterPatch, int]:
    """Decode one record starting at ``offset``; returns (patch, next offset)."""
    if len(buf) - offset < HEADER_SIZE:
        raise CorruptHeaderError("file shorter than the 64-byte header")
    magic, version, c, codes, h, w, gsd, ox, oy = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersionError(f"unsupported BBP version {version}")
    if not 1 <= c <= 7 or h == 0 or w == 0:
        raise CorruptHeaderError(f"invalid dimensions c={c} h={h} w={w}")
    try:
        bands = tuple(Band(x) for x in codes[:c])
    except ValueError as exc:
        raise CorruptHeaderError(f"unknown band code in {codes!r}") from exc
    if any(codes[c:]):
        raise CorruptHeaderError("non-zero band-code padding")
    n = c * h * w * 4
    start = offset + HEADER_SIZE
    if len(buf) - start < n:
        raise TruncatedPayloadError(f"payload needs {n} bytes, found {len(buf) - start}")
    pixels = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=start).reshape(c, h, w).astype(np.float32)
    return RasterPatch(bands, pixels, float(gsd), (float(ox), float(oy))), start + n


def write_patch(patch: RasterPatch, path) -> None:
    Path(path).write_bytes(encode_patch(patch))


def write_patches(patches: Sequence[RasterPatch], path) -> None:
    """Write several records back to back in one file."""
    Path(path).write_bytes(b"".join(encode_patch(p) for p in patches))


def read_patch(path) -> RasterPatch:
    """Read the first record of a BBP1 file."""
    return decode_patch(Path(path).read_bytes())[0]


def read_patches(path) -> list[RasterPatch]:
    buf = Path(path).read_bytes()
    out, off = [], 0
    while off < len(buf):
        p, off = decode_patch(buf, off)
        out.append(p)
    if not out:
        raise CorruptHeaderError("empty file")
    return out


# ---------------------------------------------------------------------------
# RGB export

STRETCH_PERCENTILES = (2.0, 98.0)


def stretch_channel(x: np.ndarray, lo_pct: float = 2.0, hi_pct: float = 98.0) -> np.ndarray:
    """Linear percentile stretch to uint8.

    A flat channel has no spread to stretch; it is then stretched from 0,
    so a constant c > 0 maps to 255 and a constant 0 stays black.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.percentile(x, [lo_pct, hi_pct])
    if hi <= lo:
        lo = 0.0
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    scaled = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def rgb_composite(patch: RasterPatch) -> np.ndarray:
    """H x W x 3 uint8 array from the Red, Green and Blue bands."""
    planes = [stretch_channel(patch.band(b), *STRETCH_PERCENTILES) for b in (Band.RED, Band.GREEN, Band.BLUE)]
    return np.stack(planes, axis=-1)


def export_rgb(patch: RasterPatch, path) -> None:
    from PIL import Image

    Image.fromarray(rgb_composite(patch), mode="RGB").save(path, format="PNG")
