"""Aspect-ratio preserving preprocessing for herbarium-style scans.

The pipeline strips a fixed border, mirrors the image along its short side
until it is square, resizes bilinearly and takes a center crop::

    presize(img, PresizeConfig(border_px=20, resize_to=512, crop_to=448))

Reflection is appended on the trailing side (right or bottom) and mirrors
about the boundary between pixels, so the edge pixel is repeated and the seam
is continuous: rows ``[A, B]`` pad to ``[A, B, B, A]``. Padding that exceeds
the image extent keeps reflecting with alternating orientation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB image stored as an (height, width, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.dtype != np.uint8 or d.ndim != 3 or d.shape[2] != 3:
            raise FormatError(f"expected (h, w, 3) uint8 data, got {d.dtype} {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise DegenerateInputError(f"image must be at least 1x1, got {d.shape[:2]}")
        object.__setattr__(self, "data", np.ascontiguousarray(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def __eq__(self, other) -> bool:
        return isinstance(other, RasterImage) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class PresizeConfig:
    border_px: int = 20
    resize_to: int = 512
    crop_to: int = 448

    def __post_init__(self):
        if self.border_px < 0 or self.resize_to < 1 or self.crop_to < 1:
            raise DegenerateInputError(f"invalid presize config {self}")
        if self.crop_to > self.resize_to:
            raise DimensionError(f"crop_to {self.crop_to} exceeds resize_to {self.resize_to}")


def strip_border(img: RasterImage, border_px: int) -> RasterImage:
    b = int(border_px)
    if b < 0:
        raise DegenerateInputError("border must be non-negative")
    if 2 * b >= img.height or 2 * b >= img.width:
        raise DegenerateInputError(f"border {b}px leaves nothing of a {img.height}x{img.width} image")
    if b == 0:
        return img
    return RasterImage(img.data[b:img.height - b, b:img.width - b])


def mirror_indices(n_out: int, n_in: int) -> np.ndarray:
    """Source index for each of ``n_out`` positions of a symmetric (edge-repeating) extension."""
    k = np.arange(n_out) % (2 * n_in)
    return np.where(k < n_in, k, 2 * n_in - 1 - k)


def reflect_pad_to_square(img: RasterImage) -> RasterImage:
    h, w = img.height, img.width
    side = max(h, w)
    if h == w:
        return img
    if h < w:
        return RasterImage(img.data[mirror_indices(side, h)])
    return RasterImage(img.data[:, mirror_indices(side, w)])


def _bilinear_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the image
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(img: RasterImage, to: int) -> RasterImage:
    """Bilinear resize to ``to x to`` with the half-pixel-centre convention."""
    if to < 1:
        raise DegenerateInputError("resize target must be >= 1 pixel")
    y0, y1, fy = _bilinear_taps(img.height, to)
    x0, x1, fx = _bilinear_taps(img.width, to)
    src = img.data.astype(np.float64)
    wy = fy[:, None, None]
    wx = fx[None, :, None]
    p00 = src[y0][:, x0]
    p01 = src[y0][:, x1]
    p10 = src[y1][:, x0]
    p11 = src[y1][:, x1]
    # same evaluation order as a per-pixel 4-tap loop, so results are bit-reproducible
    val = (1.0 - wy) * ((1.0 - wx) * p00 + wx * p01) + wy * ((1.0 - wx) * p10 + wx * p11)
    return RasterImage(np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8))


def center_crop(img: RasterImage, to: int) -> RasterImage:
    if to < 1:
        raise DegenerateInputError("crop target must be >= 1 pixel")
    if to > img.height or to > img.width:
        raise DimensionError(f"cannot crop {to}x{to} from {img.height}x{img.width}")
    top = (img.height - to) // 2
    left = (img.width - to) // 2
    return RasterImage(img.data[top:top + to, left:left + to])


def presize(img: RasterImage, cfg: PresizeConfig = PresizeConfig()) -> RasterImage:
    out = strip_border(img, cfg.border_px)
    out = reflect_pad_to_square(out)
    out = resize(out, cfg.resize_to)
    return center_crop(out, cfg.crop_to)


def content_extent(height: int, width: int, resize_to: int) -> tuple[int, int]:
    """Extent covered by original (non-mirrored) pixels after padding and resizing."""
    side = max(height, width)
    return round(height * resize_to / side), round(width * resize_to / side)


# ---------------------------------------------------------------- PPM I/O


def write_ppm(img: RasterImage, path: str | os.PathLike) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.data.tobytes())


def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path: str | os.PathLike) -> RasterImage:
    buf = Path(path).read_bytes()
    tokens, pos = _ppm_tokens(buf, 4, 0)
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    need = width * height * 3
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    return RasterImage(np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3))


def presize_directory(src: str | os.PathLike, dst: str | os.PathLike, cfg: PresizeConfig) -> list[Path]:
    """Presize every ``*.ppm`` in ``src`` into ``dst`` (same file names)."""
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    written = []
    for path in sorted(src.glob("*.ppm")):
        out = dst / path.name
        write_ppm(presize(read_ppm(path), cfg), out)
        written.append(out)
    return written
