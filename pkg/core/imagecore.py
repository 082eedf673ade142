"""Image containers, file I/O, filters, integral tables and affine warping.

Every other module builds on the types defined here:

- GrayImage: real-valued intensity raster, row-major, shape (height, width)
- BinaryMask: per-pixel flag raster with values in {0, 1}
- GradientField: Sobel magnitude and orientation folded into [0, 180)
- IntegralTable: (height+1) x (width+1) cumulative sum of one channel

Values are immutable once constructed: the backing arrays are copied and
flagged read-only, so instances can be shared freely between threads.
Filters use replicate borders. Pixels stay real-valued until they are
written to disk, where they are rounded half-up to 8 bits.
"""
from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, NamedTuple, Tuple, Union

os.environ.setdefault("PYGAME_HIDE_SUPPORT_PROMPT", "1")

import numpy as np
import pygame
from scipy import ndimage

from core.errors import BoundsError, DegenerateTransformError, DimensionError, ImageFormatError, ParameterError

if TYPE_CHECKING:
    from core.motion import AffineTransform

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
MIN_DETERMINANT = 1e-9


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ============================================================================
# CONTAINERS
# ============================================================================

@dataclass(frozen=True, eq=False)
class GrayImage:
    """Intensity raster. `data` has shape (height, width), dtype float64."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"image data must be a non-empty 2D array, got shape {data.shape}")
        data = _frozen(data, np.float64)
        if not np.all(np.isfinite(data)):
            raise ParameterError("image data must be finite")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "GrayImage":
        return cls(np.zeros((height, width)))

    @classmethod
    def constant(cls, width: int, height: int, value: float) -> "GrayImage":
        return cls(np.full((height, width), float(value)))

    def clamped(self) -> "GrayImage":
        """Return a copy with every value clipped into [0, 255]."""
        return GrayImage(np.clip(self.data, 0.0, 255.0))

    def crop(self, x: int, y: int, w: int, h: int) -> "GrayImage":
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise BoundsError(f"crop ({x},{y},{w},{h}) outside {self.width}x{self.height} image")
        return GrayImage(self.data[y:y + h, x:x + w])

    def flipped(self) -> "GrayImage":
        """Mirror about the vertical (y) axis."""
        return GrayImage(self.data[:, ::-1])

    def quantized(self) -> np.ndarray:
        """8-bit view used at save time (clamp, then round half up)."""
        return np.floor(np.clip(self.data, 0.0, 255.0) + 0.5).astype(np.uint8)

    def __repr__(self) -> str:
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel flag raster; for fence masks 1 = fence/occluded, 0 = visible."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"mask data must be a non-empty 2D array, got shape {data.shape}")
        if data.dtype != np.bool_ and not np.all((data == 0) | (data == 1)):
            raise ParameterError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data != 0, np.uint8))

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    def inverted(self) -> "BinaryMask":
        return BinaryMask(1 - self.data)

    def count(self) -> int:
        return int(self.data.sum())

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, set={self.count()})"


@dataclass(frozen=True, eq=False)
class GradientField:
    magnitude: np.ndarray
    orientation: np.ndarray

    def __post_init__(self) -> None:
        if self.magnitude.shape != self.orientation.shape:
            raise DimensionError("magnitude and orientation must share a shape")
        object.__setattr__(self, "magnitude", _frozen(self.magnitude, np.float64))
        object.__setattr__(self, "orientation", _frozen(self.orientation, np.float64))


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True, eq=False)
class IntegralTable:
    """Summed-area table with a zero first row and column."""

    table: np.ndarray

    @property
    def width(self) -> int:
        return int(self.table.shape[1]) - 1

    @property
    def height(self) -> int:
        return int(self.table.shape[0]) - 1

    def rect_sum(self, rect: Union[Rect, Tuple[int, int, int, int]]) -> float:
        return rect_sum(self, rect)


def check_same_shape(a, b, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in size: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")


# ============================================================================
# FILE I/O
# ============================================================================

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@contextlib.contextmanager
def atomic_output(path: PathLike) -> Iterator[Path]:
    """Yield a temporary sibling path and move it over `path` on success.

    The temporary name keeps the original suffix so format detection by
    extension (pygame) still works.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.stem}.tmp{target.suffix}")
    try:
        yield tmp
        os.replace(tmp, target)
    finally:
        if tmp.exists():
            tmp.unlink()


def _read_pgm(raw: bytes, path: Path) -> np.ndarray:
    # Header tokens: magic, width, height, maxval, separated by whitespace and comments.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit (maxval 255) PGM is supported")
    payload = raw[pos:pos + width * height]
    if len(payload) != width * height:
        raise ImageFormatError(f"{path}: truncated PGM raster")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)


def _read_png(path: Path) -> np.ndarray:
    try:
        surface = pygame.image.load(str(path))
    except pygame.error as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from None
    rgb = pygame.surfarray.array3d(surface).transpose(1, 0, 2).astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    if np.array_equal(r, g) and np.array_equal(g, b):
        return r.copy()
    luma = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return np.clip(luma, 0.0, 255.0)


def load_gray(path: PathLike) -> GrayImage:
    """Load a PGM (P5, maxval 255) or PNG file as a GrayImage.

    Color PNGs are reduced by luminance 0.299R + 0.587G + 0.114B and clamped.
    The format is detected from the file's magic bytes.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(b"P5"):
        return GrayImage(_read_pgm(raw, path))
    if raw.startswith(PNG_MAGIC):
        return GrayImage(_read_png(path))
    raise ImageFormatError(f"{path}: unsupported image format (PGM P5 or PNG expected)")


def _write_pgm(pixels: np.ndarray, path: Path) -> None:
    height, width = pixels.shape
    with atomic_output(path) as tmp:
        with tmp.open("wb") as fh:
            fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def save_rgb_png(rgb: np.ndarray, path: PathLike) -> None:
    """Write an (height, width, 3) uint8 array as PNG."""
    surface = pygame.surfarray.make_surface(np.ascontiguousarray(rgb.transpose(1, 0, 2)))
    with atomic_output(path) as tmp:
        pygame.image.save(surface, str(tmp))


def save_gray(img: GrayImage, path: PathLike) -> None:
    """Write a GrayImage as PGM or PNG, chosen by the file suffix."""
    path = Path(path)
    pixels = img.quantized()
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        _write_pgm(pixels, path)
    elif suffix == ".png":
        save_rgb_png(np.repeat(pixels[..., None], 3, axis=2), path)
    else:
        raise ImageFormatError(f"{path}: output suffix must be .pgm or .png")


def load_mask(path: PathLike) -> BinaryMask:
    """Load a mask image; any nonzero pixel is a set flag."""
    return BinaryMask(load_gray(path).data > 0)


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    save_gray(GrayImage(mask.data.astype(np.float64) * 255.0), path)


# ============================================================================
# FILTERS
# ============================================================================

def sobel_components(img: GrayImage) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical 3x3 Sobel responses with replicate border."""
    if img.width < 3 or img.height < 3:
        raise DimensionError(f"Sobel needs at least 3x3 pixels, got {img.width}x{img.height}")
    gx = ndimage.correlate(img.data, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img.data, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel_gradients(img: GrayImage) -> GradientField:
    gx, gy = sobel_components(img)
    magnitude = np.hypot(gx, gy)
    orientation = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    # mod can round tiny negative angles up to exactly 180
    orientation[orientation >= 180.0] = 0.0
    return GradientField(magnitude, orientation)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def smooth_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on a raw array (replicate border)."""
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(data, dtype=np.float64), kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def gaussian_smooth(img: GrayImage, sigma: float) -> GrayImage:
    return GrayImage(smooth_array(img.data, sigma))


def equalize_histogram(img: GrayImage) -> GrayImage:
    """Map intensities through the normalised cumulative histogram."""
    pixels = img.quantized()
    hist = np.bincount(pixels.ravel(), minlength=256).astype(np.float64)
    cdf = np.cumsum(hist)
    lowest = cdf[cdf > 0][0]
    span = cdf[-1] - lowest
    if span <= 0:
        return GrayImage(np.full(img.shape, 0.0))
    lut = np.clip((cdf - lowest) / span, 0.0, 1.0) * 255.0
    return GrayImage(lut[pixels])


# ============================================================================
# INTEGRAL TABLES
# ============================================================================

def integral_array(channel: np.ndarray) -> np.ndarray:
    """Summed-area tables over the last two axes of `channel`."""
    channel = np.asarray(channel, dtype=np.float64)
    pad = [(0, 0)] * (channel.ndim - 2) + [(1, 0), (1, 0)]
    table = np.pad(channel, pad)
    return table.cumsum(axis=-2).cumsum(axis=-1)


def integral(channel: Union[GrayImage, np.ndarray]) -> IntegralTable:
    data = channel.data if isinstance(channel, GrayImage) else np.asarray(channel, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError("integral tables are built from a single 2D channel")
    return IntegralTable(_frozen(integral_array(data), np.float64))


def rect_sum(table: IntegralTable, rect: Union[Rect, Tuple[int, int, int, int]]) -> float:
    x, y, w, h = rect
    if w < 0 or h < 0 or x < 0 or y < 0 or x + w > table.width or y + h > table.height:
        raise BoundsError(f"rect {tuple(rect)} outside {table.width}x{table.height} table")
    if w == 0 or h == 0:
        return 0.0
    t = table.table
    return float(t[y + h, x + w] - t[y, x + w] - t[y + h, x] + t[y, x])


# ============================================================================
# GEOMETRY
# ============================================================================

def sample_bilinear(data: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear samples of `data` at (sx, sy); returns (values, valid flags).

    Positions outside [0, w-1] x [0, h-1] are invalid and sample as 0.
    """
    height, width = data.shape
    eps = 1e-9
    valid = (sx >= -eps) & (sx <= width - 1 + eps) & (sy >= -eps) & (sy <= height - 1 + eps)
    cx = np.clip(sx, 0.0, width - 1.0)
    cy = np.clip(sy, 0.0, height - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = cx - x0
    fy = cy - y0
    top = data[y0, x0] + fx * (data[y0, x1] - data[y0, x0])
    bottom = data[y1, x0] + fx * (data[y1, x1] - data[y1, x0])
    values = top + fy * (bottom - top)
    return np.where(valid, values, 0.0), valid


def sample_nearest(data: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    height, width = data.shape
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    valid = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    values = data[np.clip(iy, 0, height - 1), np.clip(ix, 0, width - 1)]
    return np.where(valid, values, 0.0), valid


def warp_array(data: np.ndarray, t: "AffineTransform", sampling: str = "bilinear") -> Tuple[np.ndarray, np.ndarray]:
    """Inverse-warp a raw array; returns (values, valid flags)."""
    if abs(t.determinant()) <= MIN_DETERMINANT:
        raise DegenerateTransformError(f"transform is singular (det={t.determinant():.3g})")
    inv = t.inverse()
    height, width = data.shape
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sx, sy = inv.apply_arrays(xs, ys)
    if sampling == "bilinear":
        return sample_bilinear(data, sx, sy)
    if sampling == "nearest":
        return sample_nearest(data, sx, sy)
    raise ParameterError(f"unknown sampling mode {sampling!r}")


def warp_affine(img: GrayImage, t: "AffineTransform", sampling: str = "bilinear") -> Tuple[GrayImage, BinaryMask]:
    """Warp `img` by `t`: output pixel p samples the input at t^-1(p).

    The returned mask flags output pixels whose source fell outside the input
    (1 = invalid/unobserved); those pixels carry value 0.
    """
    values, valid = warp_array(img.data, t, sampling)
    return GrayImage(values), BinaryMask(~valid)


def resize_bilinear(img: GrayImage, new_w: int, new_h: int) -> GrayImage:
    """Corner-aligned bilinear resize."""
    if new_w < 1 or new_h < 1:
        raise ParameterError(f"resize target must be at least 1x1, got {new_w}x{new_h}")
    if (new_w, new_h) == (img.width, img.height):
        return img
    sx = np.arange(new_w, dtype=np.float64) * (img.width - 1) / max(new_w - 1, 1)
    sy = np.arange(new_h, dtype=np.float64) * (img.height - 1) / max(new_h - 1, 1)
    gx, gy = np.meshgrid(sx, sy)
    values, _ = sample_bilinear(img.data, gx, gy)
    return GrayImage(values)
