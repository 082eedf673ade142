"""
Histogram of Oriented Gradients for 30x30 texel windows.

A 30 px window holds 7 whole 4 px cells per side; the 2 px remainder at the
right and bottom is ignored. Blocks of 2x2 cells slide by one cell, giving
6x6 = 36 blocks and 36 x 4 x 9 = 1296 descriptor values.

Each gradient votes its full magnitude into one orientation bin
(bin = floor(theta / 20), 0-indexed). Per-bin integral tables let any cell
histogram be read with four lookups, so descriptors at many window positions
of one image cost almost nothing once the bin stack is built.

Descriptor layout: blocks row-major, cells row-major within a block,
bins ascending within a cell. Each 36-value block is L2 normalised as
v / sqrt(|v|^2 + eps).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from core.errors import BoundsError, DimensionError, ParameterError
from core.imagecore import (
    GradientField,
    GrayImage,
    IntegralTable,
    equalize_histogram,
    gaussian_smooth,
    integral_array,
    sobel_gradients,
)

logger = logging.getLogger(__name__)

# A descriptor is a 1D float64 array of length HogParams.descriptor_length.
HogDescriptor = np.ndarray


@dataclass(frozen=True)
class HogParams:
    cell_size: int = 4
    block_cells: int = 2
    block_stride: int = 1
    bins: int = 9
    bin_width: float = 20.0
    window: int = 30
    eps: float = 1e-3
    smooth_sigma: Optional[float] = None
    equalize: bool = False

    def __post_init__(self) -> None:
        if abs(self.bins * self.bin_width - 180.0) > 1e-9:
            raise ParameterError(f"bins x bin_width must cover 180 degrees, got {self.bins} x {self.bin_width}")
        if self.cells_per_side < self.block_cells:
            raise ParameterError("window too small for one block")
        if self.smooth_sigma is not None and not self.smooth_sigma > 0:
            raise ParameterError(f"smooth_sigma must be > 0, got {self.smooth_sigma}")

    @property
    def cells_per_side(self) -> int:
        return self.window // self.cell_size

    @property
    def blocks_per_side(self) -> int:
        return (self.cells_per_side - self.block_cells) // self.block_stride + 1

    @property
    def block_length(self) -> int:
        return self.block_cells * self.block_cells * self.bins

    @property
    def descriptor_length(self) -> int:
        return self.blocks_per_side * self.blocks_per_side * self.block_length


DEFAULT_PARAMS = HogParams()


@dataclass(frozen=True, eq=False)
class OrientationBinStack:
    """Per-bin magnitude channels (bins, H, W) and their integral tables (bins, H+1, W+1)."""

    channels: np.ndarray
    tables: np.ndarray

    @property
    def width(self) -> int:
        return int(self.channels.shape[2])

    @property
    def height(self) -> int:
        return int(self.channels.shape[1])

    def table(self, k: int) -> IntegralTable:
        return IntegralTable(self.tables[k])


def bin_index(orientation: np.ndarray, params: HogParams = DEFAULT_PARAMS) -> np.ndarray:
    idx = np.floor(np.asarray(orientation) / params.bin_width).astype(np.int64)
    return np.clip(idx, 0, params.bins - 1)


def bin_gradients(grad: GradientField, params: HogParams = DEFAULT_PARAMS) -> OrientationBinStack:
    """Hard-assign every pixel's magnitude to its orientation bin."""
    height, width = grad.magnitude.shape
    idx = bin_index(grad.orientation, params)
    channels = np.zeros((params.bins, height, width))
    rows, cols = np.indices((height, width))
    channels[idx, rows, cols] = grad.magnitude
    tables = integral_array(channels)
    channels.setflags(write=False)
    tables.setflags(write=False)
    return OrientationBinStack(channels, tables)


def preprocess(img: GrayImage, params: HogParams = DEFAULT_PARAMS) -> GrayImage:
    if params.equalize:
        img = equalize_histogram(img)
    if params.smooth_sigma is not None:
        img = gaussian_smooth(img, params.smooth_sigma)
    return img


def compute_bins(img: GrayImage, params: HogParams = DEFAULT_PARAMS) -> OrientationBinStack:
    """Preprocess a full image, take its gradients once and bin them."""
    return bin_gradients(sobel_gradients(preprocess(img, params)), params)


def _block_index(params: HogParams) -> Tuple[np.ndarray, np.ndarray]:
    # (cell_row, cell_col) of every cell of every block, in descriptor order
    b = np.arange(params.blocks_per_side) * params.block_stride
    c = np.arange(params.block_cells)
    rows = b[:, None, None, None] + c[None, None, :, None]
    cols = b[None, :, None, None] + c[None, None, None, :]
    shape = (params.blocks_per_side, params.blocks_per_side, params.block_cells, params.block_cells)
    return np.broadcast_to(rows, shape).ravel(), np.broadcast_to(cols, shape).ravel()


def cell_histograms(bins: OrientationBinStack, top_lefts: np.ndarray, params: HogParams = DEFAULT_PARAMS) -> np.ndarray:
    """Cell histograms (N, cells, cells, bins) for windows at `top_lefts` ((N, 2) of x, y)."""
    top_lefts = np.asarray(top_lefts, dtype=np.int64).reshape(-1, 2)
    x0, y0 = top_lefts[:, 0], top_lefts[:, 1]
    win = params.window
    outside = (x0 < 0) | (y0 < 0) | (x0 + win > bins.width) | (y0 + win > bins.height)
    if np.any(outside):
        bad = top_lefts[np.argmax(outside)]
        raise BoundsError(
            f"{win}x{win} window at ({bad[0]},{bad[1]}) outside {bins.width}x{bins.height} image"
        )
    edges = np.arange(params.cells_per_side + 1) * params.cell_size
    ys = y0[:, None] + edges[None, :]
    xs = x0[:, None] + edges[None, :]
    corners = bins.tables[:, ys[:, :, None], xs[:, None, :]]
    sums = corners[:, :, 1:, 1:] - corners[:, :, :-1, 1:] - corners[:, :, 1:, :-1] + corners[:, :, :-1, :-1]
    return np.moveaxis(sums, 0, -1)


def normalize_blocks(blocks: np.ndarray, eps: float) -> np.ndarray:
    norms = np.sqrt(np.sum(blocks * blocks, axis=-1, keepdims=True) + eps)
    return blocks / norms


def extract_many(bins: OrientationBinStack, top_lefts: Sequence[Tuple[int, int]], params: HogParams = DEFAULT_PARAMS) -> np.ndarray:
    """Descriptors for many windows of one bin stack; returns (N, 1296)."""
    top_lefts = np.asarray(top_lefts, dtype=np.int64).reshape(-1, 2)
    if len(top_lefts) == 0:
        return np.zeros((0, params.descriptor_length))
    cells = cell_histograms(bins, top_lefts, params)
    rows, cols = _block_index(params)
    n_blocks = params.blocks_per_side * params.blocks_per_side
    blocks = cells[:, rows, cols, :].reshape(len(top_lefts), n_blocks, params.block_length)
    return normalize_blocks(blocks, params.eps).reshape(len(top_lefts), -1)


def extract_at(bins: OrientationBinStack, top_left: Tuple[int, int], params: HogParams = DEFAULT_PARAMS) -> HogDescriptor:
    return extract_many(bins, [top_left], params)[0]


def extract(window: GrayImage, params: HogParams = DEFAULT_PARAMS) -> HogDescriptor:
    """Descriptor of a standalone window (gradients computed on the window itself)."""
    if window.width != params.window or window.height != params.window:
        raise DimensionError(
            f"HOG window must be {params.window}x{params.window}, got {window.width}x{window.height}"
        )
    return extract_at(compute_bins(window, params), (0, 0), params)
