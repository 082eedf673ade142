"""
Multi-scale sliding-window joint detection and fence lattice recovery.

Pipeline (detect_lattice):
    detect_joints -> suppress (radius from the window size)
    -> estimate_texel -> suppress (radius from the texel size)
    -> link_joints -> render_mask

Detections carry window centers mapped back to original image coordinates.
Linking works along the image axes; a lattice in which most detections stay
unlinked is reported as possibly non-axial rather than guessed at.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from core.classifier import ClassifierModel, decision_scores
from core.cnn import INPUT_SIZE, CnnNetwork, predict
from core.errors import DegenerateLatticeError, DimensionError, ParameterError
from core.hog import DEFAULT_PARAMS, HogParams, compute_bins, extract_many
from core.imagecore import BinaryMask, GrayImage, atomic_output, integral_array, resize_bilinear

logger = logging.getLogger(__name__)

AXIS_CONE_DEG = 30.0
WINDOW_CHUNK = 2048
FLAT_WINDOW_STD = 0.5


@dataclass(frozen=True)
class JointDetection:
    x: float
    y: float
    scale: float = 1.0
    score: float = 0.0


@dataclass(frozen=True)
class Lattice:
    joints: Tuple[JointDetection, ...]
    texel_w: float
    texel_h: float
    edges: Tuple[Tuple[int, int], ...] = ()

    def degree(self, i: int) -> int:
        return sum(1 for a, b in self.edges if i in (a, b))

    def neighbors(self, i: int) -> List[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})


@dataclass(frozen=True)
class DetectorConfig:
    stride: int = 2
    scale_ratio: float = 1.2
    min_scale: float = 1.0
    max_scale: float = 1.0
    score_threshold: float = 0.0
    dominance_radius_factor: float = 0.5
    link_tolerance: float = 0.25
    bar_width: Optional[int] = None

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if not self.scale_ratio > 1:
            raise ParameterError(f"scale_ratio must be > 1, got {self.scale_ratio}")
        if not 0 < self.link_tolerance < 1:
            raise ParameterError(f"link_tolerance must be in (0, 1), got {self.link_tolerance}")
        if self.max_scale < self.min_scale:
            raise ParameterError(f"max_scale {self.max_scale} is below min_scale {self.min_scale}")
        if self.bar_width is not None and self.bar_width < 1:
            raise ParameterError(f"bar_width must be >= 1, got {self.bar_width}")


@dataclass(frozen=True)
class LatticeResult:
    detections: List[JointDetection]
    suppressed: List[JointDetection]
    lattice: Lattice
    mask: BinaryMask
    degenerate: bool = False
    bar_width: int = 0


def scales(cfg: DetectorConfig) -> List[float]:
    """Geometric scale sequence min_scale * ratio^k up to max_scale."""
    out = []
    k = 0
    while True:
        s = cfg.min_scale * cfg.scale_ratio ** k
        if s > cfg.max_scale + 1e-12:
            return out
        out.append(s)
        k += 1


def window_size(model) -> int:
    return INPUT_SIZE if isinstance(model, CnnNetwork) else DEFAULT_PARAMS.window


# ============================================================================
# DETECTION
# ============================================================================

def _chunks(items: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(items), size):
        yield items[start:start + size]


def window_std(level: GrayImage, top_lefts: np.ndarray, win: int) -> np.ndarray:
    """Intensity standard deviation of every window, from summed-area tables."""
    tables = integral_array(np.stack([level.data, level.data * level.data]))
    x0, y0 = top_lefts[:, 0], top_lefts[:, 1]
    sums = tables[:, y0 + win, x0 + win] - tables[:, y0, x0 + win] - tables[:, y0 + win, x0] + tables[:, y0, x0]
    area = float(win * win)
    mean = sums[0] / area
    return np.sqrt(np.maximum(sums[1] / area - mean * mean, 0.0))


def score_windows(level: GrayImage, model, top_lefts: np.ndarray, hog_params: HogParams = DEFAULT_PARAMS) -> np.ndarray:
    """Classifier score of the window at every top-left of one pyramid level."""
    scores = np.empty(len(top_lefts))
    if isinstance(model, CnnNetwork):
        windows = sliding_window_view(level.data / 255.0, (INPUT_SIZE, INPUT_SIZE))
        pos = 0
        for chunk in _chunks(top_lefts, WINDOW_CHUNK):
            batch = windows[chunk[:, 1], chunk[:, 0]]
            scores[pos:pos + len(chunk)] = predict(model, batch) - 0.5
            pos += len(chunk)
        return scores
    if not isinstance(model, ClassifierModel):
        raise ParameterError(f"unsupported model type {type(model).__name__}")
    bins = compute_bins(level, hog_params)
    pos = 0
    for chunk in _chunks(top_lefts, WINDOW_CHUNK):
        scores[pos:pos + len(chunk)] = decision_scores(model, extract_many(bins, chunk, hog_params))
        pos += len(chunk)
    return scores


def detect_joints(img: GrayImage, model, cfg: DetectorConfig = DetectorConfig(), hog_params: HogParams = DEFAULT_PARAMS) -> List[JointDetection]:
    """Slide the model's window over every pyramid level and keep scores above threshold."""
    win = window_size(model)
    detections: List[JointDetection] = []
    scanned = 0
    for s in scales(cfg):
        new_w = int(math.floor(img.width / s + 0.5))
        new_h = int(math.floor(img.height / s + 0.5))
        if new_w < win or new_h < win:
            continue
        level = resize_bilinear(img, new_w, new_h)
        xs = np.arange(0, new_w - win + 1, cfg.stride)
        ys = np.arange(0, new_h - win + 1, cfg.stride)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        top_lefts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        scores = score_windows(level, model, top_lefts, hog_params)
        # a textureless window holds no fence
        scores[window_std(level, top_lefts, win) < FLAT_WINDOW_STD] = -np.inf
        scanned += 1
        centre = win // 2
        for (x0, y0), score in zip(top_lefts, scores):
            if score > cfg.score_threshold:
                detections.append(JointDetection((x0 + centre) * s, (y0 + centre) * s, s, float(score)))
        logger.debug("scale %.3f: %d windows", s, len(top_lefts))
    if scanned == 0:
        raise DimensionError(f"image {img.width}x{img.height} is smaller than the {win}x{win} window at every scale")
    logger.info("%d raw detections", len(detections))
    return detections


def suppress(joints: Sequence[JointDetection], radius: float) -> List[JointDetection]:
    """Greedy region-of-dominance suppression, strongest first, ties by (y, x)."""
    if not radius > 0:
        raise ParameterError(f"radius must be > 0, got {radius}")
    order = sorted(joints, key=lambda j: (-j.score, j.y, j.x))
    kept: List[JointDetection] = []
    kept_xy = np.zeros((0, 2))
    for joint in order:
        if len(kept):
            d2 = (kept_xy[:, 0] - joint.x) ** 2 + (kept_xy[:, 1] - joint.y) ** 2
            if np.any(d2 < radius * radius):
                continue
        kept.append(joint)
        kept_xy = np.vstack([kept_xy, [joint.x, joint.y]])
    return kept


# ============================================================================
# LATTICE
# ============================================================================

def _lower_median(values: List[float]) -> float:
    values = sorted(values)
    return values[(len(values) - 1) // 2]


def estimate_texel(joints: Sequence[JointDetection]) -> Tuple[float, float]:
    """Medians of nearest-neighbour distances within 30 degrees of each image axis."""
    if len(joints) < 2:
        raise DegenerateLatticeError(f"need at least 2 joints to estimate texel size, got {len(joints)}")
    xy = np.array([(j.x, j.y) for j in joints])
    dx = xy[None, :, 0] - xy[:, None, 0]
    dy = xy[None, :, 1] - xy[:, None, 1]
    dist = np.hypot(dx, dy)
    cone = math.tan(math.radians(AXIS_CONE_DEG))
    distinct = dist > 0

    horizontal = np.where(distinct & (np.abs(dy) <= cone * np.abs(dx)), dist, np.inf).min(axis=1)
    vertical = np.where(distinct & (np.abs(dx) <= cone * np.abs(dy)), dist, np.inf).min(axis=1)
    h_found = horizontal[np.isfinite(horizontal)]
    v_found = vertical[np.isfinite(vertical)]
    if len(h_found) < 2 or len(v_found) < 2:
        raise DegenerateLatticeError(
            f"too few axial neighbours ({len(h_found)} horizontal, {len(v_found)} vertical)"
        )
    return float(_lower_median(list(h_found))), float(_lower_median(list(v_found)))


def link_joints(joints: Sequence[JointDetection], texel_w: float, texel_h: float, cfg: DetectorConfig = DetectorConfig()) -> Lattice:
    """Link axial neighbours one texel apart; joints left without edges are dropped."""
    if not (texel_w > 0 and texel_h > 0):
        raise ParameterError(f"texel dims must be > 0, got {texel_w}x{texel_h}")
    if len(joints) == 0:
        return Lattice((), texel_w, texel_h, ())
    tol = cfg.link_tolerance
    xy = np.array([(j.x, j.y) for j in joints])
    dx = np.abs(xy[None, :, 0] - xy[:, None, 0])
    dy = np.abs(xy[None, :, 1] - xy[:, None, 1])
    horizontal = (np.abs(dx - texel_w) <= tol * texel_w) & (dy <= tol * texel_h)
    vertical = (np.abs(dy - texel_h) <= tol * texel_h) & (dx <= tol * texel_w)
    linked = np.triu(horizontal | vertical, k=1)

    pairs = np.argwhere(linked)
    used = np.unique(pairs.ravel())
    remap = {int(old): new for new, old in enumerate(used)}
    kept = tuple(joints[i] for i in used)
    edges = tuple(sorted((remap[int(a)], remap[int(b)]) for a, b in pairs))
    dropped = len(joints) - len(kept)
    if dropped:
        logger.debug("dropped %d unlinked joints", dropped)
    return Lattice(kept, float(texel_w), float(texel_h), edges)


def line_pixels(x0: int, y0: int, x1: int, y1: int) -> List[Tuple[int, int]]:
    """Bresenham rasterisation, endpoints included."""
    pixels = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pixels.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pixels
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def disc(radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1)
    return (offsets[:, None] ** 2 + offsets[None, :] ** 2) <= radius * radius


def _rounded(v: float) -> int:
    return int(math.floor(v + 0.5))


def render_mask(lattice: Lattice, width: int, height: int, bar_width: int) -> BinaryMask:
    """Rasterise every edge and dilate it with a disc of radius floor(bar_width / 2)."""
    if bar_width < 1:
        raise ParameterError(f"bar_width must be >= 1, got {bar_width}")
    r = bar_width // 2
    canvas = np.zeros((height + 2 * r, width + 2 * r), dtype=bool)
    for a, b in lattice.edges:
        ja, jb = lattice.joints[a], lattice.joints[b]
        for x, y in line_pixels(_rounded(ja.x) + r, _rounded(ja.y) + r, _rounded(jb.x) + r, _rounded(jb.y) + r):
            if 0 <= x < canvas.shape[1] and 0 <= y < canvas.shape[0]:
                canvas[y, x] = True
    if r > 0 and canvas.any():
        canvas = ndimage.binary_dilation(canvas, structure=disc(r))
    return BinaryMask(canvas[r:r + height, r:r + width])


def default_bar_width(texel_w: float) -> int:
    return max(2, _rounded(texel_w / 8.0))


def detect_lattice(img: GrayImage, model, cfg: DetectorConfig = DetectorConfig(), hog_params: HogParams = DEFAULT_PARAMS) -> LatticeResult:
    """Full detection pipeline from an image to a fence mask."""
    detections = detect_joints(img, model, cfg, hog_params)
    first = suppress(detections, cfg.dominance_radius_factor * window_size(model))
    empty_mask = BinaryMask.zeros(img.width, img.height)
    try:
        texel_w, texel_h = estimate_texel(first)
    except DegenerateLatticeError as exc:
        logger.warning("no lattice found: %s", exc)
        return LatticeResult(detections, first, Lattice(tuple(first), 0.0, 0.0, ()), empty_mask, True)

    kept = suppress(detections, cfg.dominance_radius_factor * min(texel_w, texel_h))
    lattice = link_joints(kept, texel_w, texel_h, cfg)
    if not lattice.joints:
        logger.warning("no joints could be linked into a lattice")
        return LatticeResult(detections, kept, lattice, empty_mask, True)
    if 2 * len(lattice.joints) < len(kept):
        logger.warning(
            "only %d of %d joints linked along image axes; lattice may be non-axial",
            len(lattice.joints), len(kept),
        )
    bar_width = cfg.bar_width or default_bar_width(texel_w)
    mask = render_mask(lattice, img.width, img.height, bar_width)
    logger.info(
        "lattice: %d joints, %d edges, texel %.1fx%.1f, bar width %d",
        len(lattice.joints), len(lattice.edges), texel_w, texel_h, bar_width,
    )
    return LatticeResult(detections, kept, lattice, mask, False, bar_width)


# ============================================================================
# TEXT FORMAT
# ============================================================================

def save_detections(joints: Sequence[JointDetection], path: Union[str, Path]) -> None:
    """One line "x y scale score" per joint."""
    with atomic_output(path) as tmp:
        with tmp.open("w", encoding="utf-8") as fh:
            for j in joints:
                fh.write(f"{j.x:.6f} {j.y:.6f} {j.scale:.6f} {j.score:.6f}\n")


def load_detections(path: Union[str, Path]) -> List[JointDetection]:
    joints = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (2, 4):
            raise ParameterError(f"{path}:{number}: expected 'x y' or 'x y scale score'")
        values = [float(p) for p in parts]
        joints.append(JointDetection(*values) if len(values) == 4 else JointDetection(values[0], values[1]))
    return joints
