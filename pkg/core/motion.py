"""
Frame registration.

Transforms map frame coordinates into reference coordinates:
    reference_point = A @ frame_point + B
so warp_affine(frame, t) resamples a frame onto the reference grid.

Two registration modes:
- global: exhaustive integer-shift search maximising NCC of the overlap
- affine: Harris corners on the reference, NCC patch matching into the
  frame, RANSAC over 3-point affine fits, least-squares refit on consensus

Fence pixels are pre-filled by an iterated 5x5 median of visible neighbours
before any of this, so the static fence does not drive the match.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from core.errors import (
    DegenerateFitError,
    DegenerateInputError,
    DegenerateTransformError,
    DimensionError,
    NoModelError,
    ParameterError,
    RegistrationError,
)
from core.imagecore import BinaryMask, GrayImage, atomic_output, check_same_shape, smooth_array, sobel_components

logger = logging.getLogger(__name__)

HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
HARRIS_RELATIVE_FLOOR = 0.01
MIN_NCC = 0.7
MIN_OVERLAP = 0.25
MAX_CONDITION = 1e10
PREFILL_WINDOW = 5

Point = Tuple[float, float]


@dataclass(frozen=True)
class AffineTransform:
    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    b1: float = 0.0
    b2: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def translation(cls, dx: float, dy: float) -> "AffineTransform":
        return cls(b1=float(dx), b2=float(dy))

    @classmethod
    def from_matrix(cls, A: np.ndarray, B: Sequence[float]) -> "AffineTransform":
        return cls(float(A[0, 0]), float(A[0, 1]), float(A[1, 0]), float(A[1, 1]), float(B[0]), float(B[1]))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.b1, self.b2])

    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def inverse(self) -> "AffineTransform":
        det = self.determinant()
        if abs(det) <= 1e-9:
            raise DegenerateTransformError(f"transform is singular (det={det:.3g})")
        inv = np.array([[self.a22, -self.a12], [-self.a21, self.a11]]) / det
        return AffineTransform.from_matrix(inv, -inv @ self.offset)

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self after other: p -> self(other(p))."""
        A = self.matrix @ other.matrix
        return AffineTransform.from_matrix(A, self.matrix @ other.offset + self.offset)

    def apply(self, x: float, y: float) -> Point:
        return (self.a11 * x + self.a12 * y + self.b1, self.a21 * x + self.a22 * y + self.b2)

    def apply_arrays(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (self.a11 * xs + self.a12 * ys + self.b1, self.a21 * xs + self.a22 * ys + self.b2)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return points @ self.matrix.T + self.offset


@dataclass(frozen=True)
class Correspondence:
    p1: Point
    p2: Point
    score: float


@dataclass(frozen=True)
class RegistrationParams:
    mode: str = "global"
    max_shift: int = 16
    corner_count: int = 200
    min_distance: int = 5
    patch_size: int = 11
    search_radius: int = 8
    ransac_threshold: float = 2.0
    ransac_iterations: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("global", "affine"):
            raise ParameterError(f"unknown registration mode {self.mode!r}")


# ============================================================================
# CORNERS
# ============================================================================

def harris_response(img: GrayImage, k: float = HARRIS_K, sigma: float = HARRIS_SIGMA) -> np.ndarray:
    gx, gy = sobel_components(img)
    sxx = smooth_array(gx * gx, sigma)
    syy = smooth_array(gy * gy, sigma)
    sxy = smooth_array(gx * gy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_corners(img: GrayImage, max_count: int = 200, min_distance: int = 5) -> List[Tuple[int, int]]:
    """Strongest Harris corners as (x, y), at least `min_distance` apart."""
    if img.width < 7 or img.height < 7:
        raise DimensionError(f"corner detection needs at least 7x7 pixels, got {img.width}x{img.height}")
    response = harris_response(img)
    peak = float(response.max())
    if peak <= 0:
        return []
    size = 2 * min_distance + 1
    local_max = ndimage.maximum_filter(response, size=size, mode="nearest") == response
    candidates = local_max & (response > 0) & (response >= HARRIS_RELATIVE_FLOOR * peak)
    border = 3
    candidates[:border, :] = False
    candidates[-border:, :] = False
    candidates[:, :border] = False
    candidates[:, -border:] = False

    ys, xs = np.nonzero(candidates)
    order = np.lexsort((xs, ys, -response[ys, xs]))
    accepted: List[Tuple[int, int]] = []
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if all((x - ax) ** 2 + (y - ay) ** 2 >= min_distance ** 2 for ax, ay in accepted):
            accepted.append((x, y))
            if len(accepted) == max_count:
                break
    return accepted


# ============================================================================
# MATCHING
# ============================================================================

def _ncc_against(template: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """NCC of one template against a stack of windows (..., p, p); NaN windows and flat windows give -inf."""
    t = template - template.mean()
    t_norm = np.sqrt(np.sum(t * t))
    means = windows.mean(axis=(-2, -1), keepdims=True)
    centered = windows - means
    w_norm = np.sqrt(np.sum(centered * centered, axis=(-2, -1)))
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.sum(centered * t, axis=(-2, -1)) / (w_norm * t_norm)
    ncc[~np.isfinite(ncc) | (w_norm < 1e-12)] = -np.inf
    return ncc


def _parabola_peak(left: float, center: float, right: float) -> float:
    if not (np.isfinite(left) and np.isfinite(right)):
        return 0.0
    denom = left - 2.0 * center + right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def match_patches(
    img1: GrayImage,
    img2: GrayImage,
    points: Sequence[Tuple[int, int]],
    patch: int = 11,
    search_radius: int = 8,
) -> List[Correspondence]:
    """NCC block matching of img1 patches around `points` into img2."""
    if patch < 5 or patch % 2 == 0:
        raise ParameterError(f"patch must be odd and >= 5, got {patch}")
    half = patch // 2
    r = search_radius
    pad = r + half
    padded = np.pad(img2.data, pad, mode="constant", constant_values=np.nan)
    windows = sliding_window_view(padded, (patch, patch))
    offsets = np.arange(-r, r + 1)
    dy_grid, dx_grid = np.meshgrid(offsets, offsets, indexing="ij")
    penalty = dx_grid ** 2 + dy_grid ** 2

    matches: List[Correspondence] = []
    for px, py in points:
        px, py = int(round(px)), int(round(py))
        if px - half < 0 or py - half < 0 or px + half >= img1.width or py + half >= img1.height:
            continue
        template = img1.data[py - half:py + half + 1, px - half:px + half + 1]
        if template.std() < 1e-12:
            continue
        ncc = _ncc_against(template, windows[py:py + 2 * r + 1, px:px + 2 * r + 1])
        best = ncc.max()
        if not np.isfinite(best) or best < MIN_NCC:
            continue
        ties = np.flatnonzero(ncc.ravel() == best)
        flat = min(ties, key=lambda t: (penalty.flat[t], dy_grid.flat[t], dx_grid.flat[t]))
        iy, ix = np.unravel_index(flat, ncc.shape)
        sx = _parabola_peak(ncc[iy, ix - 1], best, ncc[iy, ix + 1]) if 0 < ix < 2 * r else 0.0
        sy = _parabola_peak(ncc[iy - 1, ix], best, ncc[iy + 1, ix]) if 0 < iy < 2 * r else 0.0
        dx, dy = ix - r + sx, iy - r + sy
        matches.append(Correspondence((float(px), float(py)), (px + dx, py + dy), float(best)))
    return matches


# ============================================================================
# FITTING
# ============================================================================

def _points(matches: Sequence[Correspondence]) -> Tuple[np.ndarray, np.ndarray]:
    P = np.array([m.p1 for m in matches], dtype=np.float64).reshape(-1, 2)
    Q = np.array([m.p2 for m in matches], dtype=np.float64).reshape(-1, 2)
    return P, Q


def _fit(P: np.ndarray, Q: np.ndarray) -> AffineTransform:
    if len(P) < 3:
        raise DegenerateFitError(f"affine fit needs at least 3 matches, got {len(P)}")
    p_mean, q_mean = P.mean(axis=0), Q.mean(axis=0)
    X, Y = P - p_mean, Q - q_mean
    M = X.T @ X
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateFitError("source points are collinear")
    A = np.linalg.solve(M, X.T @ Y).T
    return AffineTransform.from_matrix(A, q_mean - A @ p_mean)


def fit_affine_lsq(matches: Sequence[Correspondence]) -> AffineTransform:
    """Least-squares affine map taking every p1 onto its p2."""
    return _fit(*_points(matches))


def transfer_errors(t: AffineTransform, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.linalg.norm(t.apply_points(P) - Q, axis=1)


def fit_affine_ransac(
    matches: Sequence[Correspondence],
    inlier_threshold: float = 2.0,
    iterations: int = 500,
    seed: int = 0,
) -> Tuple[AffineTransform, List[int]]:
    """3-point hypothesize-and-verify, then a least-squares refit on the consensus.

    Reported inliers are those of the returned model.
    """
    P, Q = _points(matches)
    n = len(P)
    if n < 3:
        raise NoModelError(f"RANSAC needs at least 3 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_model: Optional[AffineTransform] = None
    best_inliers = np.zeros(n, dtype=bool)
    for _ in range(iterations):
        sample = rng.choice(n, size=3, replace=False)
        try:
            model = _fit(P[sample], Q[sample])
        except DegenerateFitError:
            continue
        inliers = transfer_errors(model, P, Q) <= inlier_threshold
        if inliers.sum() > best_inliers.sum():
            best_model, best_inliers = model, inliers
    if best_model is None or best_inliers.sum() < 3:
        raise NoModelError("no consensus set of at least 3 matches")

    try:
        refit = _fit(P[best_inliers], Q[best_inliers])
        refit_inliers = transfer_errors(refit, P, Q) <= inlier_threshold
        if refit_inliers.sum() >= best_inliers.sum():
            best_model, best_inliers = refit, refit_inliers
    except DegenerateFitError:
        pass
    logger.debug("RANSAC kept %d of %d matches", int(best_inliers.sum()), n)
    return best_model, [int(i) for i in np.flatnonzero(best_inliers)]


# ============================================================================
# GLOBAL SHIFT
# ============================================================================

def _overlap_ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom < 1e-12:
        return -np.inf
    return float(np.sum(a * b) / denom)


def estimate_global_shift(img1: GrayImage, img2: GrayImage, max_shift: int = 16) -> Tuple[int, int]:
    """Integer (dx, dy) with img2(x, y) ~ img1(x - dx, y - dy), chosen by overlap NCC.

    Ties go to the smaller shift, then row-major order. Shifts whose overlap is
    under a quarter of the image are skipped.
    """
    check_same_shape(img1, img2, "images")
    height, width = img1.shape
    best_key = None
    best = (0, 0)
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            w, h = width - abs(dx), height - abs(dy)
            if w <= 0 or h <= 0 or w * h < MIN_OVERLAP * width * height:
                continue
            x1, y1 = max(0, -dx), max(0, -dy)
            a = img1.data[y1:y1 + h, x1:x1 + w]
            b = img2.data[y1 + dy:y1 + dy + h, x1 + dx:x1 + dx + w]
            score = _overlap_ncc(a, b)
            if not np.isfinite(score):
                continue
            key = (-score, dx * dx + dy * dy, dy, dx)
            if best_key is None or key < best_key:
                best_key, best = key, (dx, dy)
    return best


# ============================================================================
# REGISTRATION
# ============================================================================

def median_prefill(img: GrayImage, fence_mask: BinaryMask) -> GrayImage:
    """Fill fence pixels with the median of visible 5x5 neighbours, repeating until none is left."""
    check_same_shape(img, fence_mask, "image and mask")
    data = img.data.copy()
    unknown = fence_mask.data.astype(bool).copy()
    if unknown.all():
        raise DegenerateInputError("mask covers the whole image, nothing is visible")
    half = PREFILL_WINDOW // 2
    footprint = np.ones((PREFILL_WINDOW, PREFILL_WINDOW))
    while unknown.any():
        known = ~unknown
        counts = ndimage.correlate(known.astype(np.float64), footprint, mode="constant")
        todo = unknown & (counts > 0)
        source = np.where(known, data, np.nan)
        padded = np.pad(source, half, mode="constant", constant_values=np.nan)
        windows = sliding_window_view(padded, (PREFILL_WINDOW, PREFILL_WINDOW))
        ys, xs = np.nonzero(todo)
        data[ys, xs] = np.nanmedian(windows[ys, xs].reshape(len(ys), -1), axis=1)
        unknown[ys, xs] = False
    return GrayImage(data)


def _register_one(reference: GrayImage, frame: GrayImage, params: RegistrationParams) -> AffineTransform:
    if params.mode == "global":
        dx, dy = estimate_global_shift(reference, frame, params.max_shift)
        return AffineTransform.translation(-dx, -dy)
    corners = detect_corners(reference, params.corner_count, params.min_distance)
    matches = match_patches(reference, frame, corners, params.patch_size, params.search_radius)
    forward, _ = fit_affine_ransac(matches, params.ransac_threshold, params.ransac_iterations, params.seed)
    return forward.inverse()


def register_frames(
    frames: Sequence[GrayImage],
    masks: Sequence[BinaryMask],
    reference: int = 0,
    params: Optional[RegistrationParams] = None,
) -> List[AffineTransform]:
    """Transform of every frame into reference coordinates (identity for the reference)."""
    params = params or RegistrationParams()
    if len(frames) != len(masks):
        raise DimensionError(f"{len(frames)} frames but {len(masks)} masks")
    if not 0 <= reference < len(frames):
        raise ParameterError(f"reference index {reference} out of range for {len(frames)} frames")

    filled: List[GrayImage] = []
    for i, (frame, mask) in enumerate(zip(frames, masks)):
        try:
            filled.append(median_prefill(frame, mask))
        except (DegenerateInputError, DimensionError) as exc:
            raise RegistrationError(i, str(exc), exc) from exc

    transforms: List[AffineTransform] = []
    for i, frame in enumerate(filled):
        if i == reference:
            transforms.append(AffineTransform.identity())
            continue
        try:
            t = _register_one(filled[reference], frame, params)
        except (DegenerateFitError, NoModelError, DegenerateTransformError) as exc:
            raise RegistrationError(i, str(exc), exc) from exc
        logger.info("frame %d -> reference: offset (%.3f, %.3f)", i, t.b1, t.b2)
        transforms.append(t)
    return transforms


# ============================================================================
# TEXT FORMAT
# ============================================================================

def save_transforms(transforms: Sequence[AffineTransform], path: Union[str, Path]) -> None:
    """One line "a11 a12 a21 a22 b1 b2" per frame."""
    with atomic_output(path) as tmp:
        with tmp.open("w", encoding="utf-8") as fh:
            for t in transforms:
                fh.write(" ".join(f"{v:.17g}" for v in (t.a11, t.a12, t.a21, t.a22, t.b1, t.b2)) + "\n")


def load_transforms(path: Union[str, Path]) -> List[AffineTransform]:
    transforms = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ParameterError(f"{path}:{number}: expected 6 values, got {len(parts)}")
        transforms.append(AffineTransform(*(float(p) for p in parts)))
    return transforms
