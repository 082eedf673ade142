"""
Quality metrics and a synthetic fenced-scene generator.

Metrics:
- rmse / psnr (peak 255; identical images give psnr = +inf)
- ssim: single-scale, 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
  K2 = 0.03, dynamic range 255, averaged over valid window positions
- score_detections / score_mask: precision, recall, F-measure (and IoU)

Scenes: a static fence lattice over a background that shifts from frame to
frame. Everything the pipeline estimates (masks, joints, shifts, the
unoccluded background) is known exactly, so every stage can be scored.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal

from core.classifier import TexelSample
from core.errors import DimensionError, ParameterError
from core.imagecore import (
    BinaryMask,
    GrayImage,
    atomic_output,
    check_same_shape,
    gaussian_kernel,
    load_gray,
    load_mask,
    save_gray,
    save_mask,
    smooth_array,
)
from core.lattice import JointDetection, Lattice, render_mask
from core.motion import AffineTransform

logger = logging.getLogger(__name__)

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_OVERLAP = 0.5

Point = Tuple[float, float]


# ============================================================================
# IMAGE METRICS
# ============================================================================

def rmse(a: GrayImage, b: GrayImage, mask: Optional[BinaryMask] = None) -> float:
    """Root mean squared difference, optionally restricted to mask pixels."""
    check_same_shape(a, b, "images")
    diff = a.data - b.data
    if mask is not None:
        check_same_shape(a, mask, "image and mask")
        selected = mask.data.astype(bool)
        if not selected.any():
            return 0.0
        diff = diff[selected]
    return float(np.sqrt(np.mean(diff * diff)))


def psnr_from_rmse(error: float) -> float:
    if error == 0:
        return math.inf
    return 20.0 * math.log10(PEAK / error)


def psnr(a: GrayImage, b: GrayImage) -> float:
    return psnr_from_rmse(rmse(a, b))


def ssim_window() -> np.ndarray:
    g = gaussian_kernel(SSIM_SIGMA)
    radius = (len(g) - SSIM_WINDOW) // 2
    g = g[radius:radius + SSIM_WINDOW] if radius > 0 else g
    g = g / g.sum()
    return np.outer(g, g)


def ssim(a: GrayImage, b: GrayImage) -> float:
    check_same_shape(a, b, "images")
    if a.width < SSIM_WINDOW or a.height < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.width}x{a.height}")
    window = ssim_window()
    x, y = a.data, b.data

    def filt(img: np.ndarray) -> np.ndarray:
        return signal.correlate2d(img, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


# ============================================================================
# DETECTION METRICS
# ============================================================================

@dataclass(frozen=True)
class DetectionScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_measure: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "DetectionScore":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(int(tp), int(fp), int(fn), precision, recall, f)


def _xy(points) -> np.ndarray:
    rows = [(p.x, p.y) if hasattr(p, "x") else (p[0], p[1]) for p in points]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def score_detections(pred_joints, gt_joints, match_radius: float = 5.0) -> DetectionScore:
    """Greedy one-to-one matching, nearest pairs first (ties by coordinates)."""
    if not match_radius > 0:
        raise ParameterError(f"match_radius must be > 0, got {match_radius}")
    pred, gt = _xy(pred_joints), _xy(gt_joints)
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            d = float(np.hypot(*(p - g)))
            if d <= match_radius:
                pairs.append((d, p[0], p[1], g[0], g[1], i, j))
    pairs.sort(key=lambda item: item[:5])
    used_pred, used_gt = set(), set()
    for *_, i, j in pairs:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
    tp = len(used_pred)
    return DetectionScore.from_counts(tp, len(pred) - tp, len(gt) - tp)


def score_mask(pred: BinaryMask, gt: BinaryMask) -> Tuple[DetectionScore, float]:
    """Pixel-level counts and IoU (two empty masks give IoU 1)."""
    check_same_shape(pred, gt, "masks")
    p, g = pred.data.astype(bool), gt.data.astype(bool)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    return DetectionScore.from_counts(tp, fp, fn), iou


def detectable(joints, width: int, height: int, window: int = 30) -> List[Point]:
    """Joints whose centred window lies inside the image."""
    half = window // 2
    return [
        (x, y) for x, y in _xy(joints)
        if half <= x <= width - window + half and half <= y <= height - window + half
    ]


# ============================================================================
# SYNTHETIC SCENES
# ============================================================================

@dataclass(frozen=True)
class FenceSpec:
    spacing: int = 20
    bar_width: int = 2
    angle: float = 0.0
    intensity: float = 230.0
    offset: int = 10

    def __post_init__(self) -> None:
        if self.spacing <= self.bar_width:
            raise ParameterError(f"spacing {self.spacing} must exceed bar_width {self.bar_width}")
        if self.bar_width < 1:
            raise ParameterError(f"bar_width must be >= 1, got {self.bar_width}")
        if not 0.0 <= self.intensity <= 255.0:
            raise ParameterError(f"fence intensity must be in [0, 255], got {self.intensity}")


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    ground_truth: GrayImage
    fence_spec: FenceSpec
    shifts: Tuple[Tuple[int, int], ...]
    noise_sigma: float
    seed: int
    frames: List[GrayImage]
    fence_masks: List[BinaryMask]
    joint_coords: List[List[Point]]
    lattice: Optional[Lattice] = None

    @property
    def width(self) -> int:
        return self.ground_truth.width

    @property
    def height(self) -> int:
        return self.ground_truth.height


def make_background(width: int, height: int, seed: int = 0) -> GrayImage:
    """Piecewise-smooth texture: a gentle ramp with flat discs, lightly blurred."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    data = 80.0 + 60.0 * xs / max(width - 1, 1) + 30.0 * ys / max(height - 1, 1)
    for _ in range(max(4, width * height // 300)):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        radius = rng.uniform(6.0, 16.0)
        value = rng.uniform(30.0, 220.0)
        data[(xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius] = value
    return GrayImage(np.clip(smooth_array(data, 1.0), 0.0, 255.0))


def ideal_lattice(spec: FenceSpec, width: int, height: int) -> Lattice:
    """Regular joint grid at spec.offset + k * spacing, rotated by spec.angle about the image centre.

    The grid overhangs the image by a texel on every side so bars reach the borders.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    theta = math.radians(spec.angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    reach = math.hypot(width, height)
    k_lo = int(math.floor((-reach - spec.offset) / spec.spacing))
    k_hi = int(math.ceil((reach - spec.offset) / spec.spacing))
    ks = range(k_lo, k_hi + 1)
    margin = spec.spacing

    index: Dict[Tuple[int, int], int] = {}
    joints: List[JointDetection] = []
    for j in ks:
        for i in ks:
            u, v = spec.offset + i * spec.spacing - cx, spec.offset + j * spec.spacing - cy
            x, y = cx + cos_t * u - sin_t * v, cy + sin_t * u + cos_t * v
            if -margin <= x <= width - 1 + margin and -margin <= y <= height - 1 + margin:
                index[(i, j)] = len(joints)
                joints.append(JointDetection(x, y, 1.0, 1.0))
    edges = []
    for (i, j), a in index.items():
        for neighbour in ((i + 1, j), (i, j + 1)):
            b = index.get(neighbour)
            if b is not None:
                edges.append((min(a, b), max(a, b)))
    return Lattice(tuple(joints), float(spec.spacing), float(spec.spacing), tuple(sorted(edges)))


def fence_mask(spec: FenceSpec, width: int, height: int) -> BinaryMask:
    return render_mask(ideal_lattice(spec, width, height), width, height, spec.bar_width)


def shift_image(data: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """out(x, y) = data(x - dx, y - dy) with replicated borders."""
    height, width = data.shape
    cols = np.clip(np.arange(width) - dx, 0, width - 1)
    rows = np.clip(np.arange(height) - dy, 0, height - 1)
    return data[np.ix_(rows, cols)]


def generate_scene(
    ground_truth: GrayImage,
    fence_spec: FenceSpec,
    shifts: Sequence[Tuple[int, int]],
    noise_sigma: float = 1.0,
    seed: int = 0,
) -> SyntheticScene:
    """Render one frame per shift: shifted background, static fence, seeded noise, clamp."""
    width, height = ground_truth.width, ground_truth.height
    if not shifts:
        raise ParameterError("at least one shift is required")
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    for dx, dy in shifts:
        overlap = max(width - abs(dx), 0) * max(height - abs(dy), 0) / (width * height)
        if overlap < MIN_OVERLAP:
            raise ParameterError(f"shift ({dx},{dy}) leaves {overlap:.0%} overlap, need at least {MIN_OVERLAP:.0%}")

    lattice = ideal_lattice(fence_spec, width, height)
    mask = render_mask(lattice, width, height, fence_spec.bar_width)
    fence = mask.data.astype(bool)
    joints = [(j.x, j.y) for j in lattice.joints if 0 <= j.x <= width - 1 and 0 <= j.y <= height - 1]
    rng = np.random.default_rng(seed)

    frames: List[GrayImage] = []
    for dx, dy in shifts:
        data = np.where(fence, fence_spec.intensity, shift_image(ground_truth.data, int(dx), int(dy)))
        if noise_sigma > 0:
            data = data + rng.normal(0.0, noise_sigma, size=data.shape)
        frames.append(GrayImage(np.clip(data, 0.0, 255.0)))
    logger.info("generated %d frames of %dx%d, fence density %.3f", len(frames), width, height, fence.mean())
    return SyntheticScene(
        ground_truth=ground_truth,
        fence_spec=fence_spec,
        shifts=tuple((int(dx), int(dy)) for dx, dy in shifts),
        noise_sigma=float(noise_sigma),
        seed=int(seed),
        frames=frames,
        fence_masks=[mask] * len(frames),
        joint_coords=[list(joints) for _ in frames],
        lattice=lattice,
    )


def scene_transforms(scene: SyntheticScene, reference: int = 0) -> List[AffineTransform]:
    """Exact frame -> reference transforms implied by the scene's shifts."""
    rx, ry = scene.shifts[reference]
    return [AffineTransform.translation(rx - dx, ry - dy) for dx, dy in scene.shifts]


def reference_truth(scene: SyntheticScene, reference: int = 0) -> GrayImage:
    """Unoccluded background as seen by the reference frame."""
    dx, dy = scene.shifts[reference]
    return GrayImage(shift_image(scene.ground_truth.data, dx, dy))


def coverage_fraction(scene: SyntheticScene, reference: int = 0) -> float:
    """Fraction of reference pixels observed by at least one frame."""
    from core.fusion import coverage_stats, register_observations

    _, visible = register_observations(scene.frames, scene.fence_masks, scene_transforms(scene, reference))
    return 1.0 - coverage_stats(visible)


NEGATIVE_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1), (2, 0), (0, 2), (2, 2), (1, 1), (-1, -1), (1, -1), (-1, 1))


def crop_training_patches(
    scene: SyntheticScene,
    size: int = 30,
    seed: int = 0,
    negatives_per_joint: int = 3,
) -> List[TexelSample]:
    """Positives centred on joints (+-1 px jitter); negatives off-joint.

    Negatives sit at quarter/half-texel offsets from joints (along bars and at
    texel centres) and at random positions at least a quarter texel from every joint.
    """
    rng = np.random.default_rng(seed)
    quarter = max(scene.fence_spec.spacing / 4.0, 2.0)
    half = size // 2
    samples: List[TexelSample] = []

    def crop_at(frame: GrayImage, cx: float, cy: float) -> Optional[GrayImage]:
        x0 = int(math.floor(cx + 0.5)) - half
        y0 = int(math.floor(cy + 0.5)) - half
        if x0 < 0 or y0 < 0 or x0 + size > frame.width or y0 + size > frame.height:
            return None
        return frame.crop(x0, y0, size, size)

    for frame, joints in zip(scene.frames, scene.joint_coords):
        if not joints:
            continue
        xy = np.array(joints)
        for jx, jy in joints:
            jitter = rng.integers(-1, 2, size=2)
            patch = crop_at(frame, jx + jitter[0], jy + jitter[1])
            if patch is not None:
                samples.append(TexelSample(patch, 1))
            picks = rng.choice(len(NEGATIVE_OFFSETS), size=min(negatives_per_joint, len(NEGATIVE_OFFSETS)), replace=False)
            for k in picks:
                ox, oy = NEGATIVE_OFFSETS[k]
                patch = crop_at(frame, jx + ox * quarter, jy + oy * quarter)
                if patch is not None:
                    samples.append(TexelSample(patch, -1))
        for _ in range(len(joints)):
            cx = rng.uniform(half, frame.width - half)
            cy = rng.uniform(half, frame.height - half)
            if np.min(np.hypot(xy[:, 0] - cx, xy[:, 1] - cy)) < quarter:
                continue
            patch = crop_at(frame, cx, cy)
            if patch is not None:
                samples.append(TexelSample(patch, -1))
    positives = sum(1 for s in samples if s.label == 1)
    logger.info("cropped %d positive and %d negative patches", positives, len(samples) - positives)
    return samples


# ============================================================================
# SCENE BUNDLES
# ============================================================================

def _format_scene_cfg(scene: SyntheticScene) -> str:
    spec = scene.fence_spec
    values = {
        "width": scene.width,
        "height": scene.height,
        "spacing": spec.spacing,
        "bar_width": spec.bar_width,
        "angle": spec.angle,
        "intensity": spec.intensity,
        "offset": spec.offset,
        "shifts": ";".join(f"{dx},{dy}" for dx, dy in scene.shifts),
        "sigma": scene.noise_sigma,
        "seed": scene.seed,
    }
    return "".join(f"{key}={value}\n" for key, value in values.items())


def _write_text(path: Path, text: str) -> None:
    with atomic_output(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def save_joints(joints: Sequence[Point], path: Union[str, Path]) -> None:
    _write_text(Path(path), "".join(f"{x:.6f} {y:.6f}\n" for x, y in joints))


def load_joints(path: Union[str, Path]) -> List[Point]:
    joints = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if parts:
            joints.append((float(parts[0]), float(parts[1])))
    return joints


def save_scene(scene: SyntheticScene, directory: Union[str, Path]) -> Path:
    """Write frame_NN.pgm, mask_NN.pgm, joints_NN.txt, truth.pgm and scene.cfg."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, (frame, mask, joints) in enumerate(zip(scene.frames, scene.fence_masks, scene.joint_coords)):
        save_gray(frame, directory / f"frame_{m:02d}.pgm")
        save_mask(mask, directory / f"mask_{m:02d}.pgm")
        save_joints(joints, directory / f"joints_{m:02d}.txt")
    save_gray(scene.ground_truth, directory / "truth.pgm")
    _write_text(directory / "scene.cfg", _format_scene_cfg(scene))
    logger.info("wrote scene bundle to %s", directory)
    return directory


def read_scene_cfg(path: Union[str, Path]) -> Dict[str, str]:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def load_scene(directory: Union[str, Path]) -> SyntheticScene:
    """Read a bundle back; frames carry their 8-bit on-disk values."""
    directory = Path(directory)
    cfg = read_scene_cfg(directory / "scene.cfg")
    frame_paths = sorted(directory.glob("frame_*.pgm"))
    if not frame_paths:
        raise FileNotFoundError(f"no frame_*.pgm files in {directory}")
    frames, masks, joints = [], [], []
    for path in frame_paths:
        suffix = path.stem.split("_", 1)[1]
        frames.append(load_gray(path))
        masks.append(load_mask(directory / f"mask_{suffix}.pgm"))
        joint_path = directory / f"joints_{suffix}.txt"
        joints.append(load_joints(joint_path) if joint_path.exists() else [])
    spec = FenceSpec(
        spacing=int(cfg.get("spacing", 20)),
        bar_width=int(cfg.get("bar_width", 2)),
        angle=float(cfg.get("angle", 0.0)),
        intensity=float(cfg.get("intensity", 230.0)),
        offset=int(cfg.get("offset", 10)),
    )
    shifts = tuple(
        (int(dx), int(dy))
        for dx, dy in (chunk.split(",") for chunk in cfg.get("shifts", "0,0").split(";") if chunk.strip())
    )
    return SyntheticScene(
        ground_truth=load_gray(directory / "truth.pgm"),
        fence_spec=spec,
        shifts=shifts,
        noise_sigma=float(cfg.get("sigma", 0.0)),
        seed=int(cfg.get("seed", 0)),
        frames=frames,
        fence_masks=masks,
        joint_coords=joints,
    )
