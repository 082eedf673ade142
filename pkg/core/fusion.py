"""
Multi-frame de-fencing as MAP inference on a 4-connected MRF.

Energy of a labeling f (labels are intensities 0..L-1):

    E(f) = sum_p D_p(f_p) + lam * sum_{p~q} |f_p - f_q|
    D_p(f) = sum_m v_m(p) * (f - y_m(p))^2

where y_m is frame m warped into reference coordinates and v_m its
visibility (not fence and inside the warped field of view). Pixels seen by no
frame get D_p = 0 and are filled in by the smoothness term alone.

Min-sum loopy belief propagation minimises E. Messages for the linear
smoothness cost are computed in O(L) with a two-pass lower envelope and
normalised to a zero minimum after every update.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from core.errors import CapacityError, DegenerateInputError, DimensionError, ParameterError
from core.imagecore import BinaryMask, GrayImage, check_same_shape, warp_affine, warp_array
from core.motion import AffineTransform

logger = logging.getLogger(__name__)

SCHEDULES = ("synchronous", "checkerboard")
BRUTE_FORCE_BITS = 20


@dataclass(frozen=True)
class EnergyParams:
    lam: float = 10.0
    labels: int = 256
    iterations: int = 40
    schedule: str = "checkerboard"
    keep_reference: bool = False

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.labels < 2:
            raise ParameterError(f"labels must be >= 2, got {self.labels}")
        if self.iterations < 1:
            raise ParameterError(f"iterations must be >= 1, got {self.iterations}")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")


@dataclass(frozen=True, eq=False)
class CostField:
    """Data costs (H, W, L) and the number of frames observing each pixel (H, W)."""

    costs: np.ndarray
    counts: np.ndarray

    @property
    def height(self) -> int:
        return int(self.costs.shape[0])

    @property
    def width(self) -> int:
        return int(self.costs.shape[1])

    @property
    def labels(self) -> int:
        return int(self.costs.shape[2])


@dataclass(frozen=True, eq=False)
class DefenceResult:
    image: GrayImage
    labeling: np.ndarray
    costs: CostField
    visibility: List[BinaryMask]
    energy_initial: float
    energy_final: float
    uncovered: float


# ============================================================================
# COSTS
# ============================================================================

def build_data_cost(frames: Sequence[GrayImage], visibility: Sequence[BinaryMask], labels: int = 256) -> CostField:
    """D_p(f) = sum over frames of visible * (f - y)^2 (visibility 1 = observed)."""
    if len(frames) != len(visibility):
        raise DimensionError(f"{len(frames)} frames but {len(visibility)} visibility masks")
    if not frames:
        raise DimensionError("at least one frame is required")
    for frame, mask in zip(frames, visibility):
        check_same_shape(frames[0], frame, "frames")
        check_same_shape(frame, mask, "frame and visibility mask")
    f = np.arange(labels, dtype=np.float64)
    costs = np.zeros(frames[0].shape + (labels,))
    counts = np.zeros(frames[0].shape, dtype=np.int64)
    for frame, mask in zip(frames, visibility):
        visible = mask.data.astype(np.float64)
        costs += visible[..., None] * (f - frame.data[..., None]) ** 2
        counts += mask.data
    return CostField(costs, counts)


def smoothness_cost(f_p, f_q, lam: float):
    return lam * np.abs(np.asarray(f_p) - np.asarray(f_q))


def energy(labeling: np.ndarray, costs: CostField, lam: float) -> float:
    labeling = np.asarray(labeling, dtype=np.int64)
    if labeling.shape != costs.costs.shape[:2]:
        raise DimensionError(f"labeling shape {labeling.shape} does not match costs {costs.costs.shape[:2]}")
    data = np.take_along_axis(costs.costs, labeling[..., None], axis=2).sum()
    smooth = (
        smoothness_cost(labeling[:, 1:], labeling[:, :-1], lam).sum()
        + smoothness_cost(labeling[1:], labeling[:-1], lam).sum()
    )
    return float(data + smooth)


def data_only_labeling(costs: CostField) -> np.ndarray:
    """Per-pixel argmin of the data cost (lowest label on ties)."""
    return np.argmin(costs.costs, axis=2)


# ============================================================================
# MESSAGES
# ============================================================================

def _normalize(msg: np.ndarray) -> np.ndarray:
    return msg - msg.min(axis=-1, keepdims=True)


def lower_envelope(base: np.ndarray, lam: float) -> np.ndarray:
    """min over f' of base(f') + lam |f - f'| along the last axis, in O(L).

    Both passes carry the minimising source label, and each output is
    evaluated as base[src] + smoothness_cost(src, f), the same arithmetic as
    the O(L^2) table, so the two agree bit for bit.
    """
    L = base.shape[-1]
    src = np.zeros(base.shape, dtype=np.int64)
    src_base = np.array(base, dtype=np.float64)
    for q in range(1, L):
        carried = src_base[..., q - 1] + smoothness_cost(src[..., q - 1], q, lam)
        keep = carried < base[..., q]
        src[..., q] = np.where(keep, src[..., q - 1], q)
        src_base[..., q] = np.where(keep, src_base[..., q - 1], base[..., q])
    for q in range(L - 2, -1, -1):
        carried = src_base[..., q + 1] + smoothness_cost(src[..., q + 1], q, lam)
        current = src_base[..., q] + smoothness_cost(src[..., q], q, lam)
        take = carried < current
        src[..., q] = np.where(take, src[..., q + 1], src[..., q])
        src_base[..., q] = np.where(take, src_base[..., q + 1], src_base[..., q])
    return src_base + smoothness_cost(src, np.arange(L), lam)


def _message_base(incoming, D_p) -> np.ndarray:
    base = np.asarray(D_p, dtype=np.float64).copy()
    for msg in incoming:
        base = base + np.asarray(msg, dtype=np.float64)
    return base


def message_update_naive(incoming: Sequence[np.ndarray], D_p: np.ndarray, lam: float) -> np.ndarray:
    """O(L^2) min-sum message: out(q) = min_p lam|p - q| + D(p) + sum incoming(p)."""
    base = _message_base(incoming, D_p)
    labels = np.arange(len(base))
    table = base[:, None] + smoothness_cost(labels[:, None], labels[None, :], lam)
    return _normalize(table.min(axis=0))


def message_update_dt(incoming: Sequence[np.ndarray], D_p: np.ndarray, lam: float) -> np.ndarray:
    """Same message as message_update_naive via the two-pass lower envelope."""
    return _normalize(lower_envelope(_message_base(incoming, D_p), lam))


# ============================================================================
# LOOPY BELIEF PROPAGATION
# ============================================================================

def lbp_run(costs: CostField, params: EnergyParams = EnergyParams()) -> Tuple[np.ndarray, np.ndarray]:
    """Min-sum LBP; returns (labeling, beliefs).

    Messages are stored at the receiver: from_left[y, x] is the message
    pixel (y, x-1) sent to (y, x). Each sweep computes every new message from
    the previous sweep's messages; the checkerboard schedule then commits
    only messages sent by pixels of the sweep's colour.
    """
    D = costs.costs
    height, width, _ = D.shape
    lam = params.lam
    from_left = np.zeros_like(D)
    from_right = np.zeros_like(D)
    from_up = np.zeros_like(D)
    from_down = np.zeros_like(D)
    parity = np.add.outer(np.arange(height), np.arange(width)) % 2

    for t in range(params.iterations):
        new_left = np.zeros_like(D)
        new_right = np.zeros_like(D)
        new_up = np.zeros_like(D)
        new_down = np.zeros_like(D)
        if width > 1:
            to_right = D[:, :-1] + from_left[:, :-1] + from_up[:, :-1] + from_down[:, :-1]
            new_left[:, 1:] = _normalize(lower_envelope(to_right, lam))
            to_left = D[:, 1:] + from_right[:, 1:] + from_up[:, 1:] + from_down[:, 1:]
            new_right[:, :-1] = _normalize(lower_envelope(to_left, lam))
        if height > 1:
            to_down = D[:-1] + from_left[:-1] + from_right[:-1] + from_up[:-1]
            new_up[1:] = _normalize(lower_envelope(to_down, lam))
            to_up = D[1:] + from_left[1:] + from_right[1:] + from_down[1:]
            new_down[:-1] = _normalize(lower_envelope(to_up, lam))

        if params.schedule == "checkerboard":
            # receivers of this sweep's senders have the opposite colour
            commit = (parity != t % 2)[..., None]
            from_left = np.where(commit, new_left, from_left)
            from_right = np.where(commit, new_right, from_right)
            from_up = np.where(commit, new_up, from_up)
            from_down = np.where(commit, new_down, from_down)
        else:
            from_left, from_right, from_up, from_down = new_left, new_right, new_up, new_down

    beliefs = D + from_left + from_right + from_up + from_down
    labeling = np.argmin(beliefs, axis=2)
    logger.debug("LBP finished %d %s sweeps on %dx%d", params.iterations, params.schedule, width, height)
    return labeling, beliefs


# ============================================================================
# EXACT ORACLES
# ============================================================================

def _chain_map(D: np.ndarray, lam: float) -> np.ndarray:
    """Exact MAP of a chain (n, L); lexicographically smallest on ties."""
    n, L = D.shape
    labels = np.arange(L)
    pair = smoothness_cost(labels[:, None], labels[None, :], lam)
    to_go = np.zeros((n, L))
    to_go[-1] = D[-1]
    for i in range(n - 2, -1, -1):
        to_go[i] = D[i] + (pair + to_go[i + 1][None, :]).min(axis=1)
    out = np.empty(n, dtype=np.int64)
    out[0] = int(np.argmin(to_go[0]))
    for i in range(1, n):
        out[i] = int(np.argmin(pair[out[i - 1]] + to_go[i]))
    return out


def brute_force_map(costs: CostField, lam: float) -> np.ndarray:
    """Exact global minimiser of energy(); chains by dynamic programming, small grids by enumeration."""
    height, width, L = costs.costs.shape
    if height == 1 or width == 1:
        chain = costs.costs.reshape(height * width, L)
        return _chain_map(chain, lam).reshape(height, width)

    pixels = height * width
    if pixels * math.log2(L) > BRUTE_FORCE_BITS:
        raise CapacityError(
            f"{width}x{height} with {L} labels needs {pixels * math.log2(L):.1f} bits, limit is {BRUTE_FORCE_BITS}"
        )
    # rows enumerate labelings in lexicographic order, first pixel most significant
    candidates = np.indices((L,) * pixels).reshape(pixels, -1).T
    flat_costs = costs.costs.reshape(pixels, L)
    totals = flat_costs[np.arange(pixels), candidates].sum(axis=1)
    grids = candidates.reshape(-1, height, width)
    smooth = (
        smoothness_cost(grids[:, :, 1:], grids[:, :, :-1], lam).sum(axis=(1, 2))
        + smoothness_cost(grids[:, 1:], grids[:, :-1], lam).sum(axis=(1, 2))
    )
    best = int(np.argmin(totals + smooth))
    return grids[best].copy()


# ============================================================================
# DE-FENCING
# ============================================================================

def coverage_stats(visibility: Sequence[BinaryMask]) -> float:
    """Fraction of pixels observed by no frame."""
    seen = np.zeros(visibility[0].shape, dtype=bool)
    for mask in visibility:
        seen |= mask.data.astype(bool)
    return float(1.0 - seen.mean())


def register_observations(
    frames: Sequence[GrayImage],
    fence_masks: Sequence[BinaryMask],
    transforms: Sequence[AffineTransform],
) -> Tuple[List[GrayImage], List[BinaryMask]]:
    """Warp frames into reference coordinates with their visibility masks."""
    if not (len(frames) == len(fence_masks) == len(transforms)):
        raise DimensionError(
            f"{len(frames)} frames, {len(fence_masks)} masks and {len(transforms)} transforms"
        )
    warped: List[GrayImage] = []
    visible: List[BinaryMask] = []
    for frame, fence, t in zip(frames, fence_masks, transforms):
        check_same_shape(frames[0], frame, "frames")
        check_same_shape(frame, fence, "frame and fence mask")
        image, invalid = warp_affine(frame, t, "bilinear")
        # any bilinear contribution from a fence pixel hides the output pixel
        fence_warped, fence_valid = warp_array(fence.data.astype(np.float64), t, "bilinear")
        seen = (fence_warped == 0) & fence_valid & (invalid.data == 0)
        warped.append(image)
        visible.append(BinaryMask(seen))
    return warped, visible


def fuse(
    frames: Sequence[GrayImage],
    fence_masks: Sequence[BinaryMask],
    transforms: Sequence[AffineTransform],
    reference: int = 0,
    params: EnergyParams = EnergyParams(),
) -> DefenceResult:
    """Full de-fencing run with the energy bookkeeping the CLI reports."""
    if not frames:
        raise DimensionError("at least one frame is required")
    if not 0 <= reference < len(frames):
        raise ParameterError(f"reference index {reference} out of range for {len(frames)} frames")
    warped, visible = register_observations(frames, fence_masks, transforms)
    if not any(mask.count() for mask in visible):
        raise DegenerateInputError("no pixel is visible in any frame")

    uncovered = coverage_stats(visible)
    if uncovered > 0:
        logger.warning("%.2f%% of pixels are seen by no frame; smoothness fills them in", 100.0 * uncovered)

    costs = build_data_cost(warped, visible, params.labels)
    labeling, _ = lbp_run(costs, params)
    if params.keep_reference:
        ref_seen = visible[reference].data.astype(bool)
        observed = np.clip(np.floor(warped[reference].data + 0.5), 0, params.labels - 1).astype(np.int64)
        labeling = np.where(ref_seen, observed, labeling)

    before = energy(data_only_labeling(costs), costs, params.lam)
    after = energy(labeling, costs, params.lam)
    logger.info("energy %.3f (data-only) -> %.3f (LBP)", before, after)
    return DefenceResult(
        image=GrayImage(labeling.astype(np.float64)),
        labeling=labeling,
        costs=costs,
        visibility=visible,
        energy_initial=before,
        energy_final=after,
        uncovered=uncovered,
    )


def defence(
    frames: Sequence[GrayImage],
    fence_masks: Sequence[BinaryMask],
    transforms: Sequence[AffineTransform],
    reference: int = 0,
    params: EnergyParams = EnergyParams(),
) -> GrayImage:
    """MAP estimate of the de-fenced reference frame."""
    return fuse(frames, fence_masks, transforms, reference, params).image
