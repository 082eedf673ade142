"""
Small convolutional network for texel-joint classification.

Layer stack (fixed):
    input 32x32 -> conv1 6@5x5 -> sigmoid -> 28x28x6
                -> maxpool 2x2 -> 14x14x6
                -> conv2 12@(6x5x5) -> sigmoid -> 10x10x12
                -> maxpool 2x2 -> 5x5x12 -> flatten 300
                -> fully connected 300->1 -> sigmoid

"Convolution" is valid cross-correlation, as is usual for such networks.
Loss is the mean squared error E = (1/n) sum (out - target)^2 with targets
in {0, 1}. Training is plain mini-batch SGD.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import DegenerateTrainingError, DimensionError, ParameterError, StateError
from core.imagecore import GrayImage, resize_bilinear

logger = logging.getLogger(__name__)

INPUT_SIZE = 32
KERNEL = 5
CONV1_MAPS = 6
CONV2_MAPS = 12
FLAT_LENGTH = CONV2_MAPS * 5 * 5
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_fc", "b_fc")
PARAM_SHAPES = {
    "w1": (CONV1_MAPS, KERNEL, KERNEL),
    "b1": (CONV1_MAPS,),
    "w2": (CONV2_MAPS, CONV1_MAPS, KERNEL, KERNEL),
    "b2": (CONV2_MAPS,),
    "w_fc": (FLAT_LENGTH,),
    "b_fc": (1,),
}
KINK_REDRAWS = 10
# relative errors of gradients below this magnitude are measured against it
GRADIENT_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class CnnNetwork:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_fc: np.ndarray
    b_fc: np.ndarray

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            value = np.array(getattr(self, name), dtype=np.float64)
            if value.shape != PARAM_SHAPES[name]:
                raise DimensionError(f"{name} must have shape {PARAM_SHAPES[name]}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ParameterError(f"{name} holds non-finite values")
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_parameters(cls, params: Dict[str, np.ndarray]) -> "CnnNetwork":
        return cls(**{name: params[name] for name in PARAM_NAMES})

    @classmethod
    def zeros(cls) -> "CnnNetwork":
        return cls(**{name: np.zeros(shape) for name, shape in PARAM_SHAPES.items()})

    @property
    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for shape in PARAM_SHAPES.values())


@dataclass(frozen=True, eq=False)
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_fc: np.ndarray
    b_fc: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Everything backward() needs from one forward pass over a mini-batch."""

    x: np.ndarray
    a1: np.ndarray
    p1: np.ndarray
    idx1: np.ndarray
    a2: np.ndarray
    p2: np.ndarray
    idx2: np.ndarray
    flat: np.ndarray
    out: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    epochs: int = 100
    learning_rate: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass(frozen=True)
class AugmentPolicy:
    flip_y: bool = True
    center_crop: Optional[int] = None


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def init_network(seed: int = 0) -> CnnNetwork:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    area = KERNEL * KERNEL
    return CnnNetwork(
        w1=uniform(PARAM_SHAPES["w1"], area, CONV1_MAPS * area),
        b1=np.zeros(CONV1_MAPS),
        w2=uniform(PARAM_SHAPES["w2"], CONV1_MAPS * area, CONV2_MAPS * area),
        b2=np.zeros(CONV2_MAPS),
        w_fc=uniform(PARAM_SHAPES["w_fc"], FLAT_LENGTH, 1),
        b_fc=np.zeros(1),
    )


def conv_single(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, H, W) input, (k, 5, 5) filters -> (n, k, H-4, W-4)."""
    windows = sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2))
    return np.einsum("nijuv,kuv->nkij", windows, w) + b[None, :, None, None]


def conv_multi(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, c, H, W) input, (k, c, 5, 5) filters summed over c -> (n, k, H-4, W-4)."""
    windows = sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))
    return np.einsum("ncijuv,kcuv->nkij", windows, w) + b[None, :, None, None]


def _blocks(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def max_pool(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling; returns (pooled, argmax within each block, first max wins)."""
    blocks = _blocks(a)
    idx = np.argmax(blocks, axis=-1)
    pooled = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def unpool(delta: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Route pooled deltas back to the cached argmax of each 2x2 block."""
    n, c, h2, w2 = delta.shape
    blocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(blocks, idx[..., None], delta[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def prepare_batch(batch: Union[Sequence[GrayImage], np.ndarray]) -> np.ndarray:
    """Stack GrayImages scaled by 1/255; raw arrays are taken as already scaled."""
    if isinstance(batch, np.ndarray):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
    else:
        x = np.stack([img.data for img in batch]) / 255.0 if len(batch) else np.zeros((0, 0, 0))
    if x.ndim != 3 or x.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        raise DimensionError(f"network input must be {INPUT_SIZE}x{INPUT_SIZE}, got {x.shape[1:]}")
    return x


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def forward(net: CnnNetwork, batch, keep_cache: bool = True) -> Tuple[np.ndarray, Optional[ForwardCache]]:
    x = prepare_batch(batch)
    a1 = sigmoid(conv_single(x, net.w1, net.b1))
    p1, idx1 = max_pool(a1)
    a2 = sigmoid(conv_multi(p1, net.w2, net.b2))
    p2, idx2 = max_pool(a2)
    flat = p2.reshape(len(x), FLAT_LENGTH)
    out = sigmoid(flat @ net.w_fc + net.b_fc[0])
    if not keep_cache:
        return out, None
    return out, ForwardCache(x, a1, p1, idx1, a2, p2, idx2, flat, out)


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((np.asarray(outputs) - np.asarray(targets, dtype=np.float64)) ** 2))


def backward(net: CnnNetwork, cache: Optional[ForwardCache], targets) -> Gradients:
    """Gradients of the batch MSE with respect to every parameter."""
    if cache is None:
        raise StateError("backward() needs the cache of a forward pass run with keep_cache=True")
    targets = np.asarray(targets, dtype=np.float64).ravel()
    n = len(cache.out)
    if len(targets) != n:
        raise DimensionError(f"{len(targets)} targets for a batch of {n}")

    # output layer
    delta3 = 2.0 * (cache.out - targets) / n * cache.out * (1.0 - cache.out)
    g_wfc = cache.flat.T @ delta3
    g_bfc = np.array([delta3.sum()])

    # pool2 -> conv2
    d_p2 = (delta3[:, None] * net.w_fc[None, :]).reshape(cache.p2.shape)
    delta2 = unpool(d_p2, cache.idx2) * cache.a2 * (1.0 - cache.a2)
    p1_windows = sliding_window_view(cache.p1, (KERNEL, KERNEL), axis=(2, 3))
    g_w2 = np.einsum("nkij,ncijuv->kcuv", delta2, p1_windows)
    g_b2 = delta2.sum(axis=(0, 2, 3))

    # full correlation with the flipped kernels carries delta2 back to pool1
    pad = KERNEL - 1
    padded = np.pad(delta2, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    d_windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))
    d_p1 = np.einsum("nkabuv,kcuv->ncab", d_windows, net.w2[:, :, ::-1, ::-1])

    # pool1 -> conv1
    delta1 = unpool(d_p1, cache.idx1) * cache.a1 * (1.0 - cache.a1)
    x_windows = sliding_window_view(cache.x, (KERNEL, KERNEL), axis=(1, 2))
    g_w1 = np.einsum("nkij,nijuv->kuv", delta1, x_windows)
    g_b1 = delta1.sum(axis=(0, 2, 3))

    return Gradients(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2, w_fc=g_wfc, b_fc=g_bfc)


def sgd_step(net: CnnNetwork, grads: Gradients, learning_rate: float) -> CnnNetwork:
    """Return a new network with w <- w - learning_rate * dE/dw for every parameter."""
    updated = {}
    for name, value in net.parameters().items():
        grad = np.asarray(getattr(grads, name))
        if grad.shape != value.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        updated[name] = value - learning_rate * grad
    return CnnNetwork.from_parameters(updated)


def predict(net: CnnNetwork, batch) -> np.ndarray:
    """Joint probability per input."""
    out, _ = forward(net, batch, keep_cache=False)
    return out


# ============================================================================
# TRAINING
# ============================================================================

def augment(images: Sequence[GrayImage], policy: AugmentPolicy) -> List[GrayImage]:
    """Center-crop (when configured), then append y-axis mirrors (when configured)."""
    out: List[GrayImage] = []
    for img in images:
        if policy.center_crop is not None:
            side = policy.center_crop
            if side < 1 or side > img.width or side > img.height:
                raise ParameterError(f"crop {side} does not fit a {img.width}x{img.height} image")
            x0 = (img.width - side) // 2
            y0 = (img.height - side) // 2
            img = img.crop(x0, y0, side, side)
        out.append(img)
    if policy.flip_y:
        out.extend(img.flipped() for img in list(out))
    return out


def _to_input(img: GrayImage) -> GrayImage:
    if img.width == INPUT_SIZE and img.height == INPUT_SIZE:
        return img
    return resize_bilinear(img, INPUT_SIZE, INPUT_SIZE)


def train(net: CnnNetwork, samples: Sequence, cfg: TrainConfig, policy: AugmentPolicy = AugmentPolicy()) -> Tuple[CnnNetwork, List[float]]:
    """Mini-batch SGD over labelled patches.

    Args:
        net: starting network (see init_network)
        samples: objects with `.patch` (GrayImage) and `.label` in {+1, -1}
        cfg: batch size, epochs, learning rate and shuffle seed
        policy: augmentation applied once before the first epoch

    Returns:
        (trained network, mean training loss per epoch)
    """
    labels = np.array([s.label for s in samples])
    if not (np.any(labels == 1) and np.any(labels == -1)):
        raise DegenerateTrainingError("CNN training needs both joint and non-joint samples")

    images = augment([s.patch for s in samples], policy)
    targets = np.tile((labels == 1).astype(np.float64), len(images) // len(samples))
    x = prepare_batch([_to_input(img) for img in images])
    n = len(x)
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    logger.info("training CNN on %d inputs (%d before augmentation), batch %d", n, len(samples), batch)

    trace: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            out, cache = forward(net, x[idx])
            total += mse_loss(out, targets[idx]) * len(idx)
            net = sgd_step(net, backward(net, cache, targets[idx]), cfg.learning_rate)
        trace.append(total / n)
        logger.debug("epoch %d loss %.6f", epoch + 1, trace[-1])
    return net, trace


# ============================================================================
# GRADIENT CHECK
# ============================================================================

def _loss_and_pools(net: CnnNetwork, x: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    out, cache = forward(net, x)
    return mse_loss(out, targets), cache.idx1, cache.idx2


def gradient_check(
    net: CnnNetwork,
    probes: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    inputs: Optional[np.ndarray] = None,
    targets: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes land on randomly chosen parameters. A probe whose +-h evaluation
    moves a max-pool argmax sits on a kink and is redrawn (up to a limit).
    """
    if probes <= 0:
        return 0.0
    if not 1e-7 <= h <= 1e-3:
        raise ParameterError(f"h must be in [1e-7, 1e-3], got {h}")
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = rng.uniform(0.0, 1.0, size=(4, INPUT_SIZE, INPUT_SIZE))
    if targets is None:
        targets = rng.integers(0, 2, size=len(inputs)).astype(np.float64)
    x = prepare_batch(inputs)

    out, cache = forward(net, x)
    analytic = backward(net, cache, targets).as_dict()
    params = {name: value.copy() for name, value in net.parameters().items()}
    sizes = np.array([params[name].size for name in PARAM_NAMES])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def evaluate(name: str, flat_index: int, value: float):
        saved = params[name].flat[flat_index]
        params[name].flat[flat_index] = value
        result = _loss_and_pools(CnnNetwork.from_parameters(params), x, targets)
        params[name].flat[flat_index] = saved
        return result

    worst = 0.0
    for _ in range(probes):
        for attempt in range(KINK_REDRAWS + 1):
            k = int(rng.integers(0, offsets[-1]))
            slot = int(np.searchsorted(offsets, k, side="right") - 1)
            name, flat_index = PARAM_NAMES[slot], k - offsets[slot]
            base = params[name].flat[flat_index]
            plus, i1p, i2p = evaluate(name, flat_index, base + h)
            minus, i1m, i2m = evaluate(name, flat_index, base - h)
            smooth = np.array_equal(i1p, i1m) and np.array_equal(i2p, i2m)
            if smooth or attempt == KINK_REDRAWS:
                break
        numeric = (plus - minus) / (2.0 * h)
        exact = float(analytic[name].flat[flat_index])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), GRADIENT_FLOOR)
        worst = max(worst, error)
    logger.info("gradient check over %d probes: max relative error %.3g", probes, worst)
    return worst
