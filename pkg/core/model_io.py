"""
Versioned binary files for trained models and cost-field dumps.

All integers are little-endian uint32, all reals little-endian float64.

Classifier model (DFK1):
    magic   b"DFK1"
    kind    uint8       0 = linear, 1 = rbf
    dims    uint32      descriptor length
    n_sv    uint32      support vectors (0 for linear)
    c       float64
    gamma   float64
    bias    float64
    linear: weights[dims]
    rbf:    coefficients[n_sv], support_vectors[n_sv * dims] (row-major)

Network (DFKC):
    magic   b"DFKC"
    input, kernel, conv1 maps, conv2 maps, flat length   uint32 x 5
    w1, b1, w2, b2, w_fc, b_fc                           float64, C order

Cost field (DFKD):
    magic   b"DFKD"
    height, width, labels   uint32 x 3
    costs[height * width * labels]   float64, per pixel label vectors
    counts[height * width]           uint32
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from core import cnn
from core.classifier import ClassifierModel
from core.errors import ModelFormatError
from core.fusion import CostField
from core.imagecore import atomic_output

logger = logging.getLogger(__name__)

CLASSIFIER_MAGIC = b"DFK1"
NETWORK_MAGIC = b"DFKC"
COSTS_MAGIC = b"DFKD"

_KINDS = {"linear": 0, "rbf": 1}
_KIND_NAMES = {code: name for name, code in _KINDS.items()}
_CLASSIFIER_HEADER = struct.Struct("<4sBIIddd")
_NETWORK_HEADER = struct.Struct("<4s5I")
_COSTS_HEADER = struct.Struct("<4s3I")

PathLike = Union[str, Path]


# ============================================================================
# LOW-LEVEL HELPERS
# ============================================================================

def _f64(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _write(path: PathLike, payload: bytes) -> None:
    with atomic_output(Path(path)) as tmp:
        tmp.write_bytes(payload)


class _Reader:
    """Cursor over a byte buffer that reports truncation as a format error."""

    def __init__(self, raw: bytes, path: PathLike):
        self.raw = raw
        self.path = path
        self.pos = 0

    def unpack(self, layout: struct.Struct) -> tuple:
        chunk = self.take(layout.size)
        return layout.unpack(chunk)

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise ModelFormatError(f"{self.path}: truncated file")
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def reals(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.raw):
            raise ModelFormatError(f"{self.path}: {len(self.raw) - self.pos} trailing bytes")


def _read(path: PathLike, magic: bytes) -> _Reader:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ModelFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    return _Reader(raw, path)


# ============================================================================
# CLASSIFIER
# ============================================================================

def save_classifier(model: ClassifierModel, path: PathLike) -> None:
    if model.kind not in _KINDS:
        raise ModelFormatError(f"cannot store classifier kind {model.kind!r}")
    if model.kind == "linear":
        n_sv = 0
        body = _f64(model.weights)
    else:
        n_sv = int(model.support_vectors.shape[0])
        body = _f64(model.coefficients) + _f64(model.support_vectors)
    header = _CLASSIFIER_HEADER.pack(
        CLASSIFIER_MAGIC, _KINDS[model.kind], model.dims, n_sv, model.c, model.gamma, model.bias
    )
    _write(path, header + body)
    logger.info("saved %s classifier (%d dims) to %s", model.kind, model.dims, path)


def load_classifier(path: PathLike) -> ClassifierModel:
    reader = _read(path, CLASSIFIER_MAGIC)
    _, kind_code, dims, n_sv, c, gamma, bias = reader.unpack(_CLASSIFIER_HEADER)
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise ModelFormatError(f"{path}: unknown classifier kind {kind_code}")
    if dims == 0:
        raise ModelFormatError(f"{path}: zero descriptor length")
    if kind == "linear":
        if n_sv != 0:
            raise ModelFormatError(f"{path}: linear model with {n_sv} support vectors")
        model = ClassifierModel(kind, bias, c, gamma, weights=reader.reals(dims))
    else:
        if n_sv == 0:
            raise ModelFormatError(f"{path}: rbf model without support vectors")
        coefficients = reader.reals(n_sv)
        support_vectors = reader.reals(n_sv * dims).reshape(n_sv, dims)
        model = ClassifierModel(kind, bias, c, gamma, support_vectors=support_vectors, coefficients=coefficients)
    reader.finish()
    return model


# ============================================================================
# NETWORK
# ============================================================================

def _network_dims() -> tuple:
    return (cnn.INPUT_SIZE, cnn.KERNEL, cnn.CONV1_MAPS, cnn.CONV2_MAPS, cnn.FLAT_LENGTH)


def save_network(net: cnn.CnnNetwork, path: PathLike) -> None:
    body = b"".join(_f64(getattr(net, name)) for name in cnn.PARAM_NAMES)
    _write(path, _NETWORK_HEADER.pack(NETWORK_MAGIC, *_network_dims()) + body)
    logger.info("saved network (%d parameters) to %s", net.parameter_count, path)


def load_network(path: PathLike) -> cnn.CnnNetwork:
    reader = _read(path, NETWORK_MAGIC)
    _, *dims = reader.unpack(_NETWORK_HEADER)
    if tuple(dims) != _network_dims():
        raise ModelFormatError(f"{path}: layer dims {tuple(dims)} do not match {_network_dims()}")
    params = {}
    for name in cnn.PARAM_NAMES:
        shape = cnn.PARAM_SHAPES[name]
        params[name] = reader.reals(int(np.prod(shape))).reshape(shape)
    reader.finish()
    try:
        return cnn.CnnNetwork.from_parameters(params)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


# ============================================================================
# COST FIELD
# ============================================================================

def save_costs(field: CostField, path: PathLike) -> None:
    header = _COSTS_HEADER.pack(COSTS_MAGIC, field.height, field.width, field.labels)
    counts = np.ascontiguousarray(field.counts, dtype="<u4").tobytes()
    _write(path, header + _f64(field.costs) + counts)


def load_costs(path: PathLike) -> CostField:
    reader = _read(path, COSTS_MAGIC)
    _, height, width, labels = reader.unpack(_COSTS_HEADER)
    if height == 0 or width == 0 or labels == 0:
        raise ModelFormatError(f"{path}: empty cost field {height}x{width}x{labels}")
    costs = reader.reals(height * width * labels).reshape(height, width, labels)
    counts = np.frombuffer(reader.take(4 * height * width), dtype="<u4").astype(np.int64).reshape(height, width)
    reader.finish()
    return CostField(costs, counts)


# ============================================================================
# DISPATCH
# ============================================================================

def sniff(path: PathLike) -> bytes:
    """First four bytes of a file, used to pick a loader."""
    with open(path, "rb") as handle:
        return handle.read(4)


def load_detector(path: PathLike):
    """Load either a classifier or a network, chosen by magic."""
    magic = sniff(path)
    if magic == CLASSIFIER_MAGIC:
        return load_classifier(path)
    if magic == NETWORK_MAGIC:
        return load_network(path)
    raise ModelFormatError(f"{path}: not a model file (magic {magic!r})")
