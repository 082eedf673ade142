"""
Max-margin joint/non-joint classifier over HOG descriptors.

Two kinds of model share one type:
- linear: primal hinge loss minimised by epoch-based stochastic sub-gradient
  descent (Pegasos-style steps 1/(lambda*t), seeded shuffle, 20 epochs)
- rbf: kernel dual solved by pairwise SMO updates on the maximal violating
  pair until the KKT gap drops below 1e-3 or 10^4 pair updates

Labels are +1 (joint) and -1 (non-joint). A score of exactly 0 predicts +1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import DegenerateTrainingError, DimensionError, ParameterError, PatchSizeError
from core.hog import DEFAULT_PARAMS, HogParams, extract
from core.imagecore import GrayImage, load_gray

logger = logging.getLogger(__name__)

DEFAULT_C = 10.0
DEFAULT_GAMMA = 1.0 / 1296.0
LINEAR_EPOCHS = 20
KKT_TOLERANCE = 1e-3
MAX_PAIR_UPDATES = 10_000
PATCH_SUFFIXES = (".pgm", ".png")
TAU = 1e-12


@dataclass(frozen=True, eq=False)
class TexelSample:
    patch: GrayImage
    label: int

    def __post_init__(self) -> None:
        if self.label not in (1, -1):
            raise ParameterError(f"label must be +1 or -1, got {self.label}")


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    """Trained model. For rbf, `coefficients` hold alpha_i * y_i per support vector."""

    kind: str
    bias: float
    c: float
    gamma: float = DEFAULT_GAMMA
    weights: Optional[np.ndarray] = None
    support_vectors: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None
    training_meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def dims(self) -> int:
        if self.kind == "linear":
            return int(self.weights.shape[0])
        return int(self.support_vectors.shape[1])


# ============================================================================
# DATA HELPERS
# ============================================================================

def as_arrays(samples: Sequence[Tuple[np.ndarray, int]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise DegenerateTrainingError("no training samples")
    X = np.vstack([np.asarray(d, dtype=np.float64).ravel() for d, _ in samples])
    y = np.array([int(label) for _, label in samples], dtype=np.int64)
    if not np.all((y == 1) | (y == -1)):
        raise ParameterError("labels must be +1 or -1")
    return X, y


def featurize(samples: Sequence[TexelSample], params: HogParams = DEFAULT_PARAMS) -> List[Tuple[np.ndarray, int]]:
    """HOG descriptor of every patch, paired with its label."""
    return [(extract(s.patch, params), s.label) for s in samples]


def _require_both_classes(y: np.ndarray) -> None:
    if not (np.any(y == 1) and np.any(y == -1)):
        only = "+1" if np.all(y == 1) else "-1"
        raise DegenerateTrainingError(f"training data holds only label {only}; both classes are required")


# ============================================================================
# LINEAR (PRIMAL)
# ============================================================================

def hinge_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, c: float) -> float:
    """(1/n) sum max(0, 1 - y(w.x + b)) + (1/(2cn)) |w|^2."""
    n = len(y)
    margins = y * (X @ w + b)
    return float(np.mean(np.maximum(0.0, 1.0 - margins)) + np.dot(w, w) / (2.0 * c * n))


def _train_linear(X: np.ndarray, y: np.ndarray, c: float, seed: int, epochs: int) -> ClassifierModel:
    n, d = X.shape
    lam = 1.0 / (c * n)
    Xa = np.hstack([X, np.ones((n, 1))])  # bias rides along as a constant feature
    w = np.zeros(d + 1)
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(seed)

    best_w, best_b = np.zeros(d), 0.0
    best_obj = hinge_objective(best_w, best_b, X, y, c)
    t = 0
    for epoch in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            margin = y[i] * np.dot(w, Xa[i])
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[i] * Xa[i]
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
        obj = hinge_objective(w[:d], w[d], X, y, c)
        logger.debug("linear epoch %d objective %.6f", epoch + 1, obj)
        if obj < best_obj:
            best_obj, best_w, best_b = obj, w[:d].copy(), float(w[d])

    return ClassifierModel(
        kind="linear",
        weights=best_w,
        bias=best_b,
        c=c,
        training_meta={"epochs": epochs, "objective": best_obj, "samples": n},
    )


# ============================================================================
# RBF (DUAL, SMO)
# ============================================================================

def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


def _select_pair(alpha: np.ndarray, G: np.ndarray, y: np.ndarray, c: float) -> Tuple[int, int, float]:
    score = -y * G
    up = ((y == 1) & (alpha < c)) | ((y == -1) & (alpha > 0))
    low = ((y == 1) & (alpha > 0)) | ((y == -1) & (alpha < c))
    if not up.any() or not low.any():
        return -1, -1, 0.0
    i = int(np.argmax(np.where(up, score, -np.inf)))
    j = int(np.argmin(np.where(low, score, np.inf)))
    return i, j, float(score[i] - score[j])


def _pair_update(alpha: np.ndarray, G: np.ndarray, Q: np.ndarray, y: np.ndarray, i: int, j: int, c: float) -> None:
    old_i, old_j = alpha[i], alpha[j]
    if y[i] != y[j]:
        quad = max(Q[i, i] + Q[j, j] + 2.0 * Q[i, j], TAU)
        delta = (-G[i] - G[j]) / quad
        diff = alpha[i] - alpha[j]
        alpha[i] += delta
        alpha[j] += delta
        if diff > 0:
            if alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, diff
        elif alpha[i] < 0:
            alpha[i], alpha[j] = 0.0, -diff
        if diff > 0:
            if alpha[i] > c:
                alpha[i], alpha[j] = c, c - diff
        elif alpha[j] > c:
            alpha[j], alpha[i] = c, c + diff
    else:
        quad = max(Q[i, i] + Q[j, j] - 2.0 * Q[i, j], TAU)
        delta = (G[i] - G[j]) / quad
        total = alpha[i] + alpha[j]
        alpha[i] -= delta
        alpha[j] += delta
        if total > c:
            if alpha[i] > c:
                alpha[i], alpha[j] = c, total - c
            if alpha[j] > c:
                alpha[j], alpha[i] = c, total - c
        else:
            if alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
    G += Q[:, i] * (alpha[i] - old_i) + Q[:, j] * (alpha[j] - old_j)


def _offset(alpha: np.ndarray, G: np.ndarray, y: np.ndarray, c: float) -> float:
    yG = y * G
    free = (alpha > 0) & (alpha < c)
    if free.any():
        return float(np.mean(yG[free]))
    at_upper = alpha >= c
    ub_mask = (at_upper & (y == -1)) | (~at_upper & (y == 1))
    lb_mask = (at_upper & (y == 1)) | (~at_upper & (y == -1))
    ub = float(np.min(yG[ub_mask])) if ub_mask.any() else np.inf
    lb = float(np.max(yG[lb_mask])) if lb_mask.any() else -np.inf
    return (ub + lb) / 2.0


def _train_rbf(X: np.ndarray, y: np.ndarray, c: float, gamma: float) -> ClassifierModel:
    n = len(y)
    yf = y.astype(np.float64)
    Q = np.outer(yf, yf) * rbf_kernel(X, X, gamma)
    alpha = np.zeros(n)
    G = -np.ones(n)
    updates = 0
    gap = np.inf
    while updates < MAX_PAIR_UPDATES:
        i, j, gap = _select_pair(alpha, G, yf, c)
        if i < 0 or gap < KKT_TOLERANCE:
            break
        _pair_update(alpha, G, Q, yf, i, j, c)
        np.clip(alpha, 0.0, c, out=alpha)
        updates += 1
    if updates == MAX_PAIR_UPDATES:
        logger.warning("SMO stopped at %d pair updates with KKT gap %.3g", updates, gap)
    rho = _offset(alpha, G, yf, c)
    support = alpha > 0
    return ClassifierModel(
        kind="rbf",
        bias=-rho,
        c=c,
        gamma=gamma,
        support_vectors=X[support].copy(),
        coefficients=(alpha * yf)[support],
        training_meta={"pair_updates": updates, "kkt_gap": float(gap), "samples": n},
    )


# ============================================================================
# PUBLIC API
# ============================================================================

def train(
    samples: Sequence[Tuple[np.ndarray, int]],
    kind: str = "linear",
    c: float = DEFAULT_C,
    gamma: float = DEFAULT_GAMMA,
    seed: int = 0,
    epochs: int = LINEAR_EPOCHS,
) -> ClassifierModel:
    """Train on (descriptor, label) pairs.

    Args:
        samples: descriptors with labels in {+1, -1}; both classes required
        kind: "linear" or "rbf"
        c: regularisation, > 0
        gamma: RBF width, > 0 (rbf only)
        seed: shuffle seed for the linear solver

    Returns:
        The trained ClassifierModel.
    """
    if not c > 0:
        raise ParameterError(f"c must be > 0, got {c}")
    X, y = as_arrays(samples)
    _require_both_classes(y)
    if kind == "linear":
        model = _train_linear(X, y, c, seed, epochs)
    elif kind == "rbf":
        if not gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {gamma}")
        model = _train_rbf(X, y, c, gamma)
    else:
        raise ParameterError(f"unknown classifier kind {kind!r}")
    logger.info("trained %s model on %d samples (c=%g)", kind, len(y), c)
    return model


def decision_scores(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dims:
        raise DimensionError(f"descriptor length {X.shape[1]} does not match model dims {model.dims}")
    if model.kind == "linear":
        return X @ model.weights + model.bias
    if len(model.coefficients) == 0:
        return np.full(len(X), model.bias)
    return rbf_kernel(X, model.support_vectors, model.gamma) @ model.coefficients + model.bias


def labels_from_scores(scores: np.ndarray) -> np.ndarray:
    return np.where(scores >= 0.0, 1, -1)


def predict(model: ClassifierModel, d: np.ndarray) -> Tuple[float, int]:
    score = float(decision_scores(model, np.asarray(d).ravel()[None, :])[0])
    return score, 1 if score >= 0.0 else -1


def accuracy(model: ClassifierModel, samples: Sequence[Tuple[np.ndarray, int]]) -> float:
    X, y = as_arrays(samples)
    return float(np.mean(labels_from_scores(decision_scores(model, X)) == y))


# ============================================================================
# CROSS-VALIDATION
# ============================================================================

@dataclass(frozen=True)
class CvRow:
    c: float
    gamma: float
    fold_errors: Tuple[float, ...]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.fold_errors))


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample: each class shuffled by seed, then dealt round-robin."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for label in (1, -1):
        members = np.flatnonzero(y == label)
        if len(members) < folds:
            raise ParameterError(f"class {label:+d} has {len(members)} samples, need at least {folds} for {folds}-fold CV")
        shuffled = members[rng.permutation(len(members))]
        fold_of[shuffled] = np.arange(len(shuffled)) % folds
    return fold_of


def grid_search_cv(
    samples: Sequence[Tuple[np.ndarray, int]],
    c_grid: Sequence[float],
    gamma_grid: Sequence[float],
    folds: int = 5,
    seed: int = 0,
    kind: str = "linear",
) -> Tuple[float, float, List[CvRow]]:
    """Pick (c, gamma) with the lowest mean validation error over stratified folds.

    Ties go to the smaller c, then the smaller gamma.
    """
    if folds < 2:
        raise ParameterError(f"folds must be >= 2, got {folds}")
    X, y = as_arrays(samples)
    _require_both_classes(y)
    fold_of = stratified_folds(y, folds, seed)

    table: List[CvRow] = []
    for c in c_grid:
        for gamma in gamma_grid:
            errors = []
            for k in range(folds):
                held = fold_of == k
                train_set = list(zip(X[~held], y[~held]))
                model = train(train_set, kind=kind, c=c, gamma=gamma, seed=seed)
                predicted = labels_from_scores(decision_scores(model, X[held]))
                errors.append(float(np.mean(predicted != y[held])))
            row = CvRow(float(c), float(gamma), tuple(errors))
            logger.debug("cv c=%g gamma=%g error=%.4f", c, gamma, row.mean_error)
            table.append(row)

    best = min(table, key=lambda r: (round(r.mean_error, 12), r.c, r.gamma))
    logger.info("cv selected c=%g gamma=%g (error %.4f)", best.c, best.gamma, best.mean_error)
    return best.c, best.gamma, table


# ============================================================================
# PATCH DIRECTORIES
# ============================================================================

def _patch_files(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"patch directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in PATCH_SUFFIXES)


def load_patch_dirs(
    pos_dir: Union[str, Path], neg_dir: Union[str, Path], patch_size: int = 30
) -> List[TexelSample]:
    """Load positive then negative patches, each directory in lexicographic file order."""
    samples: List[TexelSample] = []
    for directory, label in ((Path(pos_dir), 1), (Path(neg_dir), -1)):
        for path in _patch_files(directory):
            patch = load_gray(path)
            if patch.width != patch_size or patch.height != patch_size:
                raise PatchSizeError(path, (patch.width, patch.height), patch_size)
            samples.append(TexelSample(patch, label))
    logger.info("loaded %d patches from %s and %s", len(samples), pos_dir, neg_dir)
    return samples
