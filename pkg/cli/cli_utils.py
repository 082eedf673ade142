"""Shared CLI helpers: logging setup, key/value output, frame listing and annotated PNGs."""
from __future__ import annotations

import logging
import math
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from core.imagecore import GrayImage, atomic_output
from core.lattice import Lattice

# imported after core.imagecore, which hides the pygame banner
import pygame

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DEGRADED = 2

LOG_FORMAT = "[%(name)s] %(levelname)s: %(message)s"
IMAGE_SUFFIXES = (".pgm", ".png")

EDGE_COLOR = (40, 200, 60)
JOINT_COLOR = (230, 40, 40)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{float(value):.6f}"
    return str(value)


def emit(key: str, *values) -> None:
    """Print one machine-readable `key value...` line on stdout."""
    print(" ".join([key] + [format_value(v) for v in values]), file=sys.stdout)


class Stopwatch:
    """Collects named stage durations for `time_<stage>` output lines."""

    def __init__(self) -> None:
        self.stages: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = time.perf_counter() - start

    def emit(self) -> None:
        for name, seconds in self.stages.items():
            emit(f"time_{name}", seconds)


def list_images(directory: Path, prefix: str) -> List[Path]:
    """`prefix_*` images of a directory in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"directory not found: {directory}")
    return sorted(
        p for p in directory.iterdir()
        if p.name.startswith(prefix) and p.suffix.lower() in IMAGE_SUFFIXES
    )


def list_frames(directory: Path) -> List[Path]:
    frames = list_images(directory, "frame_")
    if not frames:
        raise FileNotFoundError(f"no frame_* images in {directory}")
    return frames


def save_annotated(img: GrayImage, lattice: Lattice, path: Path, joints: Optional[Sequence] = None) -> None:
    """Grey image with lattice edges and joint markers drawn on top."""
    gray = img.quantized()
    rgb = np.repeat(gray[..., None], 3, axis=2)
    surface = pygame.surfarray.make_surface(np.ascontiguousarray(rgb.transpose(1, 0, 2)))
    points = [(j.x, j.y) for j in lattice.joints]
    for a, b in lattice.edges:
        pygame.draw.line(surface, EDGE_COLOR, points[a], points[b], 1)
    for j in joints if joints is not None else lattice.joints:
        pygame.draw.circle(surface, JOINT_COLOR, (int(round(j.x)), int(round(j.y))), 2)
    with atomic_output(path) as tmp:
        pygame.image.save(surface, str(tmp))
