"""`register`: estimate every frame's transform into the reference frame."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import List, Optional

from core.imagecore import BinaryMask, GrayImage, load_gray, load_mask
from core.motion import register_frames, save_transforms
from core.settings import RunConfig
from cli.cli_utils import EXIT_OK, emit, list_frames, list_images
from cli.commands import Command

logger = logging.getLogger(__name__)


def load_frames(directory: Path) -> List[GrayImage]:
    return [load_gray(p) for p in list_frames(directory)]


def load_masks(directory: Optional[Path], frames: List[GrayImage]) -> List[BinaryMask]:
    """mask_* images from `directory`, or empty masks when none is given."""
    if directory is None:
        return [BinaryMask.zeros(f.width, f.height) for f in frames]
    masks = [load_mask(p) for p in list_images(directory, "mask_")]
    if len(masks) != len(frames):
        raise FileNotFoundError(f"{directory}: {len(masks)} mask_* images for {len(frames)} frames")
    return masks


class RegisterCommand(Command):
    name = "register"
    help = "register frames to the reference and write transforms.txt"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("frames", type=Path, help="directory of frame_* images")
        parser.add_argument("--masks", type=Path, help="directory of mask_* fence masks")

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        frames = load_frames(args.frames)
        masks = load_masks(args.masks, frames)
        transforms = register_frames(frames, masks, config["reference"], config.registration_params())
        save_transforms(transforms, args.out / "transforms.txt")
        for index, t in enumerate(transforms):
            emit("transform", index, t.a11, t.a12, t.a21, t.a22, t.b1, t.b2)
        return EXIT_OK
