"""`defence`: register frames and reconstruct the fence-free reference frame."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import List

from core.evalsynth import rmse, ssim
from core.fusion import fuse
from core.imagecore import BinaryMask, GrayImage, load_gray, save_gray
from core.lattice import detect_lattice
from core.model_io import load_detector, save_costs
from core.motion import load_transforms, register_frames, save_transforms
from core.settings import RunConfig
from cli.cli_utils import EXIT_OK, Stopwatch, emit
from cli.commands import Command
from cli.register_command import load_frames, load_masks

logger = logging.getLogger(__name__)


class DefenceCommand(Command):
    name = "defence"
    help = "remove the fence from the reference frame of a frame directory"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("frames", type=Path, help="directory of frame_* images")
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument("--masks", type=Path, help="directory of mask_* fence masks")
        source.add_argument("--model", type=Path, help="detector used to find each frame's fence mask")
        parser.add_argument("--transforms", type=Path, help="transforms.txt to use instead of registering")
        parser.add_argument("--reference", type=int, help="reference frame index (overrides the setting)")
        parser.add_argument("--truth", type=Path, help="fence-free reference image to score against")
        parser.add_argument("--dump-costs", action="store_true", help="also write the data costs as costs.bin")

    def detect_masks(self, frames: List[GrayImage], model_path: Path, config: RunConfig) -> List[BinaryMask]:
        model = load_detector(model_path)
        masks = []
        for index, frame in enumerate(frames):
            result = detect_lattice(frame, model, config.detector_config(), config.hog_params())
            if result.degenerate:
                logger.warning("frame %d: no fence lattice found; treating it as unoccluded", index)
            masks.append(result.mask)
        return masks

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        if args.reference is not None:
            config = config.with_overrides({"reference": args.reference})
        reference = config["reference"]
        out: Path = args.out
        clock = Stopwatch()

        with clock.stage("load"):
            frames = load_frames(args.frames)
        with clock.stage("masks"):
            if args.model is not None:
                masks = self.detect_masks(frames, args.model, config)
            else:
                masks = load_masks(args.masks, frames)
        with clock.stage("register"):
            if args.transforms is not None:
                transforms = load_transforms(args.transforms)
            else:
                transforms = register_frames(frames, masks, reference, config.registration_params())
                save_transforms(transforms, out / "transforms.txt")
        with clock.stage("fuse"):
            result = fuse(frames, masks, transforms, reference, config.energy_params())

        save_gray(result.image, out / "defenced.pgm")
        save_gray(result.image, out / "defenced.png")
        if args.dump_costs:
            save_costs(result.costs, out / "costs.bin")

        emit("frames", len(frames))
        emit("reference", reference)
        emit("energy_before", result.energy_initial)
        emit("energy_after", result.energy_final)
        emit("uncovered", result.uncovered)
        if args.truth is not None:
            truth = load_gray(args.truth)
            emit("rmse", rmse(result.image, truth))
            emit("rmse_occluded", rmse(result.image, truth, masks[reference]))
            emit("ssim", ssim(result.image, truth))
        clock.emit()
        return EXIT_OK
