"""`detect`: find fence joints in one image and render the fence mask."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from core.evalsynth import detectable, load_joints, score_detections
from core.imagecore import load_gray, save_mask
from core.lattice import detect_lattice, save_detections, window_size
from core.model_io import load_detector
from core.settings import RunConfig
from cli.cli_utils import EXIT_DEGRADED, EXIT_OK, emit, save_annotated
from cli.commands import Command

logger = logging.getLogger(__name__)


class DetectCommand(Command):
    name = "detect"
    help = "detect fence joints and write mask.pgm, joints.txt and annotated.png"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("image", type=Path)
        parser.add_argument("--model", type=Path, required=True, help="classifier or network file")
        parser.add_argument("--truth", type=Path, help="ground-truth joints ('x y' per line) to score against")

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        model = load_detector(args.model)
        img = load_gray(args.image)
        result = detect_lattice(img, model, config.detector_config(), config.hog_params())

        out: Path = args.out
        save_mask(result.mask, out / "mask.pgm")
        save_detections(result.lattice.joints, out / "joints.txt")
        save_annotated(img, result.lattice, out / "annotated.png")

        emit("detections", len(result.detections))
        emit("joints", len(result.lattice.joints))
        emit("edges", len(result.lattice.edges))
        emit("degenerate", result.degenerate)
        if not result.degenerate:
            emit("texel_width", result.lattice.texel_w)
            emit("texel_height", result.lattice.texel_h)
            emit("bar_width", result.bar_width)
        if args.truth is not None:
            truth = detectable(load_joints(args.truth), img.width, img.height, window_size(model))
            score = score_detections(result.lattice.joints, truth, config["match_radius"])
            emit("precision", score.precision)
            emit("recall", score.recall)
            emit("f_measure", score.f_measure)
        if result.degenerate:
            logger.warning("no fence lattice found in %s; wrote an empty mask", args.image)
            return EXIT_DEGRADED
        return EXIT_OK
