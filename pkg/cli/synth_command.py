"""`synth`: generate a synthetic fenced scene bundle."""
from __future__ import annotations

import argparse
import logging

from core.evalsynth import coverage_fraction, generate_scene, make_background, save_scene
from core.settings import RunConfig
from cli.cli_utils import EXIT_OK, emit
from cli.commands import Command

logger = logging.getLogger(__name__)


class SynthCommand(Command):
    name = "synth"
    help = "write a synthetic scene bundle (frames, fence masks, joints, truth)"

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        seed = config["seed"]
        truth = make_background(config["width"], config["height"], seed)
        scene = generate_scene(truth, config.fence_spec(), config.shifts, config["noise_sigma"], seed)
        save_scene(scene, args.out)

        coverage = coverage_fraction(scene)
        emit("frames", len(scene.frames))
        emit("mask_density", float(scene.fence_masks[0].data.mean()))
        emit("coverage", coverage)
        emit("uncovered", 1.0 - coverage)
        emit("joints", len(scene.joint_coords[0]))
        return EXIT_OK
