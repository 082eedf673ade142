"""`eval`: image quality (RMSE/PSNR/SSIM) or mask agreement (P/R/F/IoU)."""
from __future__ import annotations

import argparse
from pathlib import Path

from core.evalsynth import psnr_from_rmse, rmse, score_mask, ssim
from core.imagecore import load_gray, load_mask
from core.settings import RunConfig
from cli.cli_utils import EXIT_OK, emit
from cli.commands import Command


class EvalCommand(Command):
    name = "eval"
    help = "compare a result image with the truth, or a predicted mask with a true mask"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("kind", choices=("image", "mask"))
        parser.add_argument("result", type=Path)
        parser.add_argument("truth", type=Path)
        parser.add_argument("--region", type=Path, help="image: mask restricting an extra rmse_region line")

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        if args.kind == "mask":
            score, iou = score_mask(load_mask(args.result), load_mask(args.truth))
            emit("precision", score.precision)
            emit("recall", score.recall)
            emit("f_measure", score.f_measure)
            emit("iou", iou)
            return EXIT_OK
        result, truth = load_gray(args.result), load_gray(args.truth)
        error = rmse(result, truth)
        emit("rmse", error)
        emit("psnr", psnr_from_rmse(error))
        emit("ssim", ssim(result, truth))
        if args.region is not None:
            emit("rmse_region", rmse(result, truth, load_mask(args.region)))
        return EXIT_OK
