"""`train`: fit the joint classifier (HOG + max-margin) or the convolutional network."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import List

import numpy as np

from core import classifier, cnn
from core.classifier import TexelSample
from core.errors import ParameterError
from core.evalsynth import crop_training_patches, load_scene
from core.imagecore import resize_bilinear
from core.model_io import save_classifier, save_network
from core.settings import RunConfig
from cli.cli_utils import EXIT_OK, emit
from cli.commands import Command

logger = logging.getLogger(__name__)


class TrainCommand(Command):
    name = "train"
    help = "train a joint detector from patch directories or scene bundles"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("backend", choices=("svm", "cnn"))
        parser.add_argument("--scene", type=Path, action="append", default=[], help="scene bundle; may be repeated")
        parser.add_argument("--pos", type=Path, help="directory of positive 30x30 patches")
        parser.add_argument("--neg", type=Path, help="directory of negative 30x30 patches")
        parser.add_argument("--model", type=Path, help="output model path (default: OUT/model.bin)")
        parser.add_argument("--gradient-check", action="store_true", help="cnn: finite-difference check before training")

    def gather(self, args: argparse.Namespace, config: RunConfig) -> List[TexelSample]:
        samples: List[TexelSample] = []
        if args.pos is not None or args.neg is not None:
            if args.pos is None or args.neg is None:
                raise ParameterError("--pos and --neg must be given together")
            samples.extend(classifier.load_patch_dirs(args.pos, args.neg))
        for index, directory in enumerate(args.scene):
            scene = load_scene(directory)
            samples.extend(crop_training_patches(
                scene, seed=config["seed"] + index, negatives_per_joint=config["negatives_per_joint"],
            ))
        if not samples:
            raise ParameterError("no training data: give --scene or --pos/--neg")
        return samples

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        samples = self.gather(args, config)
        positives = sum(1 for s in samples if s.label == 1)
        emit("samples", len(samples))
        emit("positives", positives)
        emit("negatives", len(samples) - positives)
        model_path = args.model or args.out / "model.bin"
        if args.backend == "svm":
            self.train_svm(samples, config, model_path)
        else:
            self.train_cnn(samples, config, model_path, args.gradient_check)
        emit("model", str(model_path))
        return EXIT_OK

    def train_svm(self, samples: List[TexelSample], config: RunConfig, model_path: Path) -> None:
        features = classifier.featurize(samples, config.hog_params())
        kind = config["svm_kind"]
        c, gamma, table = classifier.grid_search_cv(
            features, config.c_grid(), config.gamma_grid(), config["cv_folds"], config["seed"], kind,
        )
        for row in table:
            emit("cv", row.c, row.gamma, row.mean_error)
        emit("selected_c", c)
        emit("selected_gamma", gamma)
        model = classifier.train(features, kind=kind, c=c, gamma=gamma, seed=config["seed"])
        emit("train_accuracy", classifier.accuracy(model, features))
        save_classifier(model, model_path)

    def train_cnn(self, samples: List[TexelSample], config: RunConfig, model_path: Path, check: bool) -> None:
        net = cnn.init_network(config["seed"])
        if check:
            emit("gradient_check_max_rel_error", cnn.gradient_check(net, seed=config["seed"]))
        net, trace = cnn.train(net, samples, config.train_config(), config.augment_policy())
        for epoch, loss in enumerate(trace, start=1):
            emit("epoch", epoch, loss)
        inputs = [resize_bilinear(s.patch, cnn.INPUT_SIZE, cnn.INPUT_SIZE) for s in samples]
        predicted = np.where(cnn.predict(net, inputs) >= 0.5, 1, -1)
        labels = np.array([s.label for s in samples])
        emit("train_accuracy", float(np.mean(predicted == labels)))
        save_network(net, model_path)
