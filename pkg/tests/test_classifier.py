import pathlib
import sys
import tempfile
import unittest

import numpy as np

PROJECT_ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core import classifier
from core.classifier import ClassifierModel, TexelSample
from core.errors import DegenerateTrainingError, DimensionError, ParameterError, PatchSizeError
from core.imagecore import GrayImage, save_gray


def blobs(rng, n=40, spread=0.5):
    pos = rng.normal(3.0, spread, size=(n, 2))
    neg = rng.normal(-3.0, spread, size=(n, 2))
    return [(x, 1) for x in pos] + [(x, -1) for x in neg]


XOR = [
    (np.array([1.0, 1.0]), 1),
    (np.array([-1.0, -1.0]), 1),
    (np.array([1.0, -1.0]), -1),
    (np.array([-1.0, 1.0]), -1),
]


class LinearTests(unittest.TestCase):
    def setUp(self):
        self.samples = blobs(np.random.default_rng(0))

    def test_separable_data_is_learned(self):
        model = classifier.train(self.samples, kind="linear", c=10.0, seed=0)
        self.assertEqual(model.kind, "linear")
        self.assertEqual(model.dims, 2)
        self.assertEqual(classifier.accuracy(model, self.samples), 1.0)

    def test_objective_not_worse_than_zero_model(self):
        X, y = classifier.as_arrays(self.samples)
        model = classifier.train(self.samples, c=10.0)
        zero = classifier.hinge_objective(np.zeros(2), 0.0, X, y, 10.0)
        self.assertLessEqual(classifier.hinge_objective(model.weights, model.bias, X, y, 10.0), zero)

    def test_training_is_deterministic(self):
        a = classifier.train(self.samples, seed=3)
        b = classifier.train(self.samples, seed=3)
        np.testing.assert_array_equal(a.weights, b.weights)
        self.assertEqual(a.bias, b.bias)

    def test_zero_score_predicts_joint(self):
        model = ClassifierModel("linear", bias=0.0, c=1.0, weights=np.zeros(3))
        self.assertEqual(classifier.predict(model, np.ones(3)), (0.0, 1))

    def test_dimension_mismatch(self):
        model = classifier.train(self.samples)
        with self.assertRaises(DimensionError):
            classifier.decision_scores(model, np.zeros((1, 3)))

    def test_bad_inputs(self):
        with self.assertRaises(DegenerateTrainingError):
            classifier.train([(np.zeros(2), 1), (np.ones(2), 1)])
        with self.assertRaises(ParameterError):
            classifier.train(self.samples, c=0.0)
        with self.assertRaises(ParameterError):
            classifier.train(self.samples, kind="poly")
        with self.assertRaises(ParameterError):
            classifier.train(self.samples, kind="rbf", gamma=0.0)
        with self.assertRaises(ParameterError):
            TexelSample(GrayImage.zeros(30, 30), 0)


class RbfTests(unittest.TestCase):
    def test_xor_is_separated(self):
        model = classifier.train(XOR, kind="rbf", c=10.0, gamma=1.0)
        self.assertEqual(classifier.accuracy(model, XOR), 1.0)

    def test_dual_constraints_hold(self):
        samples = blobs(np.random.default_rng(1), n=15, spread=2.0)
        model = classifier.train(samples, kind="rbf", c=1.0, gamma=0.5)
        alphas = np.abs(model.coefficients)
        self.assertTrue(np.all(alphas > 0))
        self.assertTrue(np.all(alphas <= 1.0 + 1e-12))
        self.assertAlmostEqual(float(np.sum(model.coefficients)), 0.0, places=6)

    def test_accuracy_does_not_improve_as_kernel_flattens(self):
        previous = None
        for gamma in (1.0, 1e-3, 1e-6):
            acc = classifier.accuracy(classifier.train(XOR, kind="rbf", c=10.0, gamma=gamma), XOR)
            if previous is not None:
                self.assertLessEqual(acc, previous)
            previous = acc


class CrossValidationTests(unittest.TestCase):
    def test_stratified_folds_balance_classes(self):
        y = np.array([1] * 10 + [-1] * 15)
        folds = classifier.stratified_folds(y, 5, seed=0)
        for k in range(5):
            self.assertEqual(int(np.sum((folds == k) & (y == 1))), 2)
            self.assertEqual(int(np.sum((folds == k) & (y == -1))), 3)

    def test_too_few_samples_per_class(self):
        with self.assertRaises(ParameterError):
            classifier.stratified_folds(np.array([1, 1, -1, -1, -1]), 3, seed=0)

    def test_grid_search_table_and_tie_break(self):
        samples = blobs(np.random.default_rng(2), n=20)
        c, gamma, table = classifier.grid_search_cv(samples, [100.0, 1.0, 10.0], [1e-3], folds=5, seed=0)
        self.assertEqual(len(table), 3)
        self.assertTrue(all(len(row.fold_errors) == 5 for row in table))
        self.assertTrue(all(row.mean_error == 0.0 for row in table))
        self.assertEqual((c, gamma), (1.0, 1e-3))

    def test_grid_search_is_deterministic(self):
        samples = blobs(np.random.default_rng(3), n=20, spread=3.0)
        first = classifier.grid_search_cv(samples, [0.1, 10.0], [1e-3], seed=4)
        second = classifier.grid_search_cv(samples, [0.1, 10.0], [1e-3], seed=4)
        self.assertEqual(first[:2], second[:2])
        self.assertEqual([r.fold_errors for r in first[2]], [r.fold_errors for r in second[2]])


class PatchDirectoryTests(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        root = pathlib.Path(self._tmp.name)
        self.pos, self.neg = root / "pos", root / "neg"
        self.pos.mkdir()
        self.neg.mkdir()
        rng = np.random.default_rng(5)
        for i in range(3):
            save_gray(GrayImage(rng.integers(0, 256, size=(30, 30))), self.pos / f"p{i}.pgm")
            save_gray(GrayImage(rng.integers(0, 256, size=(30, 30))), self.neg / f"n{i}.png")
        (self.neg / "notes.txt").write_text("ignored")

    def tearDown(self):
        self._tmp.cleanup()

    def test_loads_both_classes_in_order(self):
        samples = classifier.load_patch_dirs(self.pos, self.neg)
        self.assertEqual([s.label for s in samples], [1, 1, 1, -1, -1, -1])
        features = classifier.featurize(samples)
        self.assertEqual(features[0][0].shape, (1296,))

    def test_wrong_patch_size_names_the_file(self):
        save_gray(GrayImage.zeros(28, 30), self.pos / "z.pgm")
        with self.assertRaises(PatchSizeError) as ctx:
            classifier.load_patch_dirs(self.pos, self.neg)
        self.assertIn("z.pgm", str(ctx.exception))

    def test_missing_directory(self):
        with self.assertRaises(FileNotFoundError):
            classifier.load_patch_dirs(self.pos, self.pos.parent / "absent")


if __name__ == "__main__":
    unittest.main()
