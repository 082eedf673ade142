import pathlib
import sys
import tempfile
import unittest

import numpy as np

PROJECT_ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core import cnn, model_io
from core.classifier import ClassifierModel
from core.errors import ModelFormatError
from core.fusion import CostField


class ModelFileTests(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self._tmp.name)
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self._tmp.cleanup()

    def test_linear_round_trip(self):
        model = ClassifierModel("linear", bias=-0.25, c=10.0, weights=self.rng.normal(size=1296))
        path = self.root / "linear.bin"
        model_io.save_classifier(model, path)
        self.assertEqual(path.stat().st_size, 4 + 1 + 4 + 4 + 3 * 8 + 1296 * 8)
        loaded = model_io.load_classifier(path)
        self.assertEqual((loaded.kind, loaded.bias, loaded.c), ("linear", -0.25, 10.0))
        np.testing.assert_array_equal(loaded.weights, model.weights)

    def test_rbf_round_trip(self):
        model = ClassifierModel(
            "rbf", bias=0.5, c=1.0, gamma=0.01,
            support_vectors=self.rng.normal(size=(3, 5)), coefficients=np.array([0.5, -0.25, -0.25]),
        )
        path = self.root / "rbf.bin"
        model_io.save_classifier(model, path)
        loaded = model_io.load_detector(path)
        self.assertEqual((loaded.kind, loaded.gamma, loaded.dims), ("rbf", 0.01, 5))
        np.testing.assert_array_equal(loaded.support_vectors, model.support_vectors)
        np.testing.assert_array_equal(loaded.coefficients, model.coefficients)

    def test_network_round_trip(self):
        net = cnn.init_network(seed=3)
        path = self.root / "net.bin"
        model_io.save_network(net, path)
        loaded = model_io.load_detector(path)
        self.assertIsInstance(loaded, cnn.CnnNetwork)
        for name in cnn.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(loaded, name), getattr(net, name))

    def test_costs_round_trip(self):
        field = CostField(self.rng.uniform(0, 9, size=(2, 3, 4)), np.array([[0, 1, 2], [3, 4, 5]]))
        path = self.root / "costs.bin"
        model_io.save_costs(field, path)
        loaded = model_io.load_costs(path)
        np.testing.assert_array_equal(loaded.costs, field.costs)
        np.testing.assert_array_equal(loaded.counts, field.counts)

    def test_bad_magic(self):
        path = self.root / "junk.bin"
        path.write_bytes(b"NOPE" + bytes(64))
        for loader in (model_io.load_classifier, model_io.load_network, model_io.load_costs, model_io.load_detector):
            with self.assertRaises(ModelFormatError):
                loader(path)

    def test_truncated_and_trailing_bytes(self):
        model = ClassifierModel("linear", bias=0.0, c=1.0, weights=np.ones(4))
        path = self.root / "model.bin"
        model_io.save_classifier(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with self.assertRaises(ModelFormatError):
            model_io.load_classifier(path)
        path.write_bytes(raw + b"\x00")
        with self.assertRaises(ModelFormatError):
            model_io.load_classifier(path)

    def test_network_dimension_mismatch(self):
        path = self.root / "net.bin"
        model_io.save_network(cnn.init_network(0), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (28).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with self.assertRaises(ModelFormatError):
            model_io.load_network(path)


if __name__ == "__main__":
    unittest.main()
