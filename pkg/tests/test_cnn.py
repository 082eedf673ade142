import pathlib
import sys
import unittest

import numpy as np

PROJECT_ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core import cnn
from core.classifier import TexelSample
from core.errors import DegenerateTrainingError, DimensionError, ParameterError, StateError
from core.imagecore import GrayImage


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def naive_forward(net, x):
    """Loop-based forward pass for one 32x32 input."""
    a1 = np.zeros((6, 28, 28))
    for k in range(6):
        for i in range(28):
            for j in range(28):
                a1[k, i, j] = _sig(np.sum(x[i:i + 5, j:j + 5] * net.w1[k]) + net.b1[k])
    p1 = np.zeros((6, 14, 14))
    for k in range(6):
        for i in range(14):
            for j in range(14):
                p1[k, i, j] = a1[k, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    a2 = np.zeros((12, 10, 10))
    for k in range(12):
        for i in range(10):
            for j in range(10):
                a2[k, i, j] = _sig(np.sum(p1[:, i:i + 5, j:j + 5] * net.w2[k]) + net.b2[k])
    p2 = np.zeros((12, 5, 5))
    for k in range(12):
        for i in range(5):
            for j in range(5):
                p2[k, i, j] = a2[k, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return _sig(np.dot(p2.ravel(), net.w_fc) + net.b_fc[0])


def striped_samples(count=4):
    """Vertical stripes are joints, horizontal stripes are not."""
    samples = []
    for i in range(count):
        stripes = (np.arange(30) // (3 + i) % 2) * 200.0 + 20.0
        samples.append(TexelSample(GrayImage(np.tile(stripes, (30, 1))), 1))
        samples.append(TexelSample(GrayImage(np.tile(stripes[:, None], (1, 30))), -1))
    return samples


class ForwardTests(unittest.TestCase):
    def setUp(self):
        self.net = cnn.init_network(seed=0)
        self.rng = np.random.default_rng(0)

    def test_shape_chain(self):
        _, cache = cnn.forward(self.net, self.rng.uniform(0, 1, size=(2, 32, 32)))
        self.assertEqual(cache.a1.shape, (2, 6, 28, 28))
        self.assertEqual(cache.p1.shape, (2, 6, 14, 14))
        self.assertEqual(cache.a2.shape, (2, 12, 10, 10))
        self.assertEqual(cache.p2.shape, (2, 12, 5, 5))
        self.assertEqual(cache.flat.shape, (2, 300))
        self.assertEqual(cache.out.shape, (2,))
        self.assertEqual(self.net.parameter_count, 2269)

    def test_forward_matches_loop_oracle(self):
        net = cnn.CnnNetwork.from_parameters(
            {name: self.rng.normal(0, 0.3, size=shape) for name, shape in cnn.PARAM_SHAPES.items()}
        )
        x = self.rng.uniform(0, 1, size=(10, 32, 32))
        out = cnn.predict(net, x)
        for n in range(10):
            self.assertAlmostEqual(out[n], naive_forward(net, x[n]), delta=1e-10)

    def test_zero_network_outputs_one_half(self):
        out = cnn.predict(cnn.CnnNetwork.zeros(), np.zeros((3, 32, 32)))
        np.testing.assert_array_equal(out, [0.5, 0.5, 0.5])

    def test_gray_images_are_scaled(self):
        img = GrayImage(self.rng.uniform(0, 255, size=(32, 32)))
        np.testing.assert_allclose(cnn.predict(self.net, [img]), cnn.predict(self.net, img.data[None] / 255.0))

    def test_wrong_input_size(self):
        with self.assertRaises(DimensionError):
            cnn.forward(self.net, np.zeros((1, 30, 30)))

    def test_max_pool_first_max_wins(self):
        a = np.array([[[[1.0, 1.0], [0.0, 0.0]]]])
        pooled, idx = cnn.max_pool(a)
        self.assertEqual(pooled[0, 0, 0, 0], 1.0)
        self.assertEqual(idx[0, 0, 0, 0], 0)
        routed = cnn.unpool(np.array([[[[5.0]]]]), idx)
        np.testing.assert_array_equal(routed[0, 0], [[5.0, 0.0], [0.0, 0.0]])

    def test_unpool_conserves_delta_mass(self):
        rng = np.random.default_rng(3)
        _, idx = cnn.max_pool(rng.uniform(size=(2, 3, 8, 8)))
        delta = rng.normal(size=(2, 3, 4, 4))
        routed = cnn.unpool(delta, idx)
        self.assertEqual(routed.shape, (2, 3, 8, 8))
        self.assertAlmostEqual(routed.sum(), delta.sum(), delta=1e-12)
        self.assertEqual(np.count_nonzero(routed), np.count_nonzero(delta))

    def test_network_rejects_bad_shapes(self):
        params = self.net.parameters()
        params = dict(params, w1=np.zeros((6, 4, 4)))
        with self.assertRaises(DimensionError):
            cnn.CnnNetwork.from_parameters(params)


class BackwardTests(unittest.TestCase):
    def setUp(self):
        self.net = cnn.init_network(seed=1)

    def test_gradient_check(self):
        self.assertLess(cnn.gradient_check(self.net, probes=200, seed=0), 1e-4)

    def test_gradient_check_limits(self):
        self.assertEqual(cnn.gradient_check(self.net, probes=0), 0.0)
        with self.assertRaises(ParameterError):
            cnn.gradient_check(self.net, probes=5, h=1e-2)

    def test_backward_needs_cache(self):
        _, cache = cnn.forward(self.net, np.zeros((1, 32, 32)), keep_cache=False)
        with self.assertRaises(StateError):
            cnn.backward(self.net, cache, [1.0])

    def test_zero_residual_gives_zero_gradients(self):
        out, cache = cnn.forward(self.net, np.random.default_rng(4).uniform(0, 1, size=(3, 32, 32)))
        grads = cnn.backward(self.net, cache, out)
        for name, grad in grads.as_dict().items():
            self.assertFalse(np.any(grad), name)

    def test_sgd_step_update_rule(self):
        grads = cnn.Gradients(**{name: np.full(shape, 0.2) for name, shape in cnn.PARAM_SHAPES.items()})
        frozen = cnn.sgd_step(self.net, grads, 0.0)
        for name, value in self.net.parameters().items():
            np.testing.assert_array_equal(frozen.parameters()[name], value)
        moved = cnn.sgd_step(self.net, grads, 0.1)
        np.testing.assert_allclose(moved.b_fc, self.net.b_fc - 0.02)
        np.testing.assert_allclose(moved.w1, self.net.w1 - 0.02)

    def test_sgd_step_checks_shapes(self):
        grads = cnn.Gradients(**{name: np.zeros(shape) for name, shape in cnn.PARAM_SHAPES.items()})
        same = cnn.sgd_step(self.net, grads, 0.5)
        np.testing.assert_array_equal(same.w2, self.net.w2)
        bad = cnn.Gradients(**dict(grads.as_dict(), b2=np.zeros(3)))
        with self.assertRaises(DimensionError):
            cnn.sgd_step(self.net, bad, 0.5)


class TrainingTests(unittest.TestCase):
    def test_augment_crops_then_appends_mirrors(self):
        images = [GrayImage(np.arange(36, dtype=np.float64).reshape(6, 6)), GrayImage.zeros(6, 6)]
        out = cnn.augment(images, cnn.AugmentPolicy(flip_y=True, center_crop=4))
        self.assertEqual(len(out), 4)
        np.testing.assert_array_equal(out[0].data, images[0].data[1:5, 1:5])
        np.testing.assert_array_equal(out[2].data, out[0].data[:, ::-1])
        with self.assertRaises(ParameterError):
            cnn.augment(images, cnn.AugmentPolicy(center_crop=7))

    def test_full_batch_training_lowers_loss(self):
        cfg = cnn.TrainConfig(batch_size=100, epochs=30, learning_rate=1.0, seed=0)
        _, trace = cnn.train(cnn.init_network(0), striped_samples(), cfg)
        self.assertEqual(len(trace), 30)
        self.assertLess(trace[-1], trace[0])

    def test_training_is_deterministic(self):
        cfg = cnn.TrainConfig(batch_size=4, epochs=2, seed=7)
        a, trace_a = cnn.train(cnn.init_network(2), striped_samples(2), cfg)
        b, trace_b = cnn.train(cnn.init_network(2), striped_samples(2), cfg)
        self.assertEqual(trace_a, trace_b)
        np.testing.assert_array_equal(a.w_fc, b.w_fc)

    def test_flip_augmentation_doubles_the_training_set(self):
        cfg = cnn.TrainConfig(batch_size=16, epochs=1, seed=0)
        with self.assertLogs("core.cnn", level="INFO") as logs:
            cnn.train(cnn.init_network(0), striped_samples(4), cfg)
        self.assertIn("training CNN on 16 inputs (8 before augmentation)", logs.output[0])
        with self.assertLogs("core.cnn", level="INFO") as logs:
            cnn.train(cnn.init_network(0), striped_samples(4), cfg, cnn.AugmentPolicy(flip_y=False))
        self.assertIn("training CNN on 8 inputs (8 before augmentation)", logs.output[0])

    def test_single_class_is_rejected(self):
        samples = [s for s in striped_samples() if s.label == 1]
        with self.assertRaises(DegenerateTrainingError):
            cnn.train(cnn.init_network(0), samples, cnn.TrainConfig(epochs=1))
        with self.assertRaises(ParameterError):
            cnn.TrainConfig(batch_size=0)


if __name__ == "__main__":
    unittest.main()
