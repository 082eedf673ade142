import pathlib
import sys
import unittest

import numpy as np

PROJECT_ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core import fusion
from core.errors import CapacityError, DegenerateInputError, DimensionError, ParameterError
from core.evalsynth import (
    FenceSpec,
    generate_scene,
    make_background,
    reference_truth,
    rmse,
    scene_transforms,
    ssim,
)
from core.fusion import CostField, EnergyParams
from core.imagecore import BinaryMask, GrayImage
from core.motion import AffineTransform


def field(costs):
    costs = np.asarray(costs, dtype=np.float64)
    return CostField(costs, np.ones(costs.shape[:2], dtype=np.int64))


class MessageTests(unittest.TestCase):
    def test_smoothness_cost(self):
        self.assertEqual(fusion.smoothness_cost(3, 7, 2.0), 8.0)
        self.assertEqual(fusion.smoothness_cost(7, 3, 2.0), 8.0)
        np.testing.assert_array_equal(fusion.smoothness_cost([0, 5], [5, 0], 1.5), [7.5, 7.5])

    def test_lower_envelope_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for lam in (0.0, 0.5, 3.0):
            base = rng.uniform(0, 50, size=(4, 16))
            labels = np.arange(16)
            expected = (base[:, :, None] + lam * np.abs(labels[:, None] - labels[None, :])).min(axis=1)
            np.testing.assert_array_equal(fusion.lower_envelope(base, lam), expected)

    def test_naive_update_hand_example(self):
        incoming = [np.zeros(2)] * 3
        D = np.array([0.0, 10.0])
        np.testing.assert_array_equal(fusion.message_update_naive(incoming, D, 3.0), [0.0, 3.0])
        np.testing.assert_array_equal(fusion.message_update_dt(incoming, D, 3.0), [0.0, 3.0])

    def test_distance_transform_equals_naive_on_integers(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            D = rng.integers(0, 1000, size=256)
            incoming = [rng.integers(0, 500, size=256) for _ in range(3)]
            lam = int(rng.integers(0, 20))
            np.testing.assert_array_equal(
                fusion.message_update_dt(incoming, D, lam),
                fusion.message_update_naive(incoming, D, lam),
            )

    def test_distance_transform_equals_naive_on_reals(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            D = rng.uniform(0, 1000, size=256)
            incoming = [rng.uniform(0, 500, size=256) for _ in range(3)]
            lam = float(rng.uniform(0, 20))
            np.testing.assert_array_equal(
                fusion.message_update_dt(incoming, D, lam),
                fusion.message_update_naive(incoming, D, lam),
            )

    def test_messages_are_normalised(self):
        msg = fusion.message_update_dt([np.full(8, 7.0)], np.arange(8.0) + 3.0, 1.0)
        self.assertEqual(msg.min(), 0.0)


class EnergyTests(unittest.TestCase):
    def test_hand_example(self):
        costs = field([[[0.0, 1.0, 2.0], [2.0, 1.0, 0.0]]])
        self.assertEqual(fusion.energy(np.array([[0, 2]]), costs, 1.5), 3.0)
        self.assertEqual(fusion.energy(np.array([[1, 1]]), costs, 1.5), 2.0)
        with self.assertRaises(DimensionError):
            fusion.energy(np.zeros((2, 2), dtype=int), costs, 1.0)

    def test_build_data_cost(self):
        frames = [GrayImage.constant(1, 1, 3.0), GrayImage.constant(1, 1, 5.0)]
        both = fusion.build_data_cost(frames, [BinaryMask(np.ones((1, 1)))] * 2, labels=8)
        f = np.arange(8.0)
        np.testing.assert_array_equal(both.costs[0, 0], (f - 3) ** 2 + (f - 5) ** 2)
        self.assertEqual(int(both.counts[0, 0]), 2)
        self.assertEqual(both.labels, 8)
        one = fusion.build_data_cost(frames, [BinaryMask(np.ones((1, 1))), BinaryMask.zeros(1, 1)], labels=8)
        np.testing.assert_array_equal(one.costs[0, 0], (f - 3) ** 2)
        self.assertEqual(int(one.counts[0, 0]), 1)
        with self.assertRaises(DimensionError):
            fusion.build_data_cost(frames, [BinaryMask.zeros(1, 1)])

    def test_summed_quadratics_centre_on_the_mean(self):
        frames = [GrayImage.constant(1, 1, 90.0), GrayImage.constant(1, 1, 110.0)]
        costs = fusion.build_data_cost(frames, [BinaryMask(np.ones((1, 1)))] * 2)
        np.testing.assert_array_equal(fusion.data_only_labeling(costs), [[100]])

    def test_params_validation(self):
        for bad in (dict(lam=-1.0), dict(labels=1), dict(iterations=0), dict(schedule="random")):
            with self.assertRaises(ParameterError):
                EnergyParams(**bad)


class BeliefPropagationTests(unittest.TestCase):
    def test_chain_reaches_exact_optimum(self):
        for schedule in ("synchronous", "checkerboard"):
            for seed in range(50):
                costs = field(np.random.default_rng(seed).uniform(0, 10, size=(1, 8, 8)))
                labeling, _ = fusion.lbp_run(costs, EnergyParams(lam=1.0, labels=8, schedule=schedule))
                optimum = fusion.brute_force_map(costs, 1.0)
                self.assertAlmostEqual(
                    fusion.energy(labeling, costs, 1.0), fusion.energy(optimum, costs, 1.0), delta=1e-9
                )

    def test_loopy_grid_is_near_optimal(self):
        for seed in range(20):
            costs = field(np.random.default_rng(100 + seed).uniform(0, 10, size=(3, 3, 4)))
            labeling, _ = fusion.lbp_run(costs, EnergyParams(lam=1.0, labels=4))
            best = fusion.energy(fusion.brute_force_map(costs, 1.0), costs, 1.0)
            found = fusion.energy(labeling, costs, 1.0)
            self.assertGreaterEqual(found, best - 1e-9)
            self.assertLessEqual(found, 1.05 * best)

    def test_zero_lambda_is_data_only(self):
        costs = field(np.random.default_rng(3).uniform(0, 10, size=(4, 5, 6)))
        labeling, _ = fusion.lbp_run(costs, EnergyParams(lam=0.0, labels=6))
        np.testing.assert_array_equal(labeling, fusion.data_only_labeling(costs))

    def test_checkerboard_gives_way_to_uniform_as_lambda_grows(self):
        a, b = [0.0, 1.0], [1.0, 0.5]
        costs = field([[a, b], [b, a]])
        for lam, expected in ((0.0, [[0, 1], [1, 0]]), (5.0, [[0, 0], [0, 0]])):
            np.testing.assert_array_equal(fusion.brute_force_map(costs, lam), expected)
            for schedule in ("synchronous", "checkerboard"):
                labeling, _ = fusion.lbp_run(costs, EnergyParams(lam=lam, labels=2, schedule=schedule))
                np.testing.assert_array_equal(labeling, expected)

    def test_constant_offset_on_one_pixel_keeps_labeling(self):
        raw = np.random.default_rng(6).integers(0, 20, size=(3, 4, 5)).astype(np.float64)
        shifted = raw.copy()
        shifted[1, 2] += 7.0
        params = EnergyParams(lam=2.0, labels=5)
        np.testing.assert_array_equal(
            fusion.lbp_run(field(shifted), params)[0], fusion.lbp_run(field(raw), params)[0]
        )
        small = raw[:2, :2, :4].copy()
        small_shifted = small.copy()
        small_shifted[1, 1] += 7.0
        np.testing.assert_array_equal(
            fusion.brute_force_map(field(small_shifted), 2.0), fusion.brute_force_map(field(small), 2.0)
        )

    def test_beliefs_stay_finite_over_long_runs(self):
        costs = field(np.random.default_rng(7).uniform(0, 100, size=(4, 4, 8)))
        _, beliefs = fusion.lbp_run(costs, EnergyParams(lam=3.0, labels=8, iterations=1000))
        self.assertTrue(np.all(np.isfinite(beliefs)))

    def test_brute_force_capacity(self):
        with self.assertRaises(CapacityError):
            fusion.brute_force_map(field(np.zeros((4, 4, 4))), 1.0)


class RegistrationOfObservationsTests(unittest.TestCase):
    def test_identity_transforms(self):
        rng = np.random.default_rng(4)
        frames = [GrayImage(rng.uniform(0, 255, size=(12, 10))) for _ in range(2)]
        fence = np.zeros((12, 10), dtype=np.uint8)
        fence[:, 4] = 1
        masks = [BinaryMask(fence), BinaryMask.zeros(10, 12)]
        warped, visible = fusion.register_observations(frames, masks, [AffineTransform.identity()] * 2)
        for frame, image in zip(frames, warped):
            np.testing.assert_allclose(image.data, frame.data)
        np.testing.assert_array_equal(visible[0].data, 1 - fence)
        self.assertEqual(visible[1].count(), 120)
        self.assertAlmostEqual(fusion.coverage_stats(visible[:1]), 12 / 120)
        with self.assertRaises(DimensionError):
            fusion.register_observations(frames, masks, [AffineTransform.identity()])


class FuseTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        shifts = [(0, 0), (5, 0), (0, 5), (5, 5)]
        cls.scene = generate_scene(make_background(64, 64, 0), FenceSpec(), shifts, noise_sigma=1.0, seed=0)
        cls.transforms = scene_transforms(cls.scene, 0)
        cls.result = fusion.fuse(cls.scene.frames, cls.scene.fence_masks, cls.transforms, 0)

    def test_occluded_pixels_are_recovered(self):
        truth = reference_truth(self.scene, 0)
        self.assertEqual(self.result.uncovered, 0.0)
        self.assertLessEqual(rmse(self.result.image, truth, self.scene.fence_masks[0]), 2.0)
        self.assertGreaterEqual(ssim(self.result.image, truth), 0.95)
        self.assertLess(self.result.energy_final, self.result.energy_initial)

    def test_output_is_integral_and_in_range(self):
        data = self.result.image.data
        self.assertTrue(np.all(data == np.floor(data)))
        self.assertTrue(np.all((data >= 0) & (data <= 255)))

    def test_keep_reference_copies_visible_pixels(self):
        params = EnergyParams(keep_reference=True, iterations=5)
        result = fusion.fuse(self.scene.frames, self.scene.fence_masks, self.transforms, 0, params)
        seen = result.visibility[0].data.astype(bool)
        expected = np.clip(np.floor(self.scene.frames[0].data + 0.5), 0, 255)
        np.testing.assert_array_equal(result.image.data[seen], expected[seen])

    def test_reference_out_of_range(self):
        with self.assertRaises(ParameterError):
            fusion.fuse(self.scene.frames, self.scene.fence_masks, self.transforms, reference=4)


class FuseEdgeCaseTests(unittest.TestCase):
    def test_fully_fenced_input(self):
        frames = [GrayImage.constant(8, 8, 10.0)] * 2
        masks = [BinaryMask(np.ones((8, 8)))] * 2
        with self.assertRaises(DegenerateInputError):
            fusion.fuse(frames, masks, [AffineTransform.identity()] * 2)

    def test_constant_frames_fuse_to_the_constant(self):
        frames = [GrayImage.constant(16, 16, 100.0)] * 2
        first, second = np.zeros((16, 16), dtype=np.uint8), np.zeros((16, 16), dtype=np.uint8)
        first[:, 3] = 1
        second[:, 8] = 1
        for lam in (0.5, 10.0):
            result = fusion.fuse(
                frames, [BinaryMask(first), BinaryMask(second)], [AffineTransform.identity()] * 2, 0,
                EnergyParams(lam=lam, iterations=10),
            )
            np.testing.assert_array_equal(result.image.data, np.full((16, 16), 100.0))

    def test_single_unfenced_frame_without_smoothing(self):
        frame = GrayImage(np.random.default_rng(5).integers(0, 256, size=(16, 16)))
        out = fusion.defence([frame], [BinaryMask.zeros(16, 16)], [AffineTransform.identity()], 0, EnergyParams(lam=0.0))
        np.testing.assert_array_equal(out.data, frame.data)


if __name__ == "__main__":
    unittest.main()
