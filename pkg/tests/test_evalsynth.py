import math
import pathlib
import sys
import tempfile
import unittest

import numpy as np

PROJECT_ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core import evalsynth
from core.errors import DimensionError, ParameterError
from core.evalsynth import FenceSpec, generate_scene, make_background
from core.imagecore import BinaryMask, GrayImage
from core.lattice import JointDetection

SHIFTS = [(0, 0), (5, 0), (0, 5), (5, 5)]


def loop_ssim(a, b):
    """Window-by-window SSIM reference."""
    w = evalsynth.ssim_window()
    n = w.shape[0]
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    values = []
    for i in range(a.shape[0] - n + 1):
        for j in range(a.shape[1] - n + 1):
            x, y = a[i:i + n, j:j + n], b[i:i + n, j:j + n]
            mx, my = np.sum(w * x), np.sum(w * y)
            vx = np.sum(w * (x - mx) ** 2)
            vy = np.sum(w * (y - my) ** 2)
            cov = np.sum(w * (x - mx) * (y - my))
            values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))


class ImageMetricTests(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.a = GrayImage(rng.uniform(0, 255, size=(14, 13)))
        self.b = GrayImage(np.clip(self.a.data + rng.normal(0, 20, size=(14, 13)), 0, 255))

    def test_rmse_and_psnr(self):
        self.assertEqual(evalsynth.rmse(self.a, self.a), 0.0)
        self.assertEqual(evalsynth.psnr(self.a, self.a), math.inf)
        error = evalsynth.rmse(self.a, self.b)
        self.assertAlmostEqual(evalsynth.psnr(self.a, self.b), 20 * math.log10(255 / error))
        self.assertAlmostEqual(evalsynth.rmse(GrayImage.zeros(2, 2), GrayImage.constant(2, 2, 3.0)), 3.0)

    def test_masked_rmse(self):
        a = GrayImage(np.array([[0.0, 0.0], [0.0, 0.0]]))
        b = GrayImage(np.array([[4.0, 0.0], [0.0, 0.0]]))
        self.assertEqual(evalsynth.rmse(a, b, BinaryMask(np.array([[1, 0], [0, 0]]))), 4.0)
        self.assertEqual(evalsynth.rmse(a, b, BinaryMask.zeros(2, 2)), 0.0)

    def test_ssim_identity_and_range(self):
        self.assertAlmostEqual(evalsynth.ssim(self.a, self.a), 1.0, places=12)
        value = evalsynth.ssim(self.a, self.b)
        self.assertTrue(-1.0 <= value < 1.0)
        inverted = GrayImage(255.0 - self.a.data)
        self.assertLess(evalsynth.ssim(self.a, inverted), 0.0)

    def test_ssim_matches_window_loop(self):
        self.assertAlmostEqual(evalsynth.ssim(self.a, self.b), loop_ssim(self.a.data, self.b.data), delta=1e-10)

    def test_ssim_window(self):
        w = evalsynth.ssim_window()
        self.assertEqual(w.shape, (11, 11))
        self.assertAlmostEqual(float(w.sum()), 1.0)
        with self.assertRaises(DimensionError):
            evalsynth.ssim(GrayImage.zeros(10, 20), GrayImage.zeros(10, 20))


class DetectionMetricTests(unittest.TestCase):
    def test_hand_counted_scores(self):
        gt = [(10, 10), (30, 10), (50, 10), (70, 10)]
        pred = [(11, 10), (30, 13), (50, 20), (90, 90), JointDetection(71, 11)]
        score = evalsynth.score_detections(pred, gt, 5.0)
        self.assertEqual((score.tp, score.fp, score.fn), (3, 2, 1))
        self.assertAlmostEqual(score.precision, 0.6)
        self.assertAlmostEqual(score.recall, 0.75)
        self.assertAlmostEqual(score.f_measure, 2 * 0.6 * 0.75 / 1.35)

    def test_one_to_one_and_order_invariant(self):
        gt = [(0, 0)]
        pred = [(1, 0), (0, 1), (2, 0)]
        score = evalsynth.score_detections(pred, gt, 5.0)
        self.assertEqual((score.tp, score.fp, score.fn), (1, 2, 0))
        rng = np.random.default_rng(1)
        pred = [tuple(p) for p in rng.uniform(0, 50, size=(20, 2))]
        gt = [tuple(p) for p in rng.uniform(0, 50, size=(15, 2))]
        first = evalsynth.score_detections(pred, gt, 6.0)
        second = evalsynth.score_detections(pred[::-1], gt[::-1], 6.0)
        self.assertEqual(first, second)

    def test_empty_inputs(self):
        score = evalsynth.score_detections([], [(1, 1)])
        self.assertEqual((score.precision, score.recall, score.f_measure), (0.0, 0.0, 0.0))
        with self.assertRaises(ParameterError):
            evalsynth.score_detections([], [], 0.0)

    def test_score_mask(self):
        pred = BinaryMask(np.array([[1, 1, 0, 0]]))
        gt = BinaryMask(np.array([[0, 1, 1, 0]]))
        score, iou = evalsynth.score_mask(pred, gt)
        self.assertEqual((score.tp, score.fp, score.fn), (1, 1, 1))
        self.assertAlmostEqual(iou, 1 / 3)
        self.assertEqual(evalsynth.score_mask(BinaryMask.zeros(3, 3), BinaryMask.zeros(3, 3))[1], 1.0)

    def test_detectable(self):
        joints = [(15, 15), (14, 15), (75, 40), (76, 40)]
        self.assertEqual(evalsynth.detectable(joints, 90, 90, 30), [(15.0, 15.0), (75.0, 40.0)])


class SceneTests(unittest.TestCase):
    def setUp(self):
        self.truth = make_background(64, 64, 0)

    def test_fence_spec_validation(self):
        with self.assertRaises(ParameterError):
            FenceSpec(spacing=2, bar_width=2)
        with self.assertRaises(ParameterError):
            FenceSpec(bar_width=0)
        with self.assertRaises(ParameterError):
            FenceSpec(intensity=300.0)

    def test_background_is_deterministic_and_in_range(self):
        np.testing.assert_array_equal(make_background(64, 64, 0).data, self.truth.data)
        self.assertTrue(np.all((self.truth.data >= 0) & (self.truth.data <= 255)))
        self.assertFalse(np.array_equal(make_background(64, 64, 1).data, self.truth.data))

    def test_generation_is_deterministic(self):
        a = generate_scene(self.truth, FenceSpec(), SHIFTS, 1.0, seed=3)
        b = generate_scene(self.truth, FenceSpec(), SHIFTS, 1.0, seed=3)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.data, fb.data)

    def test_noise_free_frames(self):
        scene = generate_scene(self.truth, FenceSpec(), SHIFTS, noise_sigma=0.0)
        fence = scene.fence_masks[0].data.astype(bool)
        for (dx, dy), frame in zip(SHIFTS, scene.frames):
            shifted = evalsynth.shift_image(self.truth.data, dx, dy)
            np.testing.assert_array_equal(frame.data[~fence], shifted[~fence])
            self.assertTrue(np.all(frame.data[fence] == 230.0))

    def test_fence_density(self):
        mask = evalsynth.fence_mask(FenceSpec(), 64, 64)
        self.assertEqual(mask.count(), 3 * 3 * 64 * 2 - 81)
        self.assertAlmostEqual(mask.count() / 4096, 0.2615, delta=0.02 * 0.2615)

    def test_joints_inside_the_image(self):
        scene = generate_scene(self.truth, FenceSpec(), SHIFTS, 0.0)
        expected = sorted((float(x), float(y)) for x in (10, 30, 50) for y in (10, 30, 50))
        self.assertEqual(sorted(scene.joint_coords[0]), expected)
        self.assertEqual(len(scene.joint_coords), 4)

    def test_overlap_and_argument_errors(self):
        with self.assertRaises(ParameterError):
            generate_scene(self.truth, FenceSpec(), [(0, 0), (40, 0)])
        with self.assertRaises(ParameterError):
            generate_scene(self.truth, FenceSpec(), [])
        with self.assertRaises(ParameterError):
            generate_scene(self.truth, FenceSpec(), SHIFTS, noise_sigma=-1.0)

    def test_default_shifts_cover_every_pixel(self):
        scene = generate_scene(self.truth, FenceSpec(), SHIFTS)
        self.assertEqual(evalsynth.coverage_fraction(scene), 1.0)
        single = generate_scene(self.truth, FenceSpec(), [(0, 0)])
        self.assertAlmostEqual(evalsynth.coverage_fraction(single), 1 - 1071 / 4096)

    def test_scene_transforms(self):
        scene = generate_scene(self.truth, FenceSpec(), SHIFTS)
        transforms = evalsynth.scene_transforms(scene, reference=1)
        self.assertEqual([(t.b1, t.b2) for t in transforms], [(5, 0), (0, 0), (5, -5), (0, -5)])

    def test_training_patches(self):
        scene = generate_scene(make_background(90, 90, 2), FenceSpec(offset=15), SHIFTS, 1.0)
        samples = evalsynth.crop_training_patches(scene, seed=0)
        self.assertEqual({s.label for s in samples}, {1, -1})
        self.assertTrue(all(s.patch.shape == (30, 30) for s in samples))
        again = evalsynth.crop_training_patches(scene, seed=0)
        self.assertEqual([s.label for s in samples], [s.label for s in again])


class BundleTests(unittest.TestCase):
    def test_scene_round_trip(self):
        scene = generate_scene(make_background(48, 40, 4), FenceSpec(spacing=16, offset=8), [(0, 0), (3, 2)], 1.0, 5)
        with tempfile.TemporaryDirectory() as tmp:
            evalsynth.save_scene(scene, tmp)
            names = sorted(p.name for p in pathlib.Path(tmp).iterdir())
            self.assertIn("frame_01.pgm", names)
            self.assertIn("scene.cfg", names)
            loaded = evalsynth.load_scene(tmp)
        self.assertEqual(loaded.shifts, scene.shifts)
        self.assertEqual(loaded.fence_spec, scene.fence_spec)
        self.assertEqual((loaded.seed, loaded.noise_sigma), (5, 1.0))
        np.testing.assert_array_equal(loaded.frames[1].data, scene.frames[1].quantized())
        np.testing.assert_array_equal(loaded.ground_truth.data, scene.ground_truth.quantized())
        np.testing.assert_array_equal(loaded.fence_masks[0].data, scene.fence_masks[0].data)
        np.testing.assert_allclose(loaded.joint_coords[0], scene.joint_coords[0], atol=1e-6)

    def test_missing_frames(self):
        with tempfile.TemporaryDirectory() as tmp:
            (pathlib.Path(tmp) / "scene.cfg").write_text("width=8\n")
            with self.assertRaises(FileNotFoundError):
                evalsynth.load_scene(tmp)


if __name__ == "__main__":
    unittest.main()
