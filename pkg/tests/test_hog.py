import pathlib
import sys
import unittest

import numpy as np

PROJECT_ROOT = pathlib.Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from core.errors import BoundsError, DimensionError, ParameterError
from core.hog import DEFAULT_PARAMS, HogParams, bin_index, compute_bins, extract, extract_at, extract_many
from core.imagecore import GrayImage, sobel_gradients


def direct_descriptor(grad, x0, y0, params=DEFAULT_PARAMS):
    """Loop-based reference: cell sums, then 2x2 blocks, then per-block normalisation."""
    n = params.cells_per_side
    cs = params.cell_size
    cells = np.zeros((n, n, params.bins))
    for r in range(n):
        for c in range(n):
            for yy in range(y0 + r * cs, y0 + (r + 1) * cs):
                for xx in range(x0 + c * cs, x0 + (c + 1) * cs):
                    k = min(int(np.floor(grad.orientation[yy, xx] / params.bin_width)), params.bins - 1)
                    cells[r, c, k] += grad.magnitude[yy, xx]
    out = []
    for br in range(params.blocks_per_side):
        for bc in range(params.blocks_per_side):
            block = np.concatenate([cells[br + i, bc + j] for i in range(2) for j in range(2)])
            out.append(block / np.sqrt(np.sum(block * block) + params.eps))
    return np.concatenate(out)


class HogTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_descriptor_length(self):
        self.assertEqual(DEFAULT_PARAMS.descriptor_length, 1296)
        window = GrayImage(self.rng.uniform(0, 255, size=(30, 30)))
        self.assertEqual(extract(window).shape, (1296,))

    def test_wrong_window_size(self):
        with self.assertRaises(DimensionError):
            extract(GrayImage.zeros(31, 30))

    def test_integral_path_matches_direct_sums(self):
        img = GrayImage(self.rng.uniform(0, 255, size=(60, 70)))
        grad = sobel_gradients(img)
        bins = compute_bins(img)
        xs = self.rng.integers(0, 70 - 30 + 1, size=100)
        ys = self.rng.integers(0, 60 - 30 + 1, size=100)
        fast = extract_many(bins, np.stack([xs, ys], axis=1))
        for i in range(0, 100, 10):
            expected = direct_descriptor(grad, int(xs[i]), int(ys[i]))
            np.testing.assert_allclose(fast[i], expected, atol=1e-6)

    def test_extract_at_is_single_row_of_extract_many(self):
        img = GrayImage(self.rng.uniform(0, 255, size=(40, 40)))
        bins = compute_bins(img)
        many = extract_many(bins, [(3, 5), (10, 0)])
        np.testing.assert_array_equal(extract_at(bins, (10, 0)), many[1])

    def test_blank_window_gives_zero_descriptor(self):
        self.assertTrue(np.all(extract(GrayImage.constant(30, 30, 128.0)) == 0.0))

    def test_blocks_are_normalised(self):
        d = extract(GrayImage(self.rng.uniform(0, 255, size=(30, 30))))
        norms = np.linalg.norm(d.reshape(36, 36), axis=1)
        self.assertTrue(np.all(norms <= 1.0))
        self.assertTrue(np.all(norms > 0.99))

    def test_window_outside_image(self):
        bins = compute_bins(GrayImage.zeros(40, 40))
        with self.assertRaises(BoundsError):
            extract_many(bins, [(0, 0), (11, 0)])
        self.assertEqual(extract_many(bins, []).shape, (0, 1296))

    def test_bin_index_edges(self):
        np.testing.assert_array_equal(bin_index(np.array([0.0, 19.99, 20.0, 179.9])), [0, 0, 1, 8])

    def test_preprocessing_options(self):
        window = GrayImage(self.rng.uniform(0, 255, size=(30, 30)))
        smoothed = extract(window, HogParams(smooth_sigma=1.0, equalize=True))
        self.assertEqual(smoothed.shape, (1296,))
        self.assertFalse(np.allclose(smoothed, extract(window)))
        with self.assertRaises(ParameterError):
            HogParams(smooth_sigma=0.0)
        with self.assertRaises(ParameterError):
            HogParams(bins=8)


if __name__ == "__main__":
    unittest.main()
