import logging
import math
import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core_sampling import GaussianModel, RandomStream
from mc_stats import (binned_tv, bootstrap_tv, chi_square_gof, equal_probability_edges, histogram_counts,
                      histogram_tv, mean_and_stderr, plugin_entropy_bits, wilson_interval)


class TestIntervals(unittest.TestCase):

    def test_wilson_contains_estimate(self):
        lo, hi = wilson_interval(30, 100)
        self.assertLess(lo, 0.3)
        self.assertGreater(hi, 0.3)

    def test_wilson_zero_successes(self):
        lo, hi = wilson_interval(0, 1000)
        self.assertEqual(lo, 0.0)
        z2 = 1.959963984540054 ** 2
        self.assertAlmostEqual(hi, z2 / (1000 + z2), places=12)

    def test_wilson_without_trials(self):
        self.assertEqual(wilson_interval(0, 0), (0.0, 1.0))

    def test_mean_and_stderr(self):
        mean, se = mean_and_stderr([1.0, 2.0, 3.0, 4.0])
        self.assertEqual(mean, 2.5)
        self.assertAlmostEqual(se, np.std([1, 2, 3, 4], ddof=1) / 2.0)


class TestEntropy(unittest.TestCase):

    def test_uniform_symbols(self):
        self.assertAlmostEqual(plugin_entropy_bits([1, 2, 3, 4] * 25), 2.0)

    def test_constant_symbols(self):
        self.assertEqual(plugin_entropy_bits([7] * 10), 0.0)


class TestTotalVariation(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)

    def tearDown(self):
        logging.disable(logging.NOTSET)

    def test_equal_probability_edges(self):
        model = GaussianModel(0.0, 1.0)
        edges = equal_probability_edges(model, 4)
        np.testing.assert_allclose(model.cdf(edges), [0.25, 0.5, 0.75], atol=1e-12)
        with self.assertRaises(ValueError):
            equal_probability_edges(model, 1)

    def test_histogram_counts_cover_all_samples(self):
        counts = histogram_counts([-5.0, 0.1, 0.2, 9.0], np.array([0.0, 1.0]))
        np.testing.assert_array_equal(counts, [1, 2, 1])

    def test_histogram_tv_of_disjoint_counts(self):
        self.assertEqual(histogram_tv(np.array([5, 0]), np.array([0, 3])), 1.0)

    def test_binned_tv_of_shifted_gaussians(self):
        a, b = GaussianModel(0.0, 1.0), GaussianModel(0.5, 1.0)
        edges = np.linspace(-6, 6, 2001)
        exact = 2 * a.cdf(0.25) - 1
        self.assertAlmostEqual(binned_tv(a, b, edges), exact, places=4)
        self.assertEqual(binned_tv(a, a, edges), 0.0)

    def test_bootstrap_tv_same_distribution_near_floor(self):
        model = GaussianModel(0.0, 1.0)
        x = model.sample(RandomStream(1), 0, 20_000)[:, 0]
        y = model.sample(RandomStream(2), 0, 20_000)[:, 0]
        est = bootstrap_tv(x, y, equal_probability_edges(model, 32), resamples=100, seed=3)
        self.assertLess(est.tv, 0.05)
        self.assertLess(est.debiased, 0.02)
        self.assertIsNone(est.warning)
        self.assertLessEqual(est.ci_lo, est.ci_hi)

    def test_bootstrap_tv_flags_sparse_histograms(self):
        model = GaussianModel(0.0, 1.0)
        x = model.sample(RandomStream(1), 0, 100)[:, 0]
        est = bootstrap_tv(x, x, equal_probability_edges(model, 64), resamples=20)
        self.assertEqual(est.warning, "too_few_trials")

    def test_bootstrap_tv_detects_shift(self):
        a, b = GaussianModel(0.0, 1.0), GaussianModel(1.0, 1.0)
        x = a.sample(RandomStream(1), 0, 20_000)[:, 0]
        y = b.sample(RandomStream(2), 0, 20_000)[:, 0]
        edges = equal_probability_edges(a, 32)
        est = bootstrap_tv(x, y, edges, resamples=100)
        self.assertAlmostEqual(est.tv, binned_tv(a, b, edges), delta=0.03)


class TestGoodnessOfFit(unittest.TestCase):

    def test_matching_samples_pass(self):
        model = GaussianModel(2.0, 0.5)
        samples = model.sample(RandomStream(5), 0, 20_000)[:, 0]
        _, p = chi_square_gof(samples, model, bins=32)
        self.assertGreater(p, 1e-4)

    def test_narrow_samples_fail(self):
        model = GaussianModel(0.0, 1.0)
        samples = GaussianModel(0.0, 0.5).sample(RandomStream(5), 0, 20_000)[:, 0]
        chi2, p = chi_square_gof(samples, model, bins=32)
        self.assertLess(p, 1e-6)
        self.assertTrue(math.isfinite(chi2))


if __name__ == '__main__':
    unittest.main()
