import logging
import math
import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from ce_isc_codec import alt_rate_bound
from core_sampling import DiscreteModel, GaussianModel, ProposalPool, RandomStream, importance_log_weight
from iml_bounds import (PreconditionError, alt_mu, alt_thm2_bound, alt_thm2_scalar, conditional_bounds,
                        conditional_mismatch_mc, conditional_paired_select, d_moment, exact_conditional_mismatch,
                        exact_match_probability, gaussian_ratio_sup, kl_divergence_bits, mismatch_mc,
                        mismatch_with_pool_bound, paired_select, prop1_bound, prop1_bound_from_log_weights,
                        proposal_moments, thm2_mu, thm2_mu_scalar, truncated_omega)

P_PROBS = np.array([0.5, 0.25, 0.125, 0.125])
Q_PROBS = np.array([0.25, 0.5, 0.125, 0.125])


class TestExactRaces(unittest.TestCase):

    def test_exact_match_probability(self):
        self.assertAlmostEqual(exact_match_probability(P_PROBS, Q_PROBS), 0.7, places=12)
        self.assertAlmostEqual(exact_match_probability(P_PROBS, P_PROBS), 1.0, places=12)

    def test_exact_conditional_mismatch(self):
        self.assertAlmostEqual(exact_conditional_mismatch(P_PROBS, Q_PROBS, 1), 0.5, places=12)
        self.assertAlmostEqual(exact_conditional_mismatch(P_PROBS, Q_PROBS, 2), 0.0, places=12)
        self.assertAlmostEqual(exact_conditional_mismatch(P_PROBS, Q_PROBS, 3), 0.2, places=12)

    def test_pool_bound_dominates_exact_mismatch(self):
        log_p, log_q = np.log(P_PROBS), np.log(Q_PROBS)
        expected_bounds = {1: 2.0 / 3.0, 2: 1.0 / 3.0, 3: 0.5, 4: 0.5}
        for k, bound in expected_bounds.items():
            value = prop1_bound_from_log_weights(log_p, log_q, k)
            self.assertAlmostEqual(value, bound, places=12)
            self.assertGreaterEqual(value, exact_conditional_mismatch(P_PROBS, Q_PROBS, k))

    def test_pool_bound_edge_weights(self):
        self.assertEqual(prop1_bound_from_log_weights([0.0, 0.0], [-np.inf, 0.0], 1), 1.0)
        self.assertEqual(prop1_bound_from_log_weights([-np.inf, 0.0], [0.0, 0.0], 1), 0.0)

    def test_zero_weight_winner_rejected(self):
        with self.assertRaises(PreconditionError):
            exact_conditional_mismatch([0.0, 1.0], [1.0, 1.0], 1)


class TestDiscreteFixture(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.p = DiscreteModel(P_PROBS)
        self.q = DiscreteModel(Q_PROBS)
        self.proposal = DiscreteModel([0.25] * 4)

    def tearDown(self):
        logging.disable(logging.NOTSET)

    def test_mismatch_rate_matches_race_oracle(self):
        pool = ProposalPool(RandomStream(31), 8, self.proposal)
        trials = 4000
        stats = mismatch_mc(pool, self.p, self.q, trials)
        lw_p = importance_log_weight(self.p, self.proposal)
        lw_q = importance_log_weight(self.q, self.proposal)
        exact = []
        for t in range(trials):
            points = pool.with_trial(t).points(0, pool.n)
            exact.append(1.0 - exact_match_probability(np.exp(lw_p(points)), np.exp(lw_q(points))))
        se = math.sqrt(stats.p_hat * (1 - stats.p_hat) / trials)
        self.assertAlmostEqual(stats.p_hat, float(np.mean(exact)), delta=4 * se)
        self.assertLessEqual(stats.ci_lo, stats.p_hat)
        self.assertGreaterEqual(stats.ci_hi, stats.p_hat)

    def test_average_pool_bound_covers_mismatch(self):
        pool = ProposalPool(RandomStream(32), 64, self.proposal)
        stats, bound = mismatch_with_pool_bound(pool, self.p, self.q, 1000)
        self.assertGreaterEqual(bound, stats.ci_lo)
        self.assertGreater(stats.p_hat, 0.0)

    def test_identical_targets_never_mismatch(self):
        pool = ProposalPool(RandomStream(33), 16, self.proposal)
        stats = mismatch_mc(pool, self.p, self.p, 200)
        self.assertEqual(stats.events, 0)
        self.assertEqual(stats.ci_lo, 0.0)

    def test_mismatch_needs_enough_trials(self):
        pool = ProposalPool(RandomStream(1), 16, self.proposal)
        with self.assertRaises(ValueError):
            mismatch_mc(pool, self.p, self.q, 99)

    def test_paired_winners_are_valid_indices(self):
        pool = ProposalPool(RandomStream(34), 16, self.proposal)
        paired = paired_select(pool, self.p, self.q)
        self.assertTrue(1 <= paired.u_p <= 16 and 1 <= paired.u_q <= 16)

    def test_conditional_mismatch_at_fixed_symbol(self):
        pool = ProposalPool(RandomStream(35), 16, self.proposal)
        stats, bound = conditional_mismatch_mc(pool, self.p, self.q, y=0.0, trials=300)
        self.assertEqual(stats.trials, 300)
        self.assertGreaterEqual(bound, stats.ci_lo)

    def test_conditional_mismatch_with_fixed_position(self):
        pool = ProposalPool(RandomStream(36), 4, self.proposal)
        stats, _ = conditional_mismatch_mc(pool, self.p, self.q, y=1.0, trials=100, k=2)
        self.assertEqual(stats.trials, 100)

    def test_conditional_bounds_on_fixed_pool(self):
        pool = ProposalPool(RandomStream(37), 32, self.proposal)
        paired = conditional_paired_select(pool, self.p, self.q)
        pool_form, finite_n = conditional_bounds(pool, paired, self.p, self.q, omega=2.0)
        points = pool.points(0, pool.n)
        lw_p = importance_log_weight(self.p, self.proposal)(points)
        lw_q = importance_log_weight(self.q, self.proposal)(points)
        self.assertAlmostEqual(pool_form, prop1_bound_from_log_weights(lw_p, lw_q, paired.u_p), places=12)
        self.assertTrue(0.0 <= pool_form <= 1.0)
        self.assertEqual(finite_n.variant, "conditional_finite_n")
        reference = thm2_mu(points[paired.u_p - 1], 32, self.p, self.q, self.proposal, 2.0)
        self.assertAlmostEqual(finite_n.bound, reference.bound, places=12)

    def test_bounds_dominate_conditional_mismatch_as_pool_grows(self):
        moments = proposal_moments(self.proposal, self.p)
        mus = []
        for n in (9, 65, 513):
            pool = ProposalPool(RandomStream(7).substream(("bounds", n)), n, self.proposal)
            stats, pool_bound = conditional_mismatch_mc(pool, self.p, self.q, y=0.0, trials=1000)
            report = thm2_mu(0.0, n, self.p, self.q, self.proposal, 2.0, moments)
            with self.subTest(N=n):
                self.assertLessEqual(stats.p_hat, report.bound)
                self.assertLessEqual(stats.ci_lo, pool_bound)
                self.assertLessEqual(report.bound, 1.0)
            mus.append(report.mu)
        self.assertGreater(mus[0], mus[1])
        self.assertGreater(mus[1], mus[2])

    def test_alt_bound_at_symbol(self):
        report = alt_thm2_bound(0.0, 64, 0.5, self.p, self.q, self.proposal, 2.0)
        self.assertAlmostEqual(report.lam, 2.0, places=12)
        self.assertAlmostEqual(report.beta, 1.0, places=12)
        self.assertAlmostEqual(report.bound, alt_thm2_scalar(2.0, 1.0, 64, 0.5, 2.0).bound, places=12)
        self.assertTrue(0.0 <= report.bound <= 1.0)
        with self.assertRaises(PreconditionError):
            alt_thm2_bound(0.0, 64, 0.5, DiscreteModel([0.0, 0.5, 0.25, 0.25]), self.q, self.proposal, 2.0)

    def test_discrete_moments(self):
        est = d_moment(self.p, self.proposal, 2)
        self.assertAlmostEqual(est.value, float(np.sum(P_PROBS ** 2 / 0.25)), places=12)
        self.assertEqual(est.method, "analytic")
        self.assertEqual(d_moment(self.p, DiscreteModel([0.0, 0.5, 0.25, 0.25]), 2).flag, "infinite")


class TestGaussianMoments(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)

    def tearDown(self):
        logging.disable(logging.NOTSET)

    def test_second_moment_closed_form(self):
        est = d_moment(GaussianModel(0.0, 1.0), GaussianModel(0.0, 2.0), 2)
        self.assertAlmostEqual(est.value, 2.0 / math.sqrt(3.0), places=12)

    def test_second_moment_diverges_for_wider_numerator(self):
        est = d_moment(GaussianModel(0.0, 2.0), GaussianModel(0.0, 1.0), 2)
        self.assertEqual(est.value, math.inf)
        self.assertEqual(est.flag, "infinite")

    def test_monte_carlo_moment_agrees_with_closed_form(self):
        est = d_moment(GaussianModel(0.0, 1.0), GaussianModel(0.0, 2.0), 2, samples=200_000,
                       stream=RandomStream(8), analytic=False)
        self.assertEqual(est.method, "monte_carlo")
        self.assertAlmostEqual(est.value, 2.0 / math.sqrt(3.0), delta=0.01)

    def test_order_must_be_at_least_two(self):
        with self.assertRaises(ValueError):
            d_moment(GaussianModel(0.0, 1.0), GaussianModel(0.0, 2.0), 1)

    def test_kl_divergence(self):
        expected = 0.5 * (math.log(2.0) + 0.5 - 1.0) / math.log(2.0)
        self.assertAlmostEqual(kl_divergence_bits(GaussianModel(0.0, 1.0), GaussianModel(0.0, 2.0)), expected)
        self.assertEqual(kl_divergence_bits(DiscreteModel(P_PROBS), DiscreteModel(P_PROBS)), 0.0)

    def test_ratio_sup(self):
        target, proposal = GaussianModel(0.0, 0.01), GaussianModel(0.0, 1.01)
        self.assertAlmostEqual(gaussian_ratio_sup(target, proposal), math.sqrt(101.0), places=9)
        self.assertLessEqual(truncated_omega(target, proposal), gaussian_ratio_sup(target, proposal) * (1 + 1e-9))
        self.assertEqual(gaussian_ratio_sup(proposal, target), math.inf)


class TestFiniteNBounds(unittest.TestCase):

    def test_alt_mu_reference_value(self):
        self.assertAlmostEqual(alt_mu(1.0, 1.0, 2, 0.5, 1.0), 8.4527, places=4)

    def test_alt_rate_bound_alpha(self):
        # alpha = N / ((N - 1)(1 - eps)) = 4 at N=2, eps=0.5
        beta = 4.0 * 2.0 + 2.0 * math.exp(-2.0 * 0.25)
        expected = beta + math.log2(beta + 1.0) + 4.0
        self.assertAlmostEqual(alt_rate_bound(0.0, 2, 0.5, 1.0), expected, places=12)

    def test_alt_mu_preconditions(self):
        with self.assertRaises(PreconditionError):
            alt_mu(0.0, 1.0, 8, 0.5, 1.0)
        with self.assertRaises(PreconditionError):
            alt_mu(1.0, 1.0, 8, 1.0, 1.0)

    def test_alt_report(self):
        report = alt_thm2_scalar(1.0, 1.0, 2, 0.5, 1.0)
        self.assertEqual(report.variant, "alt_thm2")
        self.assertGreater(report.bound, 0.5)
        self.assertLessEqual(report.bound, 1.0)

    def test_mu_without_ratio_spread_is_its_limit(self):
        report = thm2_mu_scalar(1.0, 1.0, 100, 1.0, d2=1.0, d3=1.0, d5=1.0)
        self.assertAlmostEqual(report.mu, report.mu_limit)
        self.assertAlmostEqual(report.bound, 0.5)

    def test_mu_approaches_limit_with_pool_size(self):
        small = thm2_mu_scalar(2.0, 1.0, 64, 2.0, d2=1.2, d3=1.5, d5=3.0)
        large = thm2_mu_scalar(2.0, 1.0, 1 << 20, 2.0, d2=1.2, d3=1.5, d5=3.0)
        self.assertGreater(small.mu, large.mu)
        self.assertAlmostEqual(large.mu, 1.0, places=3)

    def test_infinite_moments_give_trivial_bound(self):
        report = thm2_mu_scalar(1.0, 1.0, 64, 2.0, d2=1.0, d3=math.inf, d5=math.inf)
        self.assertEqual(report.bound, 1.0)
        self.assertIn("moments_unavailable", report.to_row()["flags"])

    def test_thm2_needs_two_samples(self):
        with self.assertRaises(PreconditionError):
            thm2_mu_scalar(1.0, 1.0, 1, 1.0, d3=1.0, d5=1.0)

    def test_prop1_bound_checks_index(self):
        proposal = GaussianModel(0.0, 1.0)
        with self.assertRaises(ValueError):
            prop1_bound([0.1, 0.2], 3, GaussianModel(0.5, 1.0), GaussianModel(-0.5, 1.0), proposal)
        value = prop1_bound([0.1, 0.2], 1, GaussianModel(0.5, 1.0), GaussianModel(-0.5, 1.0), proposal)
        self.assertTrue(0.0 < value < 1.0)


class TestGaussianFixture(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)

    def tearDown(self):
        logging.disable(logging.NOTSET)

    def test_mismatch_grows_with_separation(self):
        rates = []
        for m in (0.0, 0.5, 1.0, 2.0):
            pool = ProposalPool(RandomStream(40), 64, GaussianModel(0.0, 1.0 + m * m))
            stats, bound = mismatch_with_pool_bound(pool, GaussianModel(m, 1.0), GaussianModel(-m, 1.0), 1000)
            self.assertGreaterEqual(bound, stats.ci_lo)
            rates.append(stats)
        self.assertEqual(rates[0].events, 0)
        for before, after in zip(rates, rates[1:]):
            self.assertGreaterEqual(after.ci_hi, before.p_hat)
        self.assertGreater(rates[-1].p_hat, rates[1].p_hat)


if __name__ == '__main__':
    unittest.main()
