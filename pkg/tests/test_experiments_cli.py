import io
import logging
import os
import shutil
import sys
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from unittest.mock import patch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from csv_exporter import read_results
from experiments_cli import (EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, ExperimentConfig, ExperimentRunner,
                             main, resolve_threads, validate)
from iml_bounds import PreconditionError

MATCH_CONF = """# small first-round matching run
kind = match_prob
seed = 3
trials = 100
N = 256
L = 2, 8
sigma2 = 0.01
"""


class CliTestCase(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)
        logging.disable(logging.NOTSET)

    def write_config(self, name, text):
        path = os.path.join(self.test_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def run_cli(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = main(list(argv) + ["--log-level", "ERROR", "--skip-health-check"])
        return code, out.getvalue(), err.getvalue()

    def out_dir(self, name):
        return os.path.join(self.test_dir, name)


class TestValidation(CliTestCase):

    def test_bins_above_pool_size(self):
        config = ExperimentConfig({"kind": "match_prob", "trials": 100, "N": [4], "L": [8], "sigma2": [0.01]},
                                  lines={"L": 4})
        errors = validate(config)
        self.assertTrue(any(e.startswith("line 4: field 'L'") for e in errors))

    def test_empty_pool_list(self):
        config = ExperimentConfig({"kind": "match_prob", "trials": 100, "N": [], "L": [2], "sigma2": [0.01]},
                                  lines={"N": 3})
        self.assertTrue(any("field 'N'" in e for e in validate(config)))

    def test_valid_config(self):
        config = ExperimentConfig({"kind": "mis", "trials": 10, "N": [16], "m": [4.0], "D": [1.0]})
        self.assertEqual(validate(config), [])

    def test_config_hash_ignores_run_keys(self):
        base = {"kind": "mis", "trials": 10, "N": [16], "m": [4.0], "D": [1.0]}
        plain = ExperimentConfig(dict(base))
        tuned = ExperimentConfig({**base, "threads": 8, "output_dir": "/tmp/x", "seed": 0})
        self.assertEqual(plain.config_hash, tuned.config_hash)
        self.assertNotEqual(plain.config_hash, ExperimentConfig({**base, "seed": 1}).config_hash)

    def test_cli_validate_only(self):
        path = self.write_config("match.conf", MATCH_CONF)
        code, out, _ = self.run_cli("match_prob", "--config", path, "--validate")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("OK", out)
        self.assertFalse(os.path.exists(self.out_dir("outputs")))

    def test_cli_reports_line_numbers(self):
        path = self.write_config("bad.conf", MATCH_CONF.replace("N = 256", "N = 4"))
        code, _, err = self.run_cli("match_prob", "--config", path, "--validate")
        self.assertEqual(code, EXIT_CONFIG_ERROR)
        self.assertIn("line 6: field 'L'", err)

    def test_usage_errors(self):
        code, _, _ = self.run_cli("match_prob")
        self.assertEqual(code, EXIT_CONFIG_ERROR)
        code, _, _ = self.run_cli("teleport", "--config", "x.conf")
        self.assertEqual(code, EXIT_CONFIG_ERROR)

    def test_missing_config_file(self):
        code, _, err = self.run_cli("mis", "--config", os.path.join(self.test_dir, "absent.conf"))
        self.assertEqual(code, EXIT_CONFIG_ERROR)
        self.assertIn("not found", err)

    def test_kind_must_match_subcommand(self):
        path = self.write_config("match.conf", MATCH_CONF)
        code, _, err = self.run_cli("mis", "--config", path)
        self.assertEqual(code, EXIT_CONFIG_ERROR)
        self.assertIn("does not match", err)

    def test_thread_precedence(self):
        config = ExperimentConfig({"kind": "mis", "threads": 3})
        with patch.dict(os.environ, {"ISCSIM_THREADS": "5"}):
            self.assertEqual(resolve_threads(2, config), 2)
            self.assertEqual(resolve_threads(None, config), 5)
        with patch.dict(os.environ, {"ISCSIM_THREADS": ""}):
            self.assertEqual(resolve_threads(None, config), 3)


class TestRuns(CliTestCase):

    def test_rerun_is_byte_identical_across_threads(self):
        path = self.write_config("match.conf", MATCH_CONF)
        first = self.run_cli("match_prob", "--config", path, "--out", self.out_dir("a"), "--threads", "1")
        second = self.run_cli("match_prob", "--config", path, "--out", self.out_dir("b"), "--threads", "4")
        self.assertEqual((first[0], second[0]), (EXIT_OK, EXIT_OK))
        with open(os.path.join(self.out_dir("a"), "match_prob.csv"), "rb") as f:
            a = f.read()
        with open(os.path.join(self.out_dir("b"), "match_prob.csv"), "rb") as f:
            b = f.read()
        self.assertEqual(a, b)
        frame = read_results(os.path.join(self.out_dir("a"), "match_prob.csv"))
        self.assertEqual(frame["L"].tolist(), [2, 8])
        self.assertTrue(frame["config_hash"].str.fullmatch("[0-9a-f]{64}").all())
        self.assertTrue(os.path.exists(os.path.join(self.out_dir("a"), "match_prob.meta.json")))

    def test_seed_override_changes_hash(self):
        path = self.write_config("match.conf", MATCH_CONF)
        self.run_cli("match_prob", "--config", path, "--out", self.out_dir("a"))
        self.run_cli("match_prob", "--config", path, "--out", self.out_dir("b"), "--seed", "4")
        hashes = [read_results(os.path.join(self.out_dir(d), "match_prob.csv"))["config_hash"][0] for d in "ab"]
        self.assertNotEqual(hashes[0], hashes[1])

    def test_rd_curve_with_transcripts(self):
        path = self.write_config("rd.conf", "kind = rd_curve\ntrials = 20\nN = 256\nL = 2\nsigma2 = 0.01\n"
                                            "mode = partial\nL2 = 3, 4\ndump_transcripts = true\n")
        code, _, _ = self.run_cli("rd_curve", "--config", path, "--out", self.out_dir("rd"))
        self.assertEqual(code, EXIT_OK)
        frame = read_results(os.path.join(self.out_dir("rd"), "rd_points.csv"))
        self.assertEqual(frame["L2_or_h"].tolist(), [3, 4])
        with open(os.path.join(self.out_dir("rd"), "transcripts.jsonl"), "r", encoding="utf-8") as f:
            self.assertEqual(len(f.read().splitlines()), 40)

    def test_feedback_sweep(self):
        path = self.write_config("fb.conf", "kind = feedback_sweep\ntrials = 100\nN = 256\nL = 2\n"
                                            "h = 1, 4\nsigma2 = 0.01\n")
        code, _, _ = self.run_cli("feedback_sweep", "--config", path, "--out", self.out_dir("fb"))
        self.assertEqual(code, EXIT_OK)
        frame = read_results(os.path.join(self.out_dir("fb"), "feedback_errors.csv"))
        self.assertTrue((frame["undetected_err_rate"] <= frame["p_mismatch"]).all())

    def test_mis_with_goodness_of_fit(self):
        path = self.write_config("mis.conf", "kind = mis\ntrials = 100\nN = 16\nm = 4\nD = 1\n"
                                             "gof_trials = 100\ngof_bins = 8\n")
        code, _, _ = self.run_cli("mis", "--config", path, "--out", self.out_dir("mis"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(read_results(os.path.join(self.out_dir("mis"), "mis_results.csv"))), 2)
        self.assertEqual(len(read_results(os.path.join(self.out_dir("mis"), "mis_gof.csv"))), 4)

    def test_channel_sim(self):
        path = self.write_config("ch.conf", "kind = channel_sim\ntrials = 100\nN = 64\nsigma2 = 0.1\n"
                                            "tv_trials = 200\ntv_bins = 8\n")
        code, _, _ = self.run_cli("channel_sim", "--config", path, "--out", self.out_dir("ch"))
        self.assertEqual(code, EXIT_OK)
        frame = read_results(os.path.join(self.out_dir("ch"), "channel_sim.csv"))
        self.assertEqual(len(frame), 1)
        self.assertGreater(frame["mean_code_length"][0], 0)
        self.assertTrue(frame["bnd2_bits"].isna().all())

    def test_discrete_bounds(self):
        path = self.write_config("b.conf", "kind = bounds\ntrials = 100\nfixture = discrete\nN = 9\n"
                                           "epsilon = 0.1, 0.5\n")
        code, _, _ = self.run_cli("bounds", "--config", path, "--out", self.out_dir("b"))
        self.assertEqual(code, EXIT_OK)
        frame = read_results(os.path.join(self.out_dir("b"), "bounds.csv"))
        self.assertEqual(sorted(set(frame["variant"])), ["alt_thm2", "prop1_mean", "thm2"])
        self.assertTrue((frame["bound"] <= 1.0).all())

    def test_gaussian_bounds_start_at_zero_mismatch(self):
        path = self.write_config("g.conf", "kind = bounds\ntrials = 100\nfixture = gaussian\nN = 16\nm = 0, 1\n")
        code, _, _ = self.run_cli("bounds", "--config", path, "--out", self.out_dir("g"))
        self.assertEqual(code, EXIT_OK)
        frame = read_results(os.path.join(self.out_dir("g"), "bounds.csv"))
        self.assertEqual(frame["p_hat"][0], 0.0)
        self.assertGreaterEqual(frame["p_hat"][1], frame["p_hat"][0])

    def test_runtime_failure_exit_code(self):
        path = self.write_config("mis.conf", "kind = mis\ntrials = 10\nN = 16\nm = 4\nD = 1\n")
        with patch.object(ExperimentRunner, "_run_mis", side_effect=PreconditionError("boom")):
            code, _, _ = self.run_cli("mis", "--config", path, "--out", self.out_dir("mis"))
        self.assertEqual(code, EXIT_RUNTIME_ERROR)

    def test_health_check_failure_aborts(self):
        path = self.write_config("mis.conf", "kind = mis\ntrials = 10\nN = 16\nm = 4\nD = 1\n")
        with patch("experiments_cli.SystemHealthChecker.execute", return_value={"status": "FAIL", "errors": []}):
            with redirect_stderr(io.StringIO()):
                code = main(["mis", "--config", path, "--out", self.out_dir("mis"), "--log-level", "ERROR"])
        self.assertEqual(code, EXIT_RUNTIME_ERROR)


if __name__ == '__main__':
    unittest.main()
