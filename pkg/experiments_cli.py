"""
Experiment driver behind the `iscsim` command.

A run loads a key = value config, validates it against experiment_schema.json
and the cross-field constraints, fans the trials of every grid point out over
a TrialRunner and writes contract-checked CSV artifacts. Trial results are
merged in trial order, so the CSV bytes depend only on the config and seed.
"""
import argparse
import functools
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np
from dotenv import load_dotenv

from artifact_store import ArtifactStore
from ce_isc_codec import (DELTA_BITS, IndexCoder, RateStats, alt_rate_bound, delta_constant, mi_rate_bound,
                          proxy_tv_estimate)
from config_loader import ConfigLoader, resource_path
from config_validator import ConfigValidator, grid_pairs
from core_sampling import (DegenerateWeightsError, DiscreteModel, GaussianModel, ProposalPool, RandomStream,
                           importance_log_weight, kl_to_uniform_bits, rank_of, select_index)
from csv_exporter import CsvExporter, nan_to_none
from iml_bounds import (BoundReport, PreconditionError, alt_thm2_bound, conditional_mismatch_mc, gaussian_ratio_sup,
                        kl_divergence_bits, mismatch_with_pool_bound, proposal_moments, thm2_mu)
from mc_stats import equal_probability_edges
from mis import SCHEMES, goodness_of_fit, mis_experiment
from models_gaussian import GaussianWZ, GaussMix
from system_health_checker import SystemHealthChecker
from trial_runner import RunBudgetExceeded, TrialRunner, default_threads
from wyner_ziv import (EmptyBinError, FeedbackConfigError, RdGridPoint, SideInfoProblem, feedback_error_rate,
                       gaussian_problem, matching_probability, prop4_bound, rd_experiment)

EXIT_OK, EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR = 0, 1, 2
KINDS = ("channel_sim", "match_prob", "rd_curve", "feedback_sweep", "mis", "bounds")
KIND_HELP = {
    "channel_sim": "rank-coded channel simulation on the 1D Gaussian channel",
    "match_prob": "first-round matching probability with decoder side information",
    "rd_curve": "rate and distortion of the feedback protocol",
    "feedback_sweep": "undetected-error rate of hashed feedback",
    "mis": "CE-IS on stratified pools against ordered random coding",
    "bounds": "matching-probability bounds next to their Monte-Carlo estimates",
}
# keys that change how a run executes but not what it computes
RUN_KEYS = ("threads", "output_dir", "timeout_seconds")
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

RUNTIME_ERRORS = (RunBudgetExceeded, DegenerateWeightsError, EmptyBinError, FeedbackConfigError,
                  PreconditionError, ValueError, OSError)


def load_json(filename):
    """Loads a JSON file with UTF-8 encoding."""
    try:
        with open(filename, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        logging.error(f"File not found: {filename}")
        return None
    except json.JSONDecodeError:
        logging.error(f"Invalid JSON format: {filename}")
        return None


@dataclass
class ExperimentConfig:
    values: dict
    lines: dict = field(default_factory=dict)
    source: str = None

    @property
    def kind(self):
        return self.values.get("kind")

    @property
    def seed(self):
        return int(self.values.get("seed", 0))

    @property
    def trials(self):
        return int(self.values["trials"])

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def config_hash(self):
        canonical = {k: v for k, v in self.values.items() if k not in RUN_KEYS}
        canonical.setdefault("seed", 0)
        return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode("utf-8")).hexdigest()


def validate(config: ExperimentConfig) -> List[str]:
    """Every violated constraint of the config; never runs trials."""
    validator = ConfigValidator()
    validator.validate_config(config.values, config.lines)
    return list(validator.errors)


class ResultTable(NamedTuple):
    filename: str
    contract: str
    columns: list
    rows: list


CHANNEL_COLUMNS = ["N", "sigma2_wv", "dkl_bits", "mean_log2_K", "mean_log2_K_se", "entropy_K", "mean_code_length",
                   "coder", "omega", "bnd1_bits", "bnd2_bits", "alt_bits", "tv", "tv_ci_lo", "tv_ci_hi",
                   "tv_null_floor", "trials", "seed", "config_hash"]
MATCH_COLUMNS = ["k", "N", "L", "rate_bits_per_sample", "sigma2_wv", "p_match", "ci_lo", "ci_hi", "prop4_bound",
                 "trials", "seed", "config_hash"]
RD_COLUMNS = ["k", "N", "L", "mode", "L2_or_h", "sigma2_wv", "rate_bits_per_sample", "distortion_db", "mse",
              "p_mismatch", "undetected_err_rate", "trials", "seed", "mse_side_only", "closed_form_rate",
              "nack_bits_per_sample", "config_hash"]
FEEDBACK_COLUMNS = ["k", "N", "L", "h", "sigma2_wv", "p_mismatch", "undetected_err_rate", "ci_lo", "ci_hi",
                    "trials", "seed", "config_hash"]
MIS_COLUMNS = ["scheme", "m", "D", "N", "mean_dist", "var_dist", "rate_bits", "trials", "seed", "config_hash"]
GOF_COLUMNS = ["scheme", "pool", "m", "D", "x", "N", "chi2", "p_value", "trials", "seed", "config_hash"]
BOUND_COLUMNS = ["variant", "fixture", "param", "N", "omega", "bound", "mu", "mu_limit", "lam", "beta", "d2", "d3",
                 "d5", "epsilon", "p_hat", "ci_lo", "ci_hi", "flags", "orientation", "trials", "seed", "config_hash"]


def _channel_trial(n, var_v, sigma2, coder, seed, trial):
    """One encode of X ~ N(0, var_v) through Y = X + N(0, sigma2): (rank, code length, D(lambda||u))."""
    stream = RandomStream(seed)
    x = float(stream.substream("x").normals(0, 1, trial)[0]) * math.sqrt(var_v)
    proposal = GaussianModel(0.0, var_v + sigma2)
    log_weight = importance_log_weight(GaussianModel(x, sigma2), proposal)
    pool = ProposalPool(stream.substream("pool"), n, proposal, trial=trial)
    rank = rank_of(pool, select_index(pool, log_weight))
    return rank, coder.code_length(rank), kl_to_uniform_bits(pool, log_weight)


class ExperimentRunner:
    """Runs one validated experiment config and exports its CSV artifacts."""

    def __init__(self, config: ExperimentConfig, out_dir=None, threads=None, settings=None, policy=None):
        self.config = config
        self.policy = policy if policy is not None else (load_json(resource_path("orchestrator_policy.json")) or {})
        if settings is None:
            settings = load_json(resource_path("project_core/iscsim_settings.json")) or {}
        self.settings = settings
        self.stats = settings.get("statistics", {})
        self.defaults = settings.get("defaults", {})
        output = settings.get("output", {})
        self.out_dir = (out_dir or config.get("output_dir") or os.getenv("ISCSIM_OUTPUT_DIR")
                        or output.get("base_dir", "outputs"))
        self.threads = threads or default_threads()
        session = dict(self.policy.get("session", {}))
        if config.get("timeout_seconds"):
            session["timeout_seconds"] = config.get("timeout_seconds")
        self.runner = TrialRunner(self.threads, session)
        self.exporter = CsvExporter()
        self.keep_history = output.get("keep_history", False)
        self.write_metadata = output.get("write_metadata", True)
        self.transcripts = None
        self.handlers = {
            "channel_sim": self._run_channel_sim,
            "match_prob": self._run_match_prob,
            "rd_curve": self._run_rd_curve,
            "feedback_sweep": self._run_feedback_sweep,
            "mis": self._run_mis,
            "bounds": self._run_bounds,
        }
        self.logger = logging.getLogger(__name__)

    # -- helpers ------------------------------------------------------------

    def _axes(self, keys, **defaults):
        values = dict(self.config.values)
        for key, value in defaults.items():
            values.setdefault(key, value)
        return grid_pairs(values, keys)

    def _default(self, key, fallback):
        return self.config.get(key, self.defaults.get(key, fallback))

    @property
    def _eps(self):
        return self._default("epsilon", [0.1])

    # -- handlers -----------------------------------------------------------

    def _run_channel_sim(self):
        cfg = self.config
        var_v = self._default("sigma2_v", 1.0)
        coder_kind = self._default("coder", "elias_delta")
        tv_trials = cfg.get("tv_trials", 0)
        tv_x = cfg.get("tv_x", 0.0)
        rows = []
        for n, sigma2 in self._axes(["N", "sigma2"]):
            proposal = GaussianModel(0.0, var_v + sigma2)
            mi_bits = 0.5 * math.log2(1.0 + var_v / sigma2)
            coder = IndexCoder.for_rate(cfg.get("rate_estimate", mi_bits)) if coder_kind == "zipf" else IndexCoder()
            trial = functools.partial(_channel_trial, n, var_v, sigma2, coder, cfg.seed)
            ranks, lengths, kls = zip(*self.runner.map(trial, range(cfg.trials)))
            rate = RateStats.from_ranks(ranks, lengths)

            reference = GaussianModel(tv_x, sigma2)
            omega = cfg.get("omega") or gaussian_ratio_sup(reference, proposal)
            moments = proposal_moments(proposal, reference, orders=(2, 3))
            delta = delta_constant(omega, moments[2].value, moments[3].value)
            row = {"N": n, "sigma2_wv": sigma2, "dkl_bits": kl_divergence_bits(reference, proposal),
                   "mean_log2_K": rate.mean_log2_k, "mean_log2_K_se": rate.mean_log2_k_se,
                   "entropy_K": rate.entropy_k, "mean_code_length": rate.mean_code_length, "coder": coder.kind,
                   "omega": omega, "bnd1_bits": float(np.mean(kls)) + DELTA_BITS,
                   "bnd2_bits": mi_rate_bound(mi_bits, delta, n) if math.isfinite(delta) else None,
                   "alt_bits": alt_rate_bound(mi_bits, n, self._eps[0], omega)}
            if tv_trials:
                edges = equal_probability_edges(reference, cfg.get("tv_bins", self.stats.get("tv_bins", 128)))
                tv = proxy_tv_estimate(reference, proposal, n, tv_trials, partition=edges, seed=cfg.seed,
                                       bootstrap=self.stats.get("bootstrap_resamples", 200), runner=self.runner)
                if tv.warning:
                    self.logger.warning(f"[ExperimentRunner] N={n}: TV estimate flagged '{tv.warning}'")
                row.update(tv=tv.tv, tv_ci_lo=tv.ci_lo, tv_ci_hi=tv.ci_hi, tv_null_floor=tv.null_floor)
            rows.append(row)
            self.logger.info(f"[ExperimentRunner] channel_sim N={n} sigma2={sigma2}: "
                             f"E[log2 K]={rate.mean_log2_k:.3f} bnd1={row['bnd1_bits']:.3f}")
        return [ResultTable("channel_sim.csv", "ChannelSimRow", CHANNEL_COLUMNS, rows)]

    def _side_info_problem(self, k, sigma2):
        model = GaussianWZ(self._default("sigma2_v", 1.0), self._default("sigma2_tv", 0.01), sigma2, k)
        return SideInfoProblem.from_gaussian(model)

    def _run_match_prob(self):
        cfg = self.config
        rows = []
        for k, n, bins, sigma2 in self._axes(["k", "N", "L", "sigma2"], k=[1]):
            problem = self._side_info_problem(k, sigma2)
            stats = matching_probability(problem, n, bins, cfg.trials, cfg.seed, self.runner,
                                         cfg.get("bin_mode", "practical"))
            bound = prop4_bound(problem, bins, self._eps[0], self.stats.get("mismatch_bound_mc_trials", 10_000), cfg.seed)
            rows.append({"k": k, "N": n, "L": bins, "rate_bits_per_sample": math.log2(bins) / k,
                         "sigma2_wv": sigma2, "p_match": stats.p_hat, "ci_lo": stats.ci_lo, "ci_hi": stats.ci_hi,
                         "prop4_bound": bound})
            self.logger.info(f"[ExperimentRunner] match_prob k={k} N={n} L={bins}: "
                             f"p_match={stats.p_hat:.4f} (mismatch bound {bound:.4f})")
        return [ResultTable("match_prob.csv", "MatchProbRow", MATCH_COLUMNS, rows)]

    def _rd_grid(self, mode):
        keys = ["k", "N", "L", "sigma2"]
        if mode == "partial" or "L2" in self.config.values:
            keys.append("L2")
        if mode == "hashed":
            keys.append("h")
        grid = []
        for combo in self._axes(keys, k=[1]):
            named = dict(zip(keys, combo))
            grid.append(RdGridPoint(named["k"], named["N"], named["L"], mode, named["sigma2"],
                                    l2=named.get("L2"), h=named.get("h")))
        return grid

    def _run_rd_curve(self):
        cfg = self.config
        factory = functools.partial(gaussian_problem, var_v=self._default("sigma2_v", 1.0),
                                    var_t_given_v=self._default("sigma2_tv", 0.01))
        sink = [] if cfg.get("dump_transcripts") else None
        points = rd_experiment(self._rd_grid(cfg.get("mode")), cfg.trials, cfg.seed, factory, self.runner, sink)
        if sink is not None:
            self.transcripts = sink
        return [ResultTable("rd_points.csv", "RdPointRow", RD_COLUMNS, [p.to_row() for p in points])]

    def _run_feedback_sweep(self):
        cfg = self.config
        rows = []
        for point in self._rd_grid("hashed"):
            problem = gaussian_problem(point, self._default("sigma2_v", 1.0), self._default("sigma2_tv", 0.01))
            mismatch, undetected = feedback_error_rate(problem, point, cfg.trials, cfg.seed, self.runner)
            rows.append({"k": point.k, "N": point.n, "L": point.bins, "h": point.h, "sigma2_wv": point.sigma2_wv,
                         "p_mismatch": mismatch.p_hat, "undetected_err_rate": undetected.p_hat,
                         "ci_lo": undetected.ci_lo, "ci_hi": undetected.ci_hi})
            self.logger.info(f"[ExperimentRunner] feedback_sweep h={point.h} N={point.n} L={point.bins}: "
                             f"undetected={undetected.p_hat:.4f}")
        return [ResultTable("feedback_errors.csv", "FeedbackErrorRow", FEEDBACK_COLUMNS, rows)]

    def _run_mis(self):
        cfg = self.config
        rows, gof_rows = [], []
        gof_trials = cfg.get("gof_trials", 0)
        for m, d in self._axes(["m", "D"]):
            for row in mis_experiment(m, d, cfg.get("N"), cfg.trials, cfg.seed, self.runner):
                rows.append({**row.to_row(), "m": m, "D": d})
            if not gof_trials:
                continue
            mix = GaussMix(m, d)
            x = cfg.get("gof_x", -float(m))
            for n in cfg.get("N"):
                for scheme in SCHEMES:
                    for pool_kind in ("stratified", "iid"):
                        chi2, p_value = goodness_of_fit(mix, x, scheme, pool_kind, n, gof_trials, cfg.seed,
                                                        cfg.get("gof_bins", self.stats.get("gof_bins", 64)),
                                                        self.runner)
                        gof_rows.append({"scheme": scheme, "pool": pool_kind, "m": m, "D": d, "x": x, "N": n,
                                         "chi2": chi2, "p_value": p_value, "trials": gof_trials})
        tables = [ResultTable("mis_results.csv", "MisResultRow", MIS_COLUMNS, rows)]
        if gof_rows:
            tables.append(ResultTable("mis_gof.csv", "MisGofRow", GOF_COLUMNS, gof_rows))
        return tables

    def _bound_row(self, report: BoundReport, fixture, param):
        row = {key: nan_to_none(value) for key, value in report.to_row().items()}
        row.update(fixture=fixture, param=param)
        return row

    def _discrete_bounds(self):
        cfg = self.config
        p = DiscreteModel(cfg.get("p_probs", [0.5, 0.25, 0.125, 0.125]))
        q = DiscreteModel(cfg.get("q_probs", [0.25, 0.5, 0.125, 0.125]))
        proposal = DiscreteModel(cfg.get("proposal_probs", [0.25, 0.25, 0.25, 0.25]))
        live = proposal.probs > 0
        omega = cfg.get("omega") or float(max(np.max(p.probs[live] / proposal.probs[live]),
                                              np.max(q.probs[live] / proposal.probs[live])))
        y = cfg.get("y", float(p.support[0]))
        moments = proposal_moments(proposal, p)
        rows = []
        for n in cfg.get("N"):
            pool = ProposalPool(RandomStream(cfg.seed).substream(("bounds", n)), n, proposal)
            stats, pool_bound = conditional_mismatch_mc(pool, p, q, y, cfg.trials, window=cfg.get("window", 0.0))
            reports = [BoundReport("prop1_mean", n, omega, pool_bound).with_empirical(stats),
                       thm2_mu(y, n, p, q, proposal, omega, moments).with_empirical(stats)]
            for eps in self._eps:
                try:
                    reports.append(alt_thm2_bound(y, n, eps, p, q, proposal, omega).with_empirical(stats))
                except PreconditionError as e:
                    self.logger.warning(f"[ExperimentRunner] alternative bound skipped at N={n}, eps={eps}: {e}")
            rows.extend(self._bound_row(r, "discrete", y) for r in reports)
            self.logger.info(f"[ExperimentRunner] bounds N={n}: mismatch={stats.p_hat:.4f} "
                             f"pool bound={pool_bound:.4f} finite-N bound={reports[1].bound:.4f}")
        return rows

    def _gaussian_bounds(self):
        cfg = self.config
        rows = []
        for m in cfg.get("m"):
            p, q = GaussianModel(m, 1.0), GaussianModel(-m, 1.0)
            proposal = GaussianModel(0.0, 1.0 + m * m)
            omega = max(gaussian_ratio_sup(p, proposal), gaussian_ratio_sup(q, proposal))
            for n in cfg.get("N"):
                pool = ProposalPool(RandomStream(cfg.seed).substream(("bounds", n, m)), n, proposal)
                stats, pool_bound = mismatch_with_pool_bound(pool, p, q, cfg.trials, self.runner)
                report = BoundReport("prop1_mean", n, omega, pool_bound).with_empirical(stats)
                rows.append(self._bound_row(report, "gaussian", m))
                self.logger.info(f"[ExperimentRunner] bounds m={m} N={n}: mismatch={stats.p_hat:.4f}")
        return rows

    def _run_bounds(self):
        rows = self._discrete_bounds() if self.config.get("fixture") == "discrete" else self._gaussian_bounds()
        return [ResultTable("bounds.csv", "BoundRow", BOUND_COLUMNS, rows)]

    # -- export -------------------------------------------------------------

    def _export(self, store, table: ResultTable):
        cfg = self.config
        rows = []
        for row in table.rows:
            row = dict(row)
            row.setdefault("trials", cfg.trials)
            row.setdefault("seed", cfg.seed)
            row["config_hash"] = cfg.config_hash
            rows.append(row)
        header = f"iscsim kind={cfg.kind} config_sha256={cfg.config_hash} seed={cfg.seed}"
        inputs = {"rows": rows, "columns": table.columns, "contract": table.contract,
                  "filename": table.filename, "header": header}
        context = {"store": store, "actor": f"iscsim {cfg.kind}",
                   "meta": {"config_sha256": cfg.config_hash, "seed": cfg.seed, "threads": self.threads,
                            "config_file": cfg.source}}
        return self.exporter.execute(inputs, context)

    def execute(self):
        """
        Returns:
            dict: {'status': 'success'|'error', 'message', 'data': {'files': [...]} or None}
        """
        cfg = self.config
        handler = self.handlers.get(cfg.kind)
        if handler is None:
            return {"status": "error", "message": f"Unknown experiment kind: {cfg.kind}", "data": None}
        self.logger.info(f"[ExperimentRunner] Starting '{cfg.kind}' run: trials={cfg.trials} seed={cfg.seed} "
                         f"threads={self.threads} config={cfg.config_hash[:12]}")
        try:
            store = ArtifactStore(self.out_dir, keep_history=self.keep_history, write_metadata=self.write_metadata)
            tables = handler()
        except RUNTIME_ERRORS as e:
            self.logger.error(f"[ExperimentRunner] '{cfg.kind}' run failed: {e}", exc_info=True)
            return {"status": "error", "message": str(e), "data": None}

        stop_on_error = self.policy.get("execution", {}).get("stop_on_error", True)
        files, failures = [], []
        for table in tables:
            result = self._export(store, table)
            if result["status"] != "PASS":
                failures.append(result["message"])
                if stop_on_error:
                    break
                continue
            files.append(result["data"]["filepath"])

        if self.transcripts is not None and not failures:
            try:
                lines = "".join(tr.to_json() + "\n" for tr in self.transcripts)
                files.append(store.save("transcripts.jsonl", lines)["filepath"])
            except OSError as e:
                failures.append(f"transcript dump failed: {e}")

        if failures:
            return {"status": "error", "message": "; ".join(failures), "data": {"files": files}}
        self.logger.info(f"[ExperimentRunner] '{cfg.kind}' run complete: {', '.join(files)}")
        return {"status": "success", "message": f"{len(files)} artifact(s) written.", "data": {"files": files}}


def resolve_threads(cli_threads, config: ExperimentConfig):
    """Command line, then ISCSIM_THREADS, then the config, then the core count."""
    if cli_threads:
        return cli_threads
    env = os.getenv("ISCSIM_THREADS", "")
    if env.isdigit() and int(env) > 0:
        return int(env)
    return config.get("threads") or default_threads()


def run(config: ExperimentConfig, out_dir=None, threads=None, check_health=True) -> int:
    """Validates and executes one experiment; returns the process exit code."""
    errors = validate(config)
    if errors:
        for error in errors:
            logging.error(f"[iscsim] {error}")
        return EXIT_CONFIG_ERROR
    try:
        runner = ExperimentRunner(config, out_dir=out_dir, threads=threads)
    except OSError as e:
        logging.error(f"[iscsim] Could not prepare the run: {e}", exc_info=True)
        return EXIT_RUNTIME_ERROR
    if check_health:
        health = SystemHealthChecker(runner.out_dir).execute()
        if health["status"] == "FAIL":
            logging.critical("[iscsim] System health check failed. Aborting run.")
            return EXIT_RUNTIME_ERROR
    result = runner.execute()
    if result["status"] != "success":
        logging.error(f"[iscsim] {result['message']}")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="iscsim", description="Importance-sampling channel simulation experiments.")
    subparsers = parser.add_subparsers(dest="kind", metavar="<subcommand>", parser_class=_Parser)
    subparsers.required = True
    for kind in KINDS:
        sub = subparsers.add_parser(kind, help=KIND_HELP[kind])
        sub.add_argument("--config", required=True, help="experiment config (key = value text or JSON)")
        sub.add_argument("--seed", type=int, help="override the config seed")
        sub.add_argument("--threads", type=int, help="worker threads (default: all cores)")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--validate", action="store_true", help="check the config and exit without running")
        sub.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
        sub.add_argument("--skip-health-check", action="store_true", help="skip the startup checks")
    return parser


def configure_logging(level):
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    logging.getLogger().setLevel(str(level).upper())


def main(argv=None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"iscsim: error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    policy = load_json(resource_path("orchestrator_policy.json")) or {}
    try:
        configure_logging(args.log_level or os.getenv("ISCSIM_LOG_LEVEL")
                          or policy.get("logging", {}).get("level", "INFO"))
    except ValueError as e:
        print(f"iscsim: error: invalid log level: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    loaded = ConfigLoader().execute({"file_path": args.config})
    if loaded["status"] != "success":
        print(f"iscsim: error: {loaded['message']}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    values = loaded["data"]["config"]
    values.setdefault("kind", args.kind)
    if values["kind"] != args.kind:
        print(f"iscsim: error: config kind '{values['kind']}' does not match subcommand '{args.kind}'",
              file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if args.seed is not None:
        values["seed"] = args.seed
    config = ExperimentConfig(values, loaded["data"]["lines"], args.config)

    errors = validate(config)
    if errors:
        for error in errors:
            print(f"{args.config}: {error}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if args.validate:
        print(f"{args.config}: OK ({config.kind}, config_sha256={config.config_hash[:12]})")
        return EXIT_OK

    return run(config, out_dir=args.out, threads=resolve_threads(args.threads, config),
               check_health=not args.skip_health_check)
