import logging
import os
import tempfile
from importlib.metadata import PackageNotFoundError, version

import numpy as np
from dotenv import load_dotenv
from packaging.version import parse as parse_version

from config_loader import resource_path

RESOURCE_FILES = ("experiment_schema.json", "data_contracts.json", "orchestrator_policy.json",
                  "project_core/iscsim_settings.json")


class SystemHealthChecker:
    """
    Pre-run checks for an iscsim experiment.

    A BLOCKER aborts the run: a missing package, a missing resource file, an
    output directory that cannot take a file, or a numpy build without the
    Philox generator the shared-randomness streams are keyed on. A WARNING
    is logged and the run goes ahead.
    """
    def __init__(self, output_dir=None):
        load_dotenv()
        self.output_dir = output_dir or os.getenv("ISCSIM_OUTPUT_DIR", "outputs")
        self.required_dependencies = {
            "numpy": "1.26.0",
            "scipy": "1.11.0",
            "pandas": "2.0.0",
            "jsonschema": "4.0.0",
        }
        self.critical_files = [resource_path(name) for name in RESOURCE_FILES]
        self.errors = []
        self.warnings = []

    def _blocker(self, message):
        self.errors.append({"level": "BLOCKER", "message": message})

    def _warn(self, message):
        self.warnings.append({"level": "WARNING", "message": message})

    def _check_packages(self):
        for package, minimum in self.required_dependencies.items():
            try:
                installed = parse_version(version(package))
            except PackageNotFoundError:
                self._blocker(f"Package '{package}' is missing; install it from requirements.txt.")
                continue
            if installed < parse_version(minimum):
                self._warn(f"Package '{package}' {installed} is older than the tested minimum {minimum}.")

    def _check_resources(self):
        for path in self.critical_files:
            if not os.path.isfile(path):
                self._blocker(f"Resource file not found: {path}")

    def _check_random_streams(self):
        if not hasattr(np.random, "Philox"):
            self._blocker("numpy.random.Philox is unavailable; shared-randomness streams cannot be built.")

    def _check_output_dir(self):
        try:
            os.makedirs(self.output_dir, exist_ok=True)
            fd, probe = tempfile.mkstemp(prefix=".health_", dir=self.output_dir)
            os.close(fd)
            os.remove(probe)
        except OSError as e:
            self._blocker(f"Output directory '{self.output_dir}' is not writable: {e}")

    def _check_threads(self):
        raw = os.getenv("ISCSIM_THREADS")
        if raw is not None and (not raw.isdigit() or int(raw) < 1):
            self._warn(f"ISCSIM_THREADS='{raw}' is not a positive integer and will be ignored.")

    def execute(self):
        """
        Returns:
            dict: {'status': 'PASS'|'FAIL', 'errors': [...], 'warnings': [...]}
        """
        self.errors, self.warnings = [], []
        for check in (self._check_packages, self._check_resources, self._check_random_streams,
                      self._check_output_dir, self._check_threads):
            check()

        for item in self.warnings:
            logging.warning(f"[SystemHealthChecker] {item['level']}: {item['message']}")
        if self.errors:
            for item in self.errors:
                logging.error(f"[SystemHealthChecker] {item['level']}: {item['message']}")
            return {"status": "FAIL", "errors": list(self.errors), "warnings": self.warnings}
        logging.info(f"[SystemHealthChecker] {len(self.critical_files)} resources and "
                     f"{len(self.required_dependencies)} packages checked; output dir '{self.output_dir}' is writable.")
        return {"status": "PASS", "errors": [], "warnings": self.warnings}
