import itertools
import json
import logging
import os

from jsonschema import Draft7Validator, FormatChecker

from config_loader import resource_path

MISMATCH_KINDS = ("match_prob", "feedback_sweep", "bounds")
BINNED_KINDS = ("match_prob", "rd_curve", "feedback_sweep")
# value lists that are not grid axes
ZIP_EXEMPT = ("p_probs", "q_probs", "proposal_probs", "epsilon")


def _is_power_of_two(value):
    return isinstance(value, int) and value >= 1 and value & (value - 1) == 0


def grid_pairs(config, keys):
    """Value tuples over `keys` under the config's grid mode; zip broadcasts singletons."""
    lists = [config.get(key) or [None] for key in keys]
    if config.get("grid", "product") == "zip":
        width = max(len(values) for values in lists)
        if any(len(values) not in (1, width) for values in lists):
            return None
        return [tuple(values[i] if len(values) > 1 else values[0] for values in lists) for i in range(width)]
    return list(itertools.product(*lists))


class ConfigValidator:
    """
    Validates the project's resource files and, when given, an experiment config.
    """
    def __init__(self, schema_path=None):
        self.errors = []
        self.schema_path = schema_path or resource_path("experiment_schema.json")
        self.required_files = [self.schema_path] + [
            resource_path(name)
            for name in ("data_contracts.json", "orchestrator_policy.json", "project_core/iscsim_settings.json")
        ]

    def _load_resource(self, filepath):
        """Parsed JSON of a bundled resource, or None with the reason recorded."""
        if not os.path.exists(filepath):
            self.errors.append(f"Resource not found: {filepath}")
            return None
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            self.errors.append(f"Resource unreadable: {filepath}: {e}")
            return None
        if not text.strip():
            self.errors.append(f"Resource is empty: {filepath}")
            return None
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            self.errors.append(f"Resource is not valid JSON: {filepath} (line {e.lineno}): {e.msg}")
            return None

    def _where(self, lines, field):
        if field in lines:
            return f"line {lines[field]}: field '{field}'"
        return f"field '{field}'"

    def _validate_schema(self, config, lines):
        schema = self._load_resource(self.schema_path)
        if schema is None:
            return False
        validator = Draft7Validator(schema, format_checker=FormatChecker())
        found = False
        for error in sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path)):
            path = list(error.absolute_path)
            if path:
                self.errors.append(f"{self._where(lines, path[0])}: {error.message}")
            elif error.validator == "additionalProperties":
                unknown = sorted(set(config) - set(schema.get("properties", {})))
                for key in unknown:
                    self.errors.append(f"{self._where(lines, key)}: unknown key")
            else:
                self.errors.append(f"config: {error.message}")
            found = True
        return not found

    def _violation(self, lines, field, constraint, detail):
        self.errors.append(f"{self._where(lines, field)}: constraint '{constraint}' violated: {detail}")

    def _validate_cross_fields(self, config, lines):
        kind = config.get("kind")
        trials = config.get("trials", 0)

        if kind in MISMATCH_KINDS and trials < 100:
            self._violation(lines, "trials", "trials >= 100", f"mismatch estimates need 100 trials, got {trials}")

        if config.get("grid") == "zip":
            lengths = {key: len(value) for key, value in config.items()
                       if isinstance(value, list) and key not in ZIP_EXEMPT}
            widths = {n for n in lengths.values() if n > 1}
            if len(widths) > 1:
                self._violation(lines, "grid", "equal list lengths", f"zip grid lists differ in length: {lengths}")
                return

        if kind in BINNED_KINDS:
            for n, bins in grid_pairs(config, ["N", "L"]):
                if not _is_power_of_two(bins):
                    self._violation(lines, "L", "L is a power of 2", f"L={bins}")
                elif bins > n:
                    self._violation(lines, "L", "L <= N", f"L={bins} > N={n}")
                elif n % bins:
                    self._violation(lines, "L", "L divides N", f"N={n}, L={bins}")

        if kind == "rd_curve":
            mode = config.get("mode")
            if mode == "partial":
                if "L2" not in config:
                    self._violation(lines, "mode", "partial mode needs L2", "L2 is missing")
                else:
                    pairs = grid_pairs(config, ["N", "L", "L2"]) or []
                    for n, bins, l2 in pairs:
                        if bins and n and bins <= n and l2 > n // bins:
                            self._violation(lines, "L2", "L2 <= N/L", f"L2={l2} > N/L={n // bins}")
            if mode == "hashed" and "h" not in config:
                self._violation(lines, "mode", "hashed mode needs h", "h is missing")

        if kind == "feedback_sweep" and "L2" in config:
            for n, bins, l2 in grid_pairs(config, ["N", "L", "L2"]) or []:
                if bins and n and bins <= n and l2 > n // bins:
                    self._violation(lines, "L2", "L2 <= N/L", f"L2={l2} > N/L={n // bins}")

        if kind == "mis":
            for n in config.get("N", []):
                if n % 2:
                    self._violation(lines, "N", "N is even", f"stratified pools split N={n} in halves")

        if kind == "bounds":
            for n in config.get("N", []):
                if n < 2:
                    self._violation(lines, "N", "N >= 2", f"N={n}")
            if config.get("fixture") == "gaussian" and "m" not in config:
                self._violation(lines, "fixture", "gaussian fixture needs m", "m is missing")
            if config.get("fixture") == "discrete":
                sizes = {key: len(config[key]) for key in ("p_probs", "q_probs", "proposal_probs") if key in config}
                if len(set(sizes.values())) > 1:
                    self._violation(lines, "p_probs", "equal alphabet sizes", f"sizes {sizes}")

    def validate_config(self, config, lines=None):
        """Schema and cross-field checks for one experiment config."""
        lines = lines or {}
        if self._validate_schema(config, lines):
            self._validate_cross_fields(config, lines)

    def execute(self, config=None, lines=None):
        """Resource files first, then the config when one is given.

        Returns:
            dict: {'status': 'PASS'|'FAIL', 'errors': [...]}
        """
        logging.debug("[ConfigValidator] Checking resources and config")
        self.errors = []

        for f in self.required_files:
            self._load_resource(f)

        if config is not None:
            self.validate_config(config, lines)

        if self.errors:
            for error in self.errors:
                logging.error(f"[ConfigValidator] - {error}")
            return {"status": "FAIL", "errors": self.errors}

        logging.info("[ConfigValidator] Configuration validation successful.")
        return {"status": "PASS", "errors": []}
