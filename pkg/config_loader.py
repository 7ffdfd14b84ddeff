import json
import logging
import os
import re


class ConfigError(ValueError):
    """Raised for configuration text that cannot be parsed."""


_INT_RE = re.compile(r"^[+-]?\d+$")
_POW_RE = re.compile(r"^(\d+)\s*\^\s*(\d+)$")
_BOOL = {"true": True, "yes": True, "on": True, "false": False, "no": False, "off": False}


def resource_path(name):
    """Absolute path of a bundled resource file, independent of the working directory."""
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), name)


def coerce_scalar(text):
    """Turns a config token into bool, int (including a^b), float or str."""
    token = text.strip()
    lowered = token.lower()
    if lowered in _BOOL:
        return _BOOL[lowered]
    if _INT_RE.match(token):
        return int(token)
    power = _POW_RE.match(token)
    if power:
        return int(power.group(1)) ** int(power.group(2))
    try:
        return float(token)
    except ValueError:
        return token


def parse_config_text(text, list_keys=()):
    """
    Parses `key = value` lines; '#' starts a comment and commas separate list items.

    Returns:
        tuple: (config dict, {key: line number})
    """
    config, lines = {}, {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: missing key")
        if key in config:
            raise ConfigError(f"line {number}: duplicate key '{key}' (first set on line {lines[key]})")
        items = [item for item in (v.strip() for v in value.split(",")) if item]
        if key in list_keys or len(items) > 1:
            config[key] = [coerce_scalar(item) for item in items]
        else:
            config[key] = coerce_scalar(items[0]) if items else ""
        lines[key] = number
    return config, lines


def list_keys_from_schema(schema):
    return {name for name, spec in schema.get("properties", {}).items() if spec.get("type") == "array"}


class ConfigLoader:
    """Reads an experiment config file (key = value text or JSON) into a dictionary."""

    def __init__(self, schema_path=None):
        schema_path = schema_path or resource_path("experiment_schema.json")
        self.list_keys = set()
        if schema_path and os.path.exists(schema_path):
            with open(schema_path, "r", encoding="utf-8") as f:
                self.list_keys = list_keys_from_schema(json.load(f))

    def execute(self, inputs, context=None):
        """
        Returns:
            dict: {'status': 'success'|'error', 'data': {'config', 'lines'} or None, 'message'}
        """
        file_path = inputs.get("file_path")
        if not file_path:
            message = "'file_path' input is missing."
            logging.error(f"[ConfigLoader] {message}")
            return {"status": "error", "data": None, "message": message}

        logging.info(f"[ConfigLoader] Loading experiment config from: {file_path}")
        if not os.path.exists(file_path):
            message = f"File not found: {file_path}"
            logging.error(f"[ConfigLoader] {message}")
            return {"status": "error", "data": None, "message": message}

        try:
            with open(file_path, "r", encoding="utf-8") as f:
                text = f.read()
            if os.path.splitext(file_path)[1].lower() == ".json":
                config = json.loads(text)
                if not isinstance(config, dict):
                    raise ConfigError("a JSON config must be an object")
                for key in self.list_keys & set(config):
                    if not isinstance(config[key], list):
                        config[key] = [config[key]]
                lines = {}
            else:
                config, lines = parse_config_text(text, self.list_keys)
        except (ConfigError, json.JSONDecodeError) as e:
            message = f"Invalid config {file_path}: {e}"
            logging.error(f"[ConfigLoader] {message}")
            return {"status": "error", "data": None, "message": message}
        except OSError as e:
            message = f"Failed to read config {file_path}: {e}"
            logging.error(f"[ConfigLoader] {message}", exc_info=True)
            return {"status": "error", "data": None, "message": message}

        message = f"Config '{file_path}' parsed ({len(config)} keys)."
        logging.info(f"[ConfigLoader] {message}")
        return {"status": "success", "data": {"config": config, "lines": lines}, "message": message}
