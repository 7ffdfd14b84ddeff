import csv
import io
import json
import logging
import math

import numpy as np
import pandas as pd
from jsonschema import FormatChecker, ValidationError, validate

from artifact_store import ArtifactStore
from config_loader import resource_path


def format_value(value):
    """Shortest round-trip text for a CSV cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def to_jsonable(row):
    """Plain-python copy of a row for schema checks."""
    out = {}
    for key, value in row.items():
        if isinstance(value, (bool, np.bool_)):
            out[key] = bool(value)
        elif isinstance(value, (int, np.integer)):
            out[key] = int(value)
        elif isinstance(value, (float, np.floating)):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def render_csv(rows, columns, header_comment=None):
    buffer = io.StringIO()
    if header_comment:
        buffer.write(f"# {header_comment}\n")
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({col: format_value(row.get(col)) for col in columns})
    text = buffer.getvalue()
    buffer.close()
    return text


def read_results(path):
    """Loads an iscsim CSV, skipping its provenance comment line."""
    return pd.read_csv(path, comment="#")


class CsvExporter:
    """Validates result rows against their data contract and writes them through an ArtifactStore."""

    def __init__(self, contracts_path=None):
        with open(contracts_path or resource_path("data_contracts.json"), "r", encoding="utf-8") as f:
            self.contracts = json.load(f).get("contracts", {})
        self.logger = logging.getLogger(__name__)

    def validate_rows(self, contract_name, rows):
        """Returns a list of violation messages (empty when every row conforms)."""
        if contract_name not in self.contracts:
            return [f"Data contract not found: {contract_name}"]
        schema = self.contracts[contract_name]
        problems = []
        for i, row in enumerate(rows):
            try:
                validate(instance=to_jsonable(row), schema=schema, format_checker=FormatChecker())
            except ValidationError as err:
                field = ".".join(str(p) for p in err.absolute_path) or "row"
                problems.append(f"{contract_name} row {i}: {field}: {err.message}")
        return problems

    def execute(self, inputs, context):
        """
        Args:
            inputs (dict): 'rows', 'columns', 'contract', 'filename' and optional 'header'.
            context (dict): 'store' (ArtifactStore) plus optional 'actor' and 'meta'.

        Returns:
            dict: {'status': 'PASS'|'FAIL', 'message', 'data': {'filepath', 'sha256'} or None}
        """
        rows = inputs.get("rows")
        if rows is None:
            return {"status": "FAIL", "message": "No result rows provided to exporter.", "data": None}
        columns = inputs.get("columns") or []
        if not columns:
            return {"status": "FAIL", "message": "No export columns provided.", "data": None}
        store = context.get("store")
        if not isinstance(store, ArtifactStore):
            return {"status": "FAIL", "message": "An ArtifactStore is required in the context.", "data": None}

        problems = self.validate_rows(inputs.get("contract"), rows)
        if problems:
            for problem in problems:
                self.logger.error(f"[CsvExporter] {problem}")
            return {"status": "FAIL", "message": f"{len(problems)} contract violation(s): {problems[0]}",
                    "data": None}

        try:
            text = render_csv(rows, columns, inputs.get("header"))
            result = store.save_with_metadata(inputs["filename"], text, actor=context.get("actor", "iscsim"),
                                              reason=f"{len(rows)} row(s) of {inputs.get('contract')}",
                                              extra=context.get("meta"))
        except (OSError, TypeError) as e:
            self.logger.error(f"[CsvExporter] Export failed: {e}", exc_info=True)
            return {"status": "FAIL", "message": f"An error occurred during export: {e}", "data": None}

        return {"status": "PASS", "message": f"Exported {len(rows)} row(s) to {result['filepath']}",
                "data": {"filepath": result["filepath"], "sha256": result["sha256"]}}


def nan_to_none(value):
    """None for NaN so nullable contract fields stay empty in the CSV."""
    if isinstance(value, float) and math.isnan(value):
        return None
    return value
