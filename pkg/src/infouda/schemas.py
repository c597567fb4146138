"""Column schemas for every CSV the harness writes.

Rows are checked against these before they reach disk.  Bump
``SCHEMA_VERSION`` whenever a column is added, removed or retyped.
"""
from __future__ import annotations

import math

SCHEMA_VERSION = 1

# column name -> kind; "float" cells may be nan/inf, "bool" is true/false, "str" is free text
SCHEMAS: dict[str, dict[str, str]] = {
    "epochs": {"seed": "int", "method": "str", "epoch": "int", "step": "int", "source_loss": "float",
               "source_error": "float", "target_error": "float", "target_accuracy": "float",
               "jeffrey": "float", "cl_distance": "float", "trajectory_sum": "float"},
    "aggregate": {"method": "str", "metric": "str", "n_seeds": "int", "mean": "float", "std": "float"},
    "bounds": {"seed": "int", "subject": "str", "name": "str", "lhs": "float", "rhs": "float", "slack": "float", "valid": "str",
               "flags": "str", "ingredients": "str"},
    "plot": {"seed": "int", "method": "str", "epoch": "int", "target_error": "float", "jeffrey": "float"},
    "oracle": {"seed": "int", "world": "str", "n_x": "int", "n_y": "int", "n": "int", "m": "int",
               "algorithm": "str", "err": "float", "kl_src_tgt": "float", "kl_tgt_src": "float",
               "lambda_star": "float", "dis": "float", "chain_rule_gap": "float"},
    "convergence": {"seed": "int", "n": "int", "support": "int", "trials": "int", "delta": "float",
                    "quantile": "float", "envelope": "float", "envelope_types": "float", "within": "bool"},
    "manifest": {"key": "str", "value": "str"},
}


class SchemaError(ValueError):
    pass


def _check_cell(schema: str, col: str, kind: str, value) -> str:
    if kind == "int":
        if isinstance(value, bool) or int(value) != value:
            raise SchemaError(f"{schema}.{col}: expected an integer, got {value!r}")
        return str(int(value))
    if kind == "float":
        v = float(value)
        return repr(v) if math.isfinite(v) else str(v)
    if kind == "bool":
        if not isinstance(value, bool):
            raise SchemaError(f"{schema}.{col}: expected a boolean, got {value!r}")
        return "true" if value else "false"
    text = str(value)
    if "\n" in text:
        raise SchemaError(f"{schema}.{col}: text cells must be single-line")
    return text


def format_row(schema: str, row: dict) -> dict[str, str]:
    """Validate ``row`` against ``schema`` and render every cell as text."""
    cols = SCHEMAS[schema]
    missing = [c for c in cols if c not in row]
    extra = [c for c in row if c not in cols]
    if missing or extra:
        raise SchemaError(f"{schema}: missing columns {missing}, unexpected columns {extra}")
    return {c: _check_cell(schema, c, kind, row[c]) for c, kind in cols.items()}


def parse_cell(kind: str, text: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return text == "true"
    return text
