"""Deterministic CSV/JSON serialization of tables, estimates and bundles.

CSV files use ``.`` as decimal mark, ``\\n`` line endings and a header row;
floats are written with ``repr`` so they round-trip exactly.  JSON is
canonical: sorted keys, fixed indentation, ASCII only, non-finite floats
spelled as strings.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .config_space import Configuration, ScalarField
from .picard import SemigroupTable


class ExportError(OSError):
    """A result file could not be written or read."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: list, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def table_csv(table: SemigroupTable) -> str:
    coord = "state_index" if table.length is None else "x"
    return csv_text(["t", coord, "value"], table.rows())


def _plain(obj):
    """Convert numpy and other values to JSON-native types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    if isinstance(obj, ScalarField):
        return field_json(obj)
    if isinstance(obj, Configuration):
        return obj.to_list()
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=True,
                      allow_nan=False) + "\n"


def field_json(f: ScalarField) -> dict:
    domain = {"kind": "finite"} if f.length is None else {"kind": "torus", "length": f.length}
    return {"domain": domain, "grid": f.grid.tolist(), "values": f.values.tolist()}


def table_meta(table: SemigroupTable) -> dict:
    meta = {"kind": table.kind, "n_times": int(table.times.size), "n_states": table.n_states}
    meta.update(table.meta)
    return meta


def write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
