"""CSV output with byte-stable number formatting."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

SCHEMAS = {
    "trajectory": "t,x_1..x_d",
    "summary": "t,mean_1..mean_d,var_1..var_d,count",
    "least-action": "t,x_1..x_d,lagrangian,ref_1..ref_d,err",
    "filter": "t,mu0_1..mu0_d,free_energy[,rmse]",
    "linear-analysis": "t,mean_1..mean_d,var_ii,var_ij for i<j",
}


def fmt(x) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float)) if len(rows) else np.zeros((0, len(header)))
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    """Return ``(header, rows)``; rows as a float array of shape (n, len(header))."""
    text = Path(path).read_text().splitlines()
    header = text[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line], dtype=float)
    return header, rows.reshape(-1, len(header))


def write_manifest(out_dir, command: str, config: dict, files, extra: dict | None = None) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "schemas": {k: SCHEMAS[k] for k in sorted(SCHEMAS)},
        "files": sorted(str(f) for f in files),
        "config": config,
    }
    if extra:
        doc.update(extra)
    Path(out_dir, "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def columns(prefix: str, d: int) -> list:
    return [f"{prefix}_{i + 1}" for i in range(d)]
