"""Dataset files and report outputs.

Formats:

* responses: one number per line;
* confounders: CSV with ``n`` rows and ``m`` columns, optional header row;
* matrices: first line ``p q``, then ``n`` CSV lines of ``p*q`` values in
  column-major order (``vec(M_i)``).

Numbers are written with ``repr`` so a save/load cycle is bit-exact.
Reports are a CSV table plus a JSON sidecar ``<table>.meta.json``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .model import Family, MatrixDataset


def _parse_float(text: str, where: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise ValidationError(f"{where}: non-numeric value {text.strip()!r}") from None
    if not math.isfinite(val):
        raise ValidationError(f"{where}: non-finite value {text.strip()!r}")
    return val


def _lines(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: file not found")
    return path.read_text().splitlines()


def read_responses(path) -> np.ndarray:
    values = []
    for i, line in enumerate(_lines(path), start=1):
        if line.strip():
            values.append(_parse_float(line, f"{path}: line {i}"))
    if not values:
        raise ValidationError(f"{path}: no responses")
    return np.array(values)


def read_matrices(path) -> np.ndarray:
    lines = [ln for ln in _lines(path)]
    if not lines:
        raise ValidationError(f"{path}: empty matrix file")
    head = lines[0].replace(",", " ").split()
    if len(head) != 2:
        raise ValidationError(f"{path}: line 1 must be 'p q', got {lines[0]!r}")
    try:
        p, q = int(head[0]), int(head[1])
    except ValueError:
        raise ValidationError(f"{path}: line 1 must hold two integers, got {lines[0]!r}") from None
    if p < 1 or q < 1:
        raise ValidationError(f"{path}: dimensions must be positive, got {p} x {q}")
    mats = []
    for i, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != p * q:
            raise ValidationError(
                f"{path}: line {i} has {len(row)} values, expected p*q = {p * q}"
            )
        vals = [_parse_float(c, f"{path}: line {i}, column {j}") for j, c in enumerate(row, 1)]
        mats.append(np.array(vals).reshape((p, q), order="F"))
    if not mats:
        raise ValidationError(f"{path}: no matrices after the header")
    return np.stack(mats)


def read_covariates(path) -> np.ndarray:
    rows = [r for r in csv.reader(_lines(path)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"{path}: empty covariate file")
    start = 0
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        start = 1  # header row
    width = len(rows[start]) if start < len(rows) else len(rows[0])
    out = []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ValidationError(f"{path}: line {i} has {len(row)} columns, expected {width}")
        out.append([_parse_float(c, f"{path}: line {i}, column {j}") for j, c in enumerate(row, 1)])
    return np.array(out, dtype=float).reshape(len(out), width)


def load_dataset(response_path, matrix_path, covariate_path=None, family=None) -> MatrixDataset:
    """Read and validate a dataset; ``family`` adds the 0/1 check for logistic data."""
    y = read_responses(response_path)
    mats = read_matrices(matrix_path)
    if mats.shape[0] != y.shape[0]:
        raise ValidationError(
            f"{matrix_path}: {mats.shape[0]} matrices but {response_path} has {y.shape[0]} responses"
        )
    z = None
    if covariate_path is not None:
        z = read_covariates(covariate_path)
        if z.shape[0] != y.shape[0]:
            raise ValidationError(
                f"{covariate_path}: {z.shape[0]} rows but {response_path} has {y.shape[0]} responses"
            )
    data = MatrixDataset(y=y, mats=mats, z=z)
    if family is not None:
        data.check_family(Family.parse(family))
    return data


def fmt(x) -> str:
    """Shortest round-trip text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return repr(float(x))


def save_dataset(data: MatrixDataset, response_path, matrix_path, covariate_path=None) -> None:
    Path(response_path).write_text("".join(fmt(v) + "\n" for v in data.y))
    lines = [f"{data.p} {data.q}"]
    lines += [",".join(fmt(v) for v in row) for row in data.vec_mats]
    Path(matrix_path).write_text("\n".join(lines) + "\n")
    if covariate_path is not None and data.m > 0:
        Path(covariate_path).write_text(
            "".join(",".join(fmt(v) for v in row) + "\n" for row in data.z)
        )


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], metadata: Optional[Mapping] = None):
    """Write ``rows`` as CSV and, when given, ``metadata`` as the JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    if metadata is not None:
        write_metadata(path, metadata)


def metadata_path(table_path) -> Path:
    table_path = Path(table_path)
    return table_path.with_name(table_path.name + ".meta.json")


def write_metadata(table_path, metadata: Mapping) -> None:
    metadata_path(table_path).write_text(
        json.dumps(_jsonable(metadata), indent=2, sort_keys=True) + "\n"
    )


def read_table(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_metadata(table_path) -> dict:
    return json.loads(metadata_path(table_path).read_text())
