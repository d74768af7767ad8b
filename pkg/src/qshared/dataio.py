"""Wide CSV format: one row per patient, blank cells after a patient exits.

Columns for ``J`` stages: ``Y1..YJ, Y_primary, A1..AJ, O1..OJ, R1..R{J-1}``,
optionally preceded by an ``id`` column.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .model import SmartDataset, TreatmentCoding, compose_primary

__all__ = ["SchemaError", "ingest_csv", "write_csv", "schema_columns"]


class SchemaError(ValueError):
    """The file does not follow the dataset schema."""


def schema_columns(J: int) -> list[str]:
    return (
        [f"Y{j}" for j in range(1, J + 1)]
        + ["Y_primary"]
        + [f"A{j}" for j in range(1, J + 1)]
        + [f"O{j}" for j in range(1, J + 1)]
        + [f"R{j}" for j in range(1, J)]
    )


def _infer_coding(values: np.ndarray) -> TreatmentCoding:
    distinct = sorted(set(values[~np.isnan(values)].tolist()))
    if set(distinct) <= {-1.0, 1.0}:
        return TreatmentCoding(-1.0, 1.0)
    if len(distinct) == 2:
        return TreatmentCoding(distinct[0], distinct[1])
    raise SchemaError(f"cannot infer a binary treatment coding from values {distinct[:5]}")


def ingest_csv(
    path: str | Path,
    coding: TreatmentCoding | None = None,
    *,
    truncate: bool = False,
    primary_tol: float = 1e-3,
) -> SmartDataset:
    """Read and validate a wide-format dataset.

    A responder's later-stage cells must be blank.  With ``truncate=True``
    they are discarded instead, which is needed for files that record every
    stage for every patient.  ``Y_primary`` must agree with the responder
    composition of the stage outcomes within ``primary_tol``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        body = [row for row in reader if any(cell.strip() for cell in row)]
    has_id = bool(header) and header[0] in ("id", "")
    cols = header[1:] if has_id else header
    J = sum(1 for c in cols if c.startswith("Y") and c[1:].isdigit())
    if J < 1:
        raise SchemaError(f"{path}: no stage outcome columns (Y1, Y2, ...) in header {header}")
    expected = schema_columns(J)
    for c in expected:
        if c not in cols:
            raise SchemaError(f"{path}: missing column {c!r}")
    for c in cols:
        if c not in expected:
            raise SchemaError(f"{path}: unexpected column {c!r}")
    if not body:
        raise SchemaError(f"{path}: no data rows")

    pos = {c: k + (1 if has_id else 0) for k, c in enumerate(cols)}
    n = len(body)
    table = {c: np.full(n, np.nan) for c in expected}
    ids = []
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {lineno} has {len(row)} cells, header has {len(header)}")
        ids.append(row[0].strip() if has_id else str(i))
        for c in expected:
            cell = row[pos[c]].strip()
            if cell == "":
                continue
            try:
                v = float(cell)
            except ValueError:
                raise SchemaError(f"{path}: line {lineno}, column {c}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise SchemaError(f"{path}: line {lineno}, column {c}: non-finite value {cell!r}")
            table[c][i] = v

    for j in range(1, J):
        r = table[f"R{j}"]
        bad = ~np.isnan(r) & ~np.isin(r, (0.0, 1.0))
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise SchemaError(f"{path}: line {k + 2}, column R{j}: responder flag must be 0 or 1")

    # stage presence from responder flags
    present = np.ones((n, J), dtype=bool)
    for j in range(1, J):
        r = table[f"R{j}"]
        missing = present[:, j - 1] & np.isnan(r)
        if missing.any():
            k = int(np.flatnonzero(missing)[0])
            raise SchemaError(f"{path}: line {k + 2}: R{j} is blank for a patient at stage {j}")
        present[:, j] = present[:, j - 1] & (r == 0)

    for j in range(1, J + 1):
        later = [f"Y{j}", f"A{j}", f"O{j}"] + ([f"R{j}"] if j < J else [])
        for c in later:
            stray = ~present[:, j - 1] & ~np.isnan(table[c])
            if stray.any():
                if not truncate:
                    k = int(np.flatnonzero(stray)[0])
                    raise SchemaError(
                        f"{path}: line {k + 2} (patient {ids[k]}): {c} is set after the patient responded"
                    )
                table[c][stray] = np.nan
        for c in (f"A{j}", f"O{j}"):
            gap = present[:, j - 1] & np.isnan(table[c])
            if gap.any():
                k = int(np.flatnonzero(gap)[0])
                raise SchemaError(f"{path}: line {k + 2} (patient {ids[k]}): {c} is blank at a stage the patient reached")

    if np.isnan(table["Y_primary"]).any():
        k = int(np.flatnonzero(np.isnan(table["Y_primary"]))[0])
        raise SchemaError(f"{path}: line {k + 2}: Y_primary is blank")

    A = np.column_stack([table[f"A{j}"] for j in range(1, J + 1)])
    coding = coding or _infer_coding(A)
    X = np.column_stack([table[f"O{j}"] for j in range(1, J + 1)])[:, :, None]
    Y = np.column_stack([table[f"Y{j}"] for j in range(1, J + 1)])
    R = np.column_stack([table[f"R{j}"] for j in range(1, J)]) if J > 1 else np.zeros((n, 0))
    primary = table["Y_primary"]

    exit_stage = present.sum(axis=1)
    complete = ~np.isnan(np.where(present, Y, 0.0)).any(axis=1)
    composed = compose_primary(np.where(present, Y, 0.0), exit_stage)
    off = complete & (np.abs(composed - primary) > primary_tol)
    if off.any():
        k = int(np.flatnonzero(off)[0])
        raise SchemaError(
            f"{path}: line {k + 2} (patient {ids[k]}): Y_primary {primary[k]} does not match "
            f"the stage outcomes ({composed[k]:.6g})"
        )
    try:
        return SmartDataset(X, A, R, Y, primary, coding, np.asarray(ids))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_csv(data: SmartDataset, path: str | Path, with_id: bool = False) -> None:
    if data.num_covariates != 1:
        raise ValueError("the wide CSV format holds one covariate per stage")
    J = data.num_stages
    cols = schema_columns(J)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["id"] if with_id else []) + cols)
        for i in range(data.n):
            vals = (
                list(data.stage_outcomes[i])
                + [data.primary[i]]
                + list(data.treatments[i])
                + list(data.covariates[i, :, 0])
            )
            flags = ["" if np.isnan(r) else str(int(r)) for r in data.responders[i]]
            w.writerow(([str(data.patient_ids[i])] if with_id else []) + [_fmt(v) for v in vals] + flags)
