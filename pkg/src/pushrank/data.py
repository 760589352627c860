"""In-memory tables for drug responses, gene expression and sensitivity labels.

Missing responses are carried by an explicit boolean mask; values under the
mask are stored as NaN but are never read.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input tables or violated table invariants."""


def _check_unique(ids: Sequence[str], axis: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"duplicate {axis} id {i}")
        seen.add(i)


@dataclass(frozen=True)
class ResponseMatrix:
    """Cell line x drug response scores; lower means more sensitive.

    Parameters
    ----------
    cell_line_ids, drug_ids : tuple of str
        Row and column identifiers.
    values : ndarray, shape (m, n)
        Response scores. Entries outside ``observed`` are NaN.
    observed : ndarray of bool, shape (m, n)
        Missing-value mask.

    Construction checks shapes, id uniqueness and finiteness. Row/column
    coverage (every row and column has an observation) is checked by
    :meth:`check_coverage`, which loaders and :func:`restrict` call. Per-fold
    test views built with :meth:`with_mask` may legitimately have empty rows.
    """

    cell_line_ids: tuple[str, ...]
    drug_ids: tuple[str, ...]
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cell_line_ids", tuple(self.cell_line_ids))
        object.__setattr__(self, "drug_ids", tuple(self.drug_ids))
        values = np.array(self.values, dtype=float)
        observed = np.array(self.observed, dtype=bool)
        m, n = len(self.cell_line_ids), len(self.drug_ids)
        if values.shape != (m, n) or observed.shape != (m, n):
            raise DataError(
                f"shape mismatch: ids give {(m, n)}, values {values.shape}, "
                f"mask {observed.shape}"
            )
        _check_unique(self.cell_line_ids, "cell line")
        _check_unique(self.drug_ids, "drug")
        if not np.all(np.isfinite(values[observed])):
            raise DataError("non-finite response among observed entries")
        values[~observed] = np.nan
        values.setflags(write=False)
        observed.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def check_coverage(self) -> "ResponseMatrix":
        for p in np.flatnonzero(~self.observed.any(axis=1)):
            raise DataError(f"cell line {self.cell_line_ids[p]} has no observed response")
        for j in np.flatnonzero(~self.observed.any(axis=0)):
            raise DataError(f"drug {self.drug_ids[j]} has no observed response")
        return self

    def with_mask(self, mask: np.ndarray) -> "ResponseMatrix":
        """Same ids and values, observing only ``mask & observed``."""
        mask = np.asarray(mask, dtype=bool)
        return ResponseMatrix(self.cell_line_ids, self.drug_ids, self.values,
                              self.observed & mask)

    def cell_line_index(self, cid: str) -> int:
        try:
            return self.cell_line_ids.index(cid)
        except ValueError:
            raise DataError(f"unknown cell line {cid}") from None

    def drug_index(self, did: str) -> int:
        try:
            return self.drug_ids.index(did)
        except ValueError:
            raise DataError(f"unknown drug {did}") from None


@dataclass(frozen=True)
class ExpressionMatrix:
    """Cell line x gene expression values, fully observed."""

    cell_line_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cell_line_ids", tuple(self.cell_line_ids))
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.cell_line_ids), len(self.gene_ids)):
            raise DataError(f"shape mismatch: values {values.shape}")
        _check_unique(self.cell_line_ids, "cell line")
        _check_unique(self.gene_ids, "gene")
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite expression value")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def subset_genes(self, genes: Sequence[str]) -> "ExpressionMatrix":
        index = {g: i for i, g in enumerate(self.gene_ids)}
        missing = [g for g in genes if g not in index]
        if missing:
            raise DataError(f"unknown gene {missing[0]}")
        cols = [index[g] for g in genes]
        return ExpressionMatrix(self.cell_line_ids, tuple(genes), self.values[:, cols])

    def subset_cell_lines(self, cell_lines: Sequence[str]) -> "ExpressionMatrix":
        index = {c: i for i, c in enumerate(self.cell_line_ids)}
        missing = [c for c in cell_lines if c not in index]
        if missing:
            raise DataError(f"unknown cell line {missing[0]}")
        rows = [index[c] for c in cell_lines]
        return ExpressionMatrix(tuple(cell_lines), self.gene_ids, self.values[rows])


SENSITIVE = 1
INSENSITIVE = 0
UNKNOWN = -1


@dataclass(frozen=True)
class SensitivityLabels:
    """Per (cell line, drug) labels in {1 sensitive, 0 insensitive, -1 unknown}."""

    cell_line_ids: tuple[str, ...]
    drug_ids: tuple[str, ...]
    labels: np.ndarray
    theta: float
    source: str = "train-derived"
    thresholds: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.source not in ("train-derived", "ground-truth-derived"):
            raise DataError(f"unknown label source {self.source!r}")
        if not 0 < self.theta < 100:
            raise DataError(f"theta must lie in (0, 100), got {self.theta}")
        labels = np.array(self.labels, dtype=np.int8)
        if labels.shape != (len(self.cell_line_ids), len(self.drug_ids)):
            raise DataError(f"shape mismatch: labels {labels.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "cell_line_ids", tuple(self.cell_line_ids))
        object.__setattr__(self, "drug_ids", tuple(self.drug_ids))

    @property
    def sensitive(self) -> np.ndarray:
        return self.labels == SENSITIVE

    @property
    def insensitive(self) -> np.ndarray:
        return self.labels == INSENSITIVE

    @property
    def known(self) -> np.ndarray:
        return self.labels != UNKNOWN


def _read_table(path, what: str):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0][1:]]
    row_ids, values, observed = [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) - 1 != len(header):
            raise DataError(
                f"{path}: row {r} has {len(row) - 1} {what} columns, expected {len(header)}"
            )
        row_ids.append(row[0].strip())
        vals, obs = [], []
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "" or cell.upper() == "NA":
                vals.append(math.nan)
                obs.append(False)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: cannot parse {cell!r} at row {r}, column {c + 2} ({header[c]})"
                ) from None
            vals.append(v)
            obs.append(True)
        values.append(vals)
        observed.append(obs)
    m, n = len(row_ids), len(header)
    return (
        row_ids,
        header,
        np.array(values, dtype=float).reshape(m, n),
        np.array(observed, dtype=bool).reshape(m, n),
    )


def load_response(path, require_coverage: bool = True) -> ResponseMatrix:
    """Read a response CSV: header row holds drug ids, first column cell-line ids,
    empty cells are missing.

    Every cell line and drug must have an observation unless
    ``require_coverage`` is false (e.g. for a test fold).
    """
    row_ids, header, values, observed = _read_table(path, "drug")
    _check_unique(row_ids, "cell line")
    _check_unique(header, "drug")
    if not np.all(np.isfinite(values[observed])):
        raise DataError(f"{path}: non-finite response value")
    resp = ResponseMatrix(row_ids, header, values, observed)
    return resp.check_coverage() if require_coverage else resp


def load_expression(path) -> ExpressionMatrix:
    row_ids, header, values, observed = _read_table(path, "gene")
    if not observed.all():
        p, g = np.argwhere(~observed)[0]
        raise DataError(
            f"{path}: missing expression value at row {p + 2}, column {g + 2} "
            f"(cell line {row_ids[p]}, gene {header[g]})"
        )
    return ExpressionMatrix(row_ids, header, values)


def check_alignment(resp: ResponseMatrix, expr: ExpressionMatrix) -> None:
    """Require the two tables to cover the same cell lines."""
    r, e = set(resp.cell_line_ids), set(expr.cell_line_ids)
    for cid in resp.cell_line_ids:
        if cid not in e:
            raise DataError(f"cell line {cid} has responses but no expression profile")
    for cid in expr.cell_line_ids:
        if cid not in r:
            raise DataError(f"cell line {cid} has an expression profile but no responses")


def align_expression(resp: ResponseMatrix, expr: ExpressionMatrix) -> ExpressionMatrix:
    """Expression rows reordered to match ``resp.cell_line_ids``."""
    check_alignment(resp, expr)
    return expr.subset_cell_lines(resp.cell_line_ids)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_table(path, row_ids, col_ids, values, observed=None, corner="id") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *col_ids])
        for p, rid in enumerate(row_ids):
            row = []
            for j in range(len(col_ids)):
                if observed is not None and not observed[p, j]:
                    row.append("")
                else:
                    row.append(_fmt(values[p, j]))
            w.writerow([rid, *row])


def write_response(resp: ResponseMatrix, path) -> None:
    write_table(path, resp.cell_line_ids, resp.drug_ids, resp.values, resp.observed,
                corner="cell_line")


def write_expression(expr: ExpressionMatrix, path) -> None:
    write_table(path, expr.cell_line_ids, expr.gene_ids, expr.values, corner="cell_line")


def write_labels(labels: SensitivityLabels, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = {SENSITIVE: "1", INSENSITIVE: "0", UNKNOWN: "NA"}
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_line", *labels.drug_ids])
        for p, cid in enumerate(labels.cell_line_ids):
            w.writerow([cid, *(text[int(x)] for x in labels.labels[p])])


def load_labels(path, theta: float = 50.0, source: str = "train-derived") -> SensitivityLabels:
    row_ids, header, values, observed = _read_table(path, "drug")
    labels = np.where(observed, values, UNKNOWN).astype(np.int8)
    if not np.all(np.isin(labels, (SENSITIVE, INSENSITIVE, UNKNOWN))):
        raise DataError(f"{path}: labels must be 1, 0 or NA")
    return SensitivityLabels(row_ids, header, labels, theta, source)


def restrict(resp: ResponseMatrix, cell_lines: Sequence[str], drugs: Sequence[str]) -> ResponseMatrix:
    """Sub-matrix over the given ids, in the given order."""
    if not cell_lines or not drugs:
        raise DataError("restrict needs non-empty cell line and drug subsets")
    rows = [resp.cell_line_index(c) for c in cell_lines]
    cols = [resp.drug_index(d) for d in drugs]
    sub = ResponseMatrix(
        cell_lines, drugs, resp.values[np.ix_(rows, cols)], resp.observed[np.ix_(rows, cols)]
    )
    return sub.check_coverage()
