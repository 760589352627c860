"""Per-cell-line percentile thresholds and binary sensitivity labels."""

from __future__ import annotations

import numpy as np

from .data import (
    INSENSITIVE,
    SENSITIVE,
    UNKNOWN,
    DataError,
    ResponseMatrix,
    SensitivityLabels,
)


def percentile_threshold(values, theta: float) -> float:
    """Linearly interpolated ``theta``-th percentile.

    The 1-indexed rank on the ascending sort is ``1 + theta/100 * (N - 1)``;
    fractional ranks interpolate between the two neighbouring order statistics.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise DataError("percentile of an empty set")
    if not np.all(np.isfinite(values)):
        raise DataError("percentile input must be finite")
    if not 0 < theta < 100:
        raise DataError(f"theta must lie in (0, 100), got {theta}")
    return float(np.percentile(values, theta, method="linear"))


def _row_thresholds(resp: ResponseMatrix, theta: float) -> np.ndarray:
    out = np.empty(resp.shape[0])
    for p, cid in enumerate(resp.cell_line_ids):
        row = resp.values[p, resp.observed[p]]
        if row.size == 0:
            raise DataError(f"cell line {cid} has no observed responses to threshold")
        out[p] = percentile_threshold(row, theta)
    return out


def _apply(resp: ResponseMatrix, thresholds: np.ndarray) -> np.ndarray:
    labels = np.full(resp.shape, UNKNOWN, dtype=np.int8)
    with np.errstate(invalid="ignore"):
        below = resp.values < thresholds[:, None]
    labels[resp.observed & below] = SENSITIVE
    labels[resp.observed & ~below] = INSENSITIVE
    return labels


def label_train_test(train: ResponseMatrix, test: ResponseMatrix, theta: float):
    """Label train and test entries with thresholds taken from training data only.

    A drug is sensitive in a cell line when its response is strictly below
    that cell line's threshold. Returns ``(train_labels, test_labels)``.
    """
    if train.cell_line_ids != test.cell_line_ids:
        raise DataError("train and test must share the cell-line axis")
    t = _row_thresholds(train, theta)
    return (
        SensitivityLabels(train.cell_line_ids, train.drug_ids, _apply(train, t), theta,
                          "train-derived", t),
        SensitivityLabels(test.cell_line_ids, test.drug_ids, _apply(test, t), theta,
                          "train-derived", t),
    )


def label_new_cell_lines(test: ResponseMatrix, theta: float) -> SensitivityLabels:
    """Label held-out cell lines using each one's own observed responses."""
    t = _row_thresholds(test, theta)
    return SensitivityLabels(test.cell_line_ids, test.drug_ids, _apply(test, t), theta,
                             "ground-truth-derived", t)
