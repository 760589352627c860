"""Cell-line similarity matrices and correlations between them."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DataError, ResponseMatrix, _read_table, write_table

log = logging.getLogger(__name__)

KINDS = ("cosine", "rbf", "latent-rbf", "spearman-profile")


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric cell line x cell line similarity weights.

    NaN marks pairs whose similarity is undefined (only produced by the
    Spearman profile similarity when two cell lines share too few drugs).
    """

    ids: tuple[str, ...]
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown similarity kind {self.kind!r}")
        values = np.array(self.values, dtype=float)
        m = len(self.ids)
        if values.shape != (m, m):
            raise DataError(f"similarity shape {values.shape} does not match {m} ids")
        both = np.isfinite(values) & np.isfinite(values.T)
        if not np.all(np.abs(values - values.T)[both] <= 1e-12):
            raise DataError("similarity matrix is not symmetric")
        if np.any(np.isnan(values) != np.isnan(values.T)):
            raise DataError("similarity matrix is not symmetric")
        if self.kind != "spearman-profile" and not np.all(np.isfinite(values)):
            raise DataError(f"{self.kind} similarity must be finite")
        if self.kind in ("cosine", "rbf", "latent-rbf") and not np.allclose(np.diag(values), 1.0):
            raise DataError(f"{self.kind} similarity must have a unit diagonal")
        values.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)

    def subset(self, ids: Sequence[str]) -> "SimilarityMatrix":
        index = {c: i for i, c in enumerate(self.ids)}
        try:
            rows = [index[c] for c in ids]
        except KeyError as e:
            raise DataError(f"unknown cell line {e.args[0]}") from None
        return SimilarityMatrix(tuple(ids), self.values[np.ix_(rows, rows)], self.kind)


def _ids(features, ids):
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise DataError("features must be a 2-d matrix")
    if ids is None:
        ids = tuple(f"C{p}" for p in range(features.shape[0]))
    if len(ids) != features.shape[0]:
        raise DataError("feature rows and ids differ in length")
    return features, tuple(ids)


def cosine_similarity(features, ids: Sequence[str] | None = None) -> SimilarityMatrix:
    X, ids = _ids(features, ids)
    norms = np.linalg.norm(X, axis=1)
    for p in np.flatnonzero(norms == 0):
        raise DataError(f"cell line {ids[p]} has an all-zero feature vector")
    Xn = X / norms[:, None]
    W = Xn @ Xn.T
    W = np.clip((W + W.T) / 2, -1.0, 1.0)
    np.fill_diagonal(W, 1.0)
    return SimilarityMatrix(ids, W, "cosine")


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2 * X @ X.T
    D = np.maximum((D + D.T) / 2, 0.0)
    np.fill_diagonal(D, 0.0)
    return D


def median_heuristic_gamma(features) -> float:
    """1 / (2 * median pairwise squared distance)."""
    X = np.asarray(features, dtype=float)
    D = squared_distances(X)
    off = D[np.triu_indices(X.shape[0], k=1)]
    med = float(np.median(off)) if off.size else 0.0
    return 1.0 / (2.0 * med) if med > 0 else 1.0


def rbf_similarity(features, gamma: float | None = None, ids: Sequence[str] | None = None,
                   kind: str = "rbf") -> SimilarityMatrix:
    """exp(-gamma * ||x_p - x_q||^2); ``gamma`` defaults to the median heuristic."""
    X, ids = _ids(features, ids)
    if gamma is None:
        gamma = median_heuristic_gamma(X)
    if not gamma > 0:
        raise DataError(f"gamma must be positive, got {gamma}")
    W = np.exp(-gamma * squared_distances(X))
    return SimilarityMatrix(ids, W, kind)


def latent_similarity(U: np.ndarray, ids: Sequence[str], gamma: float | None = None) -> SimilarityMatrix:
    """RBF similarity between cell-line latent vectors (columns of ``U``)."""
    return rbf_similarity(np.asarray(U).T, gamma, ids, kind="latent-rbf")


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0:
        return np.nan
    return float(np.sum(ra * rb) / denom)


def spearman_profile_similarity(resp: ResponseMatrix, min_common: int = 3) -> SimilarityMatrix:
    """Spearman correlation of drug-response profiles over commonly observed drugs.

    Pairs with fewer than ``min_common`` shared drugs are NaN.
    """
    m = resp.shape[0]
    W = np.full((m, m), np.nan)
    for p in range(m):
        W[p, p] = 1.0
        for q in range(p + 1, m):
            common = resp.observed[p] & resp.observed[q]
            if common.sum() < min_common:
                continue
            W[p, q] = W[q, p] = _spearman(resp.values[p, common], resp.values[q, common])
    return SimilarityMatrix(resp.cell_line_ids, W, "spearman-profile")


def similarity_correlation(a: SimilarityMatrix, b: SimilarityMatrix,
                           grouping: Mapping[str, str] | None = None) -> dict[str, float]:
    """Spearman correlation between the upper-triangle entries of two matrices.

    Returns ``{"all": rho}`` without a grouping, otherwise one value per group.
    Pairs undefined in either matrix are dropped; groups with fewer than two
    members are skipped with a warning.
    """
    if a.ids != b.ids:
        raise DataError("similarity matrices are not aligned")
    if grouping is None:
        groups = {"all": list(range(len(a.ids)))}
    else:
        groups = {}
        for i, cid in enumerate(a.ids):
            if cid in grouping:
                groups.setdefault(grouping[cid], []).append(i)
    out = {}
    for g in sorted(groups):
        idx = np.array(groups[g])
        if idx.size < 2:
            log.warning("group %s has fewer than two cell lines; skipped", g)
            continue
        iu = np.triu_indices(idx.size, k=1)
        x = a.values[np.ix_(idx, idx)][iu]
        y = b.values[np.ix_(idx, idx)][iu]
        ok = np.isfinite(x) & np.isfinite(y)
        out[g] = _spearman(x[ok], y[ok]) if ok.sum() >= 2 else np.nan
    return out


def write_similarity(sim: SimilarityMatrix, path) -> None:
    write_table(path, sim.ids, sim.ids, sim.values,
                observed=np.isfinite(sim.values), corner=sim.kind)


def load_similarity(path) -> SimilarityMatrix:
    """Read a matrix written by :func:`write_similarity`; the corner cell names the kind."""
    rows, cols, values, observed = _read_table(path, "cell line")
    if rows != cols:
        raise DataError(f"{path}: similarity row and column ids differ")
    with open(path, newline="", encoding="utf-8") as fh:
        kind = next(csv.reader(fh))[0].strip()
    if kind not in KINDS:
        raise DataError(f"{path}: corner cell must name the similarity kind, got {kind!r}")
    return SimilarityMatrix(rows, np.where(observed, values, np.nan), kind)
