"""Per-cell-line k-fold splits and new-cell-line hold-out selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, ResponseMatrix

log = logging.getLogger(__name__)

UNOBSERVED = -2
PINNED = -1


@dataclass(frozen=True)
class FoldSplit:
    """Fold index per (cell line, drug).

    ``assignment[p, j]`` is the test fold of an observed entry, ``PINNED`` for
    entries kept in training in every fold, ``UNOBSERVED`` where the response
    is missing.
    """

    fold_count: int
    assignment: np.ndarray
    seed: int
    warnings: tuple[str, ...] = field(default=())

    def test_mask(self, fold: int) -> np.ndarray:
        return self.assignment == fold

    def train_mask(self, fold: int) -> np.ndarray:
        return (self.assignment != fold) & (self.assignment != UNOBSERVED)

    def fold(self, resp: ResponseMatrix, fold: int) -> tuple[ResponseMatrix, ResponseMatrix]:
        """(train, test) views of ``resp`` for one fold."""
        train = resp.with_mask(self.train_mask(fold)).check_coverage()
        return train, resp.with_mask(self.test_mask(fold))


def _violations(assignment: np.ndarray, k: int) -> list[tuple[int, int]]:
    """(drug, fold) pairs where the drug has no training entry."""
    out = []
    observed = assignment != UNOBSERVED
    for j in range(assignment.shape[1]):
        col = assignment[observed[:, j], j]
        for f in range(k):
            if col.size and np.all(col == f):
                out.append((j, f))
    return out


def kfold_split(resp: ResponseMatrix, k: int, seed: int) -> FoldSplit:
    """Randomly partition each cell line's observed entries into ``k`` folds.

    Per cell line the entries are shuffled and dealt round-robin, so fold sizes
    differ by at most one. Entries that could never be trained on (a drug
    observed once overall, or a cell line with a single observation) are
    pinned to training. Any remaining fold in which some drug has no training
    entry is repaired by swapping fold labels within a cell line.
    """
    if k < 2:
        raise DataError(f"fold count must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    m, n = resp.shape
    obs = resp.observed
    assignment = np.full((m, n), UNOBSERVED, dtype=np.int64)
    warnings = []

    pinned = np.zeros((m, n), dtype=bool)
    col_counts = obs.sum(axis=0)
    for j in np.flatnonzero(col_counts == 1):
        pinned[:, j] |= obs[:, j]
        warnings.append(f"drug {resp.drug_ids[j]} observed once; pinned to training")
    row_counts = obs.sum(axis=1)
    for p in np.flatnonzero(row_counts == 1):
        pinned[p] |= obs[p]
        warnings.append(f"cell line {resp.cell_line_ids[p]} observed once; pinned to training")

    for p in range(m):
        cols = np.flatnonzero(obs[p] & ~pinned[p])
        order = rng.permutation(cols)
        # random fold offset per row so small rows do not all fill fold 0 first
        start = rng.integers(k)
        assignment[p, order] = (np.arange(order.size) + start) % k
        assignment[p, pinned[p]] = PINNED

    for _ in range(10 * m * n + 10):
        bad = _violations(assignment, k)
        if not bad:
            break
        j, f = bad[0]
        if not _repair(assignment, j, f, k, rng):
            rows = np.flatnonzero(assignment[:, j] == f)
            assignment[rows[0], j] = PINNED
            warnings.append(
                f"drug {resp.drug_ids[j]} pinned in cell line "
                f"{resp.cell_line_ids[rows[0]]} to keep it trainable"
            )
    else:  # pragma: no cover - the loop always converges on valid inputs
        raise DataError("could not satisfy fold trainability")

    for w in warnings:
        log.warning(w)
    assignment.setflags(write=False)
    return FoldSplit(k, assignment, seed, tuple(warnings))


def _repair(assignment: np.ndarray, j: int, f: int, k: int, rng) -> bool:
    """Swap one of drug j's entries out of fold f with another drug in the same row."""
    rows = np.flatnonzero(assignment[:, j] == f)
    for p in rows:
        candidates = [
            c for c in np.flatnonzero((assignment[p] >= 0) & (assignment[p] != f))
            if c != j
        ]
        for c in rng.permutation(candidates) if candidates else ():
            g = assignment[p, c]
            col = assignment[:, c]
            others = np.flatnonzero((col != UNOBSERVED) & (np.arange(col.size) != p))
            # after the swap drug c sits in fold f; it needs a training entry there
            if np.any(col[others] != f):
                assignment[p, c], assignment[p, j] = f, g
                return True
    return False


@dataclass(frozen=True)
class HoldoutSplit:
    test_cell_lines: tuple[str, ...]
    train_cell_lines: tuple[str, ...]
    similarity_threshold: float
    seed: int
    protected: tuple[str, ...] = ()


def default_similarity_threshold(values: np.ndarray, pct: float = 90.0) -> float:
    """``pct``-th percentile of the off-diagonal similarities."""
    values = np.asarray(values, dtype=float)
    off = values[~np.eye(values.shape[0], dtype=bool)]
    off = off[np.isfinite(off)]
    return float(np.percentile(off, pct))


def holdout_split(resp: ResponseMatrix, sim, n_new: int, sim_threshold: float | None = None,
                  seed: int = 0) -> HoldoutSplit:
    """Greedily pick ``n_new`` test cell lines that keep similar training partners.

    Each round counts, for every remaining candidate, how many other candidates
    are more similar than the threshold; the candidate with the most (ties to
    the smallest id) becomes a test cell line, and its most similar candidate
    is reserved for training. Both leave the pool.
    """
    ids = list(resp.cell_line_ids)
    m = len(ids)
    if tuple(sim.ids) != tuple(ids):
        raise DataError("similarity ids do not match the response cell lines")
    if not 0 < n_new < m:
        raise DataError(f"n_new must satisfy 0 < n_new < {m}, got {n_new}")
    W = np.asarray(sim.values, dtype=float)
    if not np.allclose(W, W.T, equal_nan=True):
        raise DataError("similarity matrix must be symmetric")
    if sim_threshold is None:
        sim_threshold = default_similarity_threshold(W)

    similar = W > sim_threshold
    np.fill_diagonal(similar, False)
    pool = set(range(m))
    tests, protected = [], []
    while len(tests) < n_new:
        members = sorted(pool, key=lambda i: ids[i])
        counts = {i: sum(similar[i, q] for q in pool if q != i) for i in members}
        best = min(members, key=lambda i: (-counts[i], ids[i]))
        if counts[best] == 0:
            raise DataError(
                f"candidate pool exhausted: only {len(tests)} of {n_new} test cell "
                f"lines selectable at similarity threshold {sim_threshold:g}"
            )
        partners = [q for q in members if q != best and similar[best, q]]
        partner = min(partners, key=lambda q: (-W[best, q], ids[q]))
        tests.append(best)
        protected.append(partner)
        pool -= {best, partner}

    test_set = set(tests)
    train = [ids[i] for i in range(m) if i not in test_set]
    return HoldoutSplit(
        tuple(ids[i] for i in tests), tuple(train), float(sim_threshold), seed,
        tuple(ids[i] for i in protected),
    )


def write_fold_assignment(split: FoldSplit, resp: ResponseMatrix, path) -> None:
    from .data import write_table

    write_table(path, resp.cell_line_ids, resp.drug_ids, split.assignment,
                observed=split.assignment != UNOBSERVED, corner="cell_line")
