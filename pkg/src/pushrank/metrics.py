"""Ranking metrics.

Rankings are sequences of drug ids, best first. Label arguments are
boolean "is sensitive" sequences aligned with the ranking, or a set of
sensitive ids. Undefined values are returned as ``nan`` and excluded from
averages by :func:`mean_defined`.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .data import DataError


def concordance_index(truth, predicted) -> float:
    """Fraction of ground-truth ordered pairs that the prediction orders correctly.

    A pair (i, j) is ordered in the ground truth when ``truth[i] < truth[j]``
    (lower response means more sensitive). It counts as correct only when
    ``predicted[i] > predicted[j]``; predicted ties are wrong. Tied truths
    form no pair. Returns nan when there are no ordered pairs.
    """
    t = np.asarray(truth, dtype=float)
    s = np.asarray(predicted, dtype=float)
    if t.shape != s.shape:
        raise DataError("truth and prediction lengths differ")
    ordered = t[:, None] < t[None, :]
    total = int(ordered.sum())
    if total == 0:
        return math.nan
    return float((ordered & (s[:, None] > s[None, :])).sum() / total)


def sensitive_ci(truth, predicted, sensitive) -> float:
    """Concordance index restricted to the sensitive drugs (nan below two)."""
    mask = np.asarray(sensitive, dtype=bool)
    if mask.sum() < 2:
        return math.nan
    return concordance_index(np.asarray(truth, float)[mask], np.asarray(predicted, float)[mask])


def _hits(ranked: Sequence[str], sensitive) -> np.ndarray:
    if isinstance(sensitive, (set, frozenset, dict)):
        return np.array([d in sensitive for d in ranked], dtype=bool)
    hits = np.asarray(sensitive, dtype=bool)
    if hits.size != len(ranked):
        raise DataError("labels must align with the ranking")
    return hits


def precision_at(ranked, sensitive, j: int) -> float:
    hits = _hits(ranked, sensitive)
    if not 1 <= j <= hits.size:
        raise DataError(f"j must lie in [1, {hits.size}], got {j}")
    return float(hits[:j].sum() / j)


def ap_at_k(ranked, sensitive, k: int) -> float:
    """Mean of precision@j over the positions j <= k holding a sensitive drug.

    Zero when no sensitive drug is in the top k.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    hits = _hits(ranked, sensitive)[:k]
    if not hits.any():
        return 0.0
    prec = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(prec[hits].sum() / hits.sum())


def ah_at_k(ranked, sensitive, k: int) -> float:
    """Number of sensitive drugs among the top k."""
    if k < 1:
        raise DataError("k must be >= 1")
    return float(_hits(ranked, sensitive)[:k].sum())


def truth_top_k(drug_ids: Sequence[str], truth, k: int) -> list[str]:
    """The k lowest-response drugs, ties to the smaller id."""
    if len(drug_ids) < k:
        raise DataError(f"need at least {k} drugs, got {len(drug_ids)}")
    order = sorted(zip(truth, drug_ids), key=lambda t: (float(t[0]), t[1]))
    return [d for _, d in order[:k]]


def at_k(ranked_all: Sequence[str], truth_all, k: int, drug_ids: Sequence[str] | None = None) -> float:
    """Share of the true top-k drugs that the prediction also places in its top k.

    ``truth_all`` maps drug id -> response, or is aligned with ``drug_ids``
    (default: ``ranked_all``).
    """
    ids, truth = _truth(ranked_all, truth_all, drug_ids)
    if len(ranked_all) < k:
        raise DataError(f"need at least {k} drugs, got {len(ranked_all)}")
    top = set(truth_top_k(ids, truth, k))
    return len(top & set(ranked_all[:k])) / k


def nt_k(ranked_all: Sequence[str], truth_all, new_drugs: Iterable[str], k: int,
         drug_ids: Sequence[str] | None = None) -> float:
    """Share of new drugs in the true top k that the prediction ranks in its top k.

    nan when no new drug is in the true top k.
    """
    ids, truth = _truth(ranked_all, truth_all, drug_ids)
    if len(ranked_all) < k:
        raise DataError(f"need at least {k} drugs, got {len(ranked_all)}")
    wanted = set(truth_top_k(ids, truth, k)) & set(new_drugs)
    if not wanted:
        return math.nan
    return len(wanted & set(ranked_all[:k])) / len(wanted)


def _truth(ranked_all, truth_all, drug_ids):
    if isinstance(truth_all, dict):
        ids = list(truth_all)
        return ids, [truth_all[d] for d in ids]
    ids = list(ranked_all if drug_ids is None else drug_ids)
    truth = list(truth_all)
    if len(ids) != len(truth):
        raise DataError("truth values must align with drug ids")
    return ids, truth


def mean_defined(values: Iterable[float]) -> tuple[float, int]:
    """Unweighted mean of the non-nan values and the number excluded."""
    vals = np.asarray(list(values), dtype=float)
    ok = ~np.isnan(vals)
    excluded = int((~ok).sum())
    return (float(vals[ok].mean()) if ok.any() else math.nan), excluded


def _percentile_ranks(values: np.ndarray) -> np.ndarray:
    """Percentile rank (0-100) with the lowest response (most sensitive) at 100."""
    from scipy.stats import rankdata

    n = values.size
    if n == 1:
        return np.array([100.0])
    # rank 1 = highest response -> 0th percentile; rank n = lowest -> 100th
    r = rankdata(-values, method="average")
    return 100.0 * (r - 1) / (n - 1)


def delta_rank_pct(resp, drug_pairs: Sequence[tuple[str, str]]) -> list[float]:
    """Mean absolute percentile-rank difference of each drug pair over the cell
    lines where both drugs are observed (nan if there are none)."""
    index = {d: i for i, d in enumerate(resp.drug_ids)}
    pct = np.full(resp.shape, np.nan)
    for p in range(resp.shape[0]):
        obs = resp.observed[p]
        pct[p, obs] = _percentile_ranks(resp.values[p, obs])
    out = []
    for a, b in drug_pairs:
        i, j = index[a], index[b]
        both = resp.observed[:, i] & resp.observed[:, j]
        out.append(float(np.mean(np.abs(pct[both, i] - pct[both, j]))) if both.any() else math.nan)
    return out


def delta_eff_pct(labels, drug_pairs: Sequence[tuple[str, str]]) -> list[float]:
    """Absolute difference between the two drugs' fractions of cell lines in
    which they are labeled sensitive (fractions over cell lines with a label)."""
    index = {d: i for i, d in enumerate(labels.drug_ids)}
    known = labels.known
    with np.errstate(invalid="ignore"):
        frac = labels.sensitive.sum(axis=0) / known.sum(axis=0)
    return [float(abs(frac[index[a]] - frac[index[b]])) for a, b in drug_pairs]
