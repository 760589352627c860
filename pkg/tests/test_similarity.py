import itertools
import math

import numpy as np
import pytest

from pushrank.data import DataError, ResponseMatrix
from pushrank.similarity import (
    SimilarityMatrix,
    cosine_similarity,
    latent_similarity,
    load_similarity,
    rbf_similarity,
    similarity_correlation,
    spearman_profile_similarity,
    write_similarity,
)


def test_cosine_examples():
    W = cosine_similarity([[1, 1], [1, 0], [0, 1], [1, 1]]).values
    assert W[0, 3] == pytest.approx(1.0, abs=1e-15)
    assert W[1, 2] == 0.0
    assert W[0, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(DataError, match="C1"):
        cosine_similarity([[1, 0], [0, 0]])


def test_rbf_examples():
    assert rbf_similarity([[0, 0], [1, 0]], gamma=1).values[0, 1] == pytest.approx(math.exp(-1))
    assert rbf_similarity([[2, 3], [2, 3]], gamma=5).values[0, 1] == 1.0
    vals = [rbf_similarity([[0, 0], [1, 2]], gamma=g).values[0, 1] for g in (1, 10, 100)]
    assert vals[0] > vals[1] > vals[2] >= 0
    assert vals[2] < 1e-100
    with pytest.raises(DataError):
        rbf_similarity([[0.0], [1.0]], gamma=0)


def test_latent_similarity_uses_columns():
    U = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    s = latent_similarity(U, ["x", "y", "z"], gamma=1)
    assert s.kind == "latent-rbf"
    assert s.values[0, 2] == 1.0
    assert s.values[0, 1] == pytest.approx(math.exp(-1))


def _resp(rows):
    rows = np.asarray(rows, dtype=float)
    return ResponseMatrix([f"C{i}" for i in range(len(rows))],
                          [f"D{j}" for j in range(rows.shape[1])], rows, ~np.isnan(rows))


def test_spearman_profile():
    W = spearman_profile_similarity(_resp([[1, 2, 3, 4], [1, 2, 3, 4], [4, 3, 2, 1],
                                           [1, 3, 2, 4]])).values
    assert W[0, 1] == pytest.approx(1.0)
    assert W[0, 2] == pytest.approx(-1.0)
    assert W[0, 3] == pytest.approx(0.8)


def test_spearman_too_few_common():
    W = spearman_profile_similarity(_resp([[1, 2, np.nan, np.nan], [1, np.nan, 3, 4],
                                           [2, 1, 3, 5]])).values
    assert np.isnan(W[0, 1])
    assert np.isfinite(W[1, 2])


def _rank(x):
    # average ranks by counting, independent of scipy
    x = np.asarray(x)
    return np.array([(x < v).sum() + ((x == v).sum() + 1) / 2 for v in x])


def _pearson(a, b):
    a, b = a - a.mean(), b - b.mean()
    return float(a @ b / math.sqrt((a @ a) * (b @ b)))


def test_similarity_correlation():
    rng = np.random.default_rng(1)
    X = rng.random((4, 3))
    a = cosine_similarity(X)
    b = rbf_similarity(X + 0.3 * rng.random((4, 3)), gamma=2.0)
    assert similarity_correlation(a, a)["all"] == pytest.approx(1.0)
    neg = SimilarityMatrix(a.ids, 2 * np.eye(4) - a.values, "spearman-profile")
    assert similarity_correlation(a, neg)["all"] == pytest.approx(-1.0)

    pairs = list(itertools.combinations(range(4), 2))
    x = np.array([a.values[p, q] for p, q in pairs])
    y = np.array([b.values[p, q] for p, q in pairs])
    assert similarity_correlation(a, b)["all"] == pytest.approx(_pearson(_rank(x), _rank(y)))


def test_similarity_correlation_groups(caplog):
    rng = np.random.default_rng(2)
    a = cosine_similarity(rng.random((5, 3)))
    out = similarity_correlation(a, a, {"C0": "x", "C1": "x", "C2": "x", "C3": "y"})
    assert set(out) == {"x"}
    assert "fewer than two" in caplog.text


def test_write_load(tmp_path):
    s = rbf_similarity(np.random.default_rng(0).random((3, 2)))
    write_similarity(s, tmp_path / "s.csv")
    back = load_similarity(tmp_path / "s.csv")
    assert back.kind == "rbf"
    assert np.array_equal(back.values, s.values)


def test_matrix_invariants():
    with pytest.raises(DataError, match="symmetric"):
        SimilarityMatrix(("a", "b"), [[1, 0.2], [0.3, 1]], "cosine")
    with pytest.raises(DataError, match="diagonal"):
        SimilarityMatrix(("a", "b"), [[0.5, 0.2], [0.2, 1]], "rbf")
