"""Small random problems shared by the model tests and the acceptance suite."""

import numpy as np

from pushrank.data import ResponseMatrix
from pushrank.labeling import label_train_test
from pushrank.model import LossWeights, TrainingLabels


def random_problem(seed, all_terms=True):
    """(U, V, resp, labels, W, weights) with m <= 6, n <= 12, l <= 3."""
    rng = np.random.default_rng(seed)
    m, n, l = rng.integers(2, 7), rng.integers(4, 13), rng.integers(1, 4)
    values = rng.standard_normal((m, n))
    observed = rng.random((m, n)) > 0.2
    observed[:, :3] = True  # every row keeps a few entries
    resp = ResponseMatrix([f"C{p}" for p in range(m)], [f"D{i:02d}" for i in range(n)],
                          values, observed)
    lab, _ = label_train_test(resp, resp, 50)
    labels = TrainingLabels.from_labels(resp, lab)
    W = rng.random((m, m))
    W = (W + W.T) / 2
    np.fill_diagonal(W, 1.0)
    alpha = rng.uniform(0.1, 0.9) if all_terms else rng.choice([0.0, 1.0])
    weights = LossWeights(alpha, rng.uniform(0.1, 2), rng.uniform(0.5, 50))
    U = rng.standard_normal((l, m))
    V = rng.standard_normal((l, n))
    return U, V, resp, labels, W, weights


def as_lists(labels):
    pos = [p.tolist() for p in labels.pos]
    neg = [q.tolist() for q in labels.neg]
    pairs = [[tuple(x) for x in pr.tolist()] for pr in labels.pairs]
    return pos, neg, pairs
