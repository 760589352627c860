import numpy as np
import pytest

import oracles
from instances import random_problem
from pushrank.data import DataError
from pushrank.labeling import label_train_test
from pushrank.model import (
    LatentModel,
    LossError,
    LossWeights,
    OptimizerConfig,
    TrainingLabels,
    baseline_pointwise_mf,
    extrapolate_cell_line,
    gradients,
    loss_terms,
    order_by_score,
    rank_drugs,
    sample_epoch_labels,
    score,
    surrogate_loss,
    train,
)
from pushrank.synthetic import generate_synthetic


def _model(U, V):
    U, V = np.asarray(U, float), np.asarray(V, float)
    return LatentModel(U, V, [f"C{p}" for p in range(U.shape[1])],
                       [f"D{i}" for i in range(V.shape[1])])


def test_score_examples():
    assert score(_model(np.zeros((2, 1)), np.zeros((2, 1))), 0, 0) == 0.0
    assert score(_model([[1], [2]], [[3], [-1]]), 0, 0) == 1.0


@pytest.mark.parametrize("seed", range(8))
def test_loss_matches_oracle(seed):
    U, V, resp, labels, W, w = random_problem(seed)
    pos, neg, pairs = oracles.label_sets(resp.values.tolist(), resp.observed.tolist(), 50)
    want = oracles.loss(U.tolist(), V.tolist(), pos, neg, pairs, W.tolist(),
                        w.alpha, w.beta, w.gamma)
    assert surrogate_loss((U, V), labels, W, w) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_loss_decomposition():
    U, V, _, labels, W, w = random_problem(3)
    t = loss_terms((U, V), labels, W, w)
    parts = ((1 - w.alpha) * t["push"] + w.alpha * t["order"]
             + w.beta / 2 * t["r_uv"] + w.gamma / 2 * t["r_sim"])
    assert t["total"] == pytest.approx(parts, rel=1e-14)
    only = loss_terms((U, V), labels, W, LossWeights(0.0, 0.0, 0.0))
    assert only["total"] == pytest.approx(only["push"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_term_is_named():
    U, V, _, labels, W, w = random_problem(1)
    with pytest.raises(LossError) as e:
        loss_terms((U * np.inf, V), labels, W, w)
    assert e.value.term in {"push", "order", "r_uv", "r_sim"}


def _fd(U, V, labels, W, w, h=1e-5):
    def f(U, V):
        return surrogate_loss((U, V), labels, W, w)

    gU, gV = np.zeros_like(U), np.zeros_like(V)
    for A, G, is_u in ((U, gU, True), (V, gV, False)):
        for idx in np.ndindex(A.shape):
            plus, minus = A.copy(), A.copy()
            plus[idx] += h
            minus[idx] -= h
            if is_u:
                G[idx] = (f(plus, V) - f(minus, V)) / (2 * h)
            else:
                G[idx] = (f(U, plus) - f(U, minus)) / (2 * h)
    return gU, gV


@pytest.mark.parametrize("seed", range(5))
def test_gradient_finite_differences(seed):
    U, V, _, labels, W, w = random_problem(seed)
    dU, dV = gradients((U, V), labels, W, w)
    fU, fV = _fd(U, V, labels, W, w)
    a, b = np.concatenate([dU.ravel(), dV.ravel()]), np.concatenate([fU.ravel(), fV.ravel()])
    assert np.linalg.norm(a - b) / np.linalg.norm(b) <= 1e-5


def test_gradient_only_norm_term():
    U, V, resp, _, W, _ = random_problem(2)
    m, n = resp.shape
    empty = TrainingLabels(tuple(np.array([], int) for _ in range(m)),
                           tuple(np.arange(n) for _ in range(m)),
                           tuple(np.empty((0, 2), int) for _ in range(m)), n)
    w = LossWeights(0.3, 0.7, 0.0)
    dU, dV = gradients((U, V), empty, W, w)
    assert np.allclose(dU, 0.7 / m * U, rtol=0, atol=1e-15)
    assert np.allclose(dV, 0.7 / n * V, rtol=0, atol=1e-15)


def test_similarity_gradient_vanishes_for_equal_vectors():
    U = np.array([[0.4, 0.4], [-1.0, -1.0]])
    V = np.ones((2, 3))
    none = TrainingLabels((np.array([], int),) * 2, (np.array([], int),) * 2,
                          (np.empty((0, 2), int),) * 2, 3)
    W = np.array([[1.0, 1.0], [1.0, 1.0]])
    dU, _ = gradients((U, V), none, W, LossWeights(0.0, 0.0, 100.0))
    assert np.all(dU == 0)


def _labels_for(resp, theta=10):
    lab, _ = label_train_test(resp, resp, theta)
    return TrainingLabels.from_labels(resp, lab)


def test_balanced_sampling_sizes():
    pos = TrainingLabels((np.arange(3),), (np.arange(3, 103),), (np.empty((0, 2), int),), 103)
    batch = sample_epoch_labels(pos, 0, 2)
    assert len(batch) == 2
    assert all(b.neg[0].size == 3 and set(b.neg[0]) <= set(range(3, 103)) for b in batch)
    few = TrainingLabels((np.arange(5),), (np.arange(5, 7),), (np.empty((0, 2), int),), 7)
    assert sample_epoch_labels(few, 0, 1)[0].neg[0].tolist() == [5, 6]
    a, b = sample_epoch_labels(pos, 4, 3), sample_epoch_labels(pos, 4, 3)
    assert all(np.array_equal(x.neg[0], y.neg[0]) for x, y in zip(a, b))


def test_sampling_is_uniform():
    pos = TrainingLabels((np.arange(4),), (np.arange(4, 24),), (np.empty((0, 2), int),), 24)
    draws = 4000
    counts = np.zeros(24)
    for b in sample_epoch_labels(pos, 9, draws):
        counts[b.neg[0]] += 1
    p = 4 / 20
    sd = np.sqrt(draws * p * (1 - p))
    assert np.all(counts[:4] == 0)
    assert np.all(np.abs(counts[4:] - draws * p) <= 3 * sd)


def test_zero_epochs_returns_init():
    resp, _, _ = generate_synthetic(m=6, n=12, seed=1)
    model, trace = train(resp, _labels_for(resp, 30), None, 3, LossWeights(0, 0.1, 0),
                         OptimizerConfig(max_epochs=0))
    assert len(trace) == 1
    rng = np.random.default_rng(0)
    assert np.array_equal(model.U, rng.uniform(-0.01, 0.01, (3, 6)))


def test_training_trace_and_determinism():
    resp, _, _ = generate_synthetic(m=6, n=12, seed=2)
    labels = _labels_for(resp, 30)
    cfg = OptimizerConfig(max_epochs=60)
    m1, t1 = train(resp, labels, None, 5, LossWeights(0, 0.1, 0), cfg)
    m2, t2 = train(resp, labels, None, 5, LossWeights(0, 0.1, 0), cfg)
    assert np.all(np.diff(t1) <= 0)
    assert t1[-1] < t1[0]
    assert t1 == t2 and np.array_equal(m1.U, m2.U)
    assert m1.metadata["epochs_run"] == len(t1) - 1


def test_training_with_similarity_escapes_start():
    resp, expr, _ = generate_synthetic(m=12, n=20, seed=4)
    from pushrank.similarity import cosine_similarity

    sim = cosine_similarity(expr.values, resp.cell_line_ids)
    model, trace = train(resp, _labels_for(resp, 30), sim, 3, LossWeights(0, 0.1, 100.0),
                         OptimizerConfig(max_epochs=150))
    assert trace[-1] < 0.9 * trace[0]
    assert np.abs(model.scores()).max() > 0.1


def test_save_load(tmp_path):
    m = _model(np.arange(6.0).reshape(2, 3), np.ones((2, 4)))
    m = LatentModel(m.U, m.V, m.cell_line_ids, m.drug_ids, {"method": "push-rank"})
    m.save(tmp_path / "mod")
    back = LatentModel.load(tmp_path / "mod")
    assert np.array_equal(back.U, m.U) and back.drug_ids == m.drug_ids
    assert back.metadata == {"method": "push-rank"}


def test_ranking_scale_invariant():
    rng = np.random.default_rng(0)
    m = _model(rng.standard_normal((3, 4)), rng.standard_normal((3, 9)))
    u = m.U[:, 2]
    ids = [d for d, _ in rank_drugs(m, u)]
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert [d for d, _ in rank_drugs(m, c * u)] == ids
    assert [d for d, _ in rank_drugs(m, "C2")] == ids


def test_order_by_score_examples():
    assert [d for d, _ in order_by_score(["A", "B", "C"], [2.0, 1.0, 3.0])] == ["C", "A", "B"]
    assert [d for d, _ in order_by_score(["b", "c", "a"], [1, 1, 1])] == ["a", "b", "c"]
    assert order_by_score(["x"], [0.2]) == [("x", 0.2)]
    m = _model(np.ones((1, 1)), np.ones((1, 2)))
    with pytest.raises(DataError):
        rank_drugs(m, "C0", [])
    with pytest.raises(DataError, match="unknown drug"):
        rank_drugs(m, "C0", ["Z"])


def test_extrapolation():
    m = _model([[1.0, 0.0, 5.0], [0.0, 1.0, 5.0]], np.ones((2, 2)))
    assert extrapolate_cell_line(m, [0.9, 0.9, 0.1], top_k=2).tolist() == [0.5, 0.5]
    u = extrapolate_cell_line(m, [0.2, 1.0, 0.3], top_k=1)
    assert np.array_equal(u, m.U[:, 1])
    with pytest.raises(DataError):
        extrapolate_cell_line(m, [-1.0, -0.5, 0.0], top_k=2)


def test_extrapolation_matches_sort_and_average():
    rng = np.random.default_rng(3)
    U = rng.standard_normal((4, 25))
    m = _model(U, np.ones((4, 2)))
    s = rng.random(25)
    top = sorted(range(25), key=lambda q: -s[q])[:10]
    want = sum(s[q] * U[:, q] for q in top) / sum(s[q] for q in top)
    assert np.allclose(extrapolate_cell_line(m, s, 10), want, rtol=1e-14, atol=1e-14)


def test_baseline_recovers_noiseless():
    resp, _, _ = generate_synthetic(noise_sigma=0.0, missing_frac=0.0, seed=0)
    model, trace = baseline_pointwise_mf(resp, l=5)
    rmse = np.sqrt(np.mean((model.scores() - resp.values) ** 2))
    assert rmse <= 1e-2
    assert np.all(np.diff(trace) <= 0)
    again, _ = baseline_pointwise_mf(resp, l=5)
    assert np.array_equal(again.U, model.U)
    # lower predicted response ranks first
    first = rank_drugs(model, "CL00")[0][0]
    assert first == resp.drug_ids[int(np.argmin(model.scores()[0]))]


def test_baseline_heavy_penalty():
    resp, _, _ = generate_synthetic(m=10, n=12, seed=1)
    model, _ = baseline_pointwise_mf(resp, l=3, reg=1e6)
    assert np.abs(model.U).max() < 1e-6 and np.abs(model.V).max() < 1e-6
