"""Latent-factor drug ranking with a push term, a sensitive-order term and a
similarity-graph regularizer on cell-line vectors.

Cell line p and drug i have latent vectors ``U[:, p]`` and ``V[:, i]``; the
score is their dot product and drugs are ranked by descending score. The
training loss combines

* a push term: for every (sensitive, insensitive) pair in a cell line, the
  logistic surrogate ``log(1 + exp(-(s_pos - s_neg)))``, averaged per cell line;
* an order term: the same surrogate over ordered pairs of sensitive drugs
  (the more sensitive drug should score higher), averaged per cell line;
* ``(1/m)||U||^2 + (1/n)||V||^2``;
* ``(1/m^2) sum_pq w_pq ||u_p - u_q||^2`` with cell-line similarities ``w``,

weighted as ``(1 - alpha) push + alpha order + beta/2 R_uv + gamma/2 R_sim``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import DataError, ResponseMatrix, SensitivityLabels, _read_table, write_table

log = logging.getLogger(__name__)


class LossError(FloatingPointError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} term ({value})")
        self.term = term


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, trace: list[float]):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class LatentModel:
    U: np.ndarray
    V: np.ndarray
    cell_line_ids: tuple[str, ...]
    drug_ids: tuple[str, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        V = np.array(self.V, dtype=float)
        if U.ndim != 2 or V.ndim != 2 or U.shape[0] != V.shape[0]:
            raise DataError(f"latent shapes do not match: U {U.shape}, V {V.shape}")
        if U.shape[1] != len(self.cell_line_ids) or V.shape[1] != len(self.drug_ids):
            raise DataError("latent column counts do not match the id lists")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise DataError("latent vectors must be finite")
        U.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "cell_line_ids", tuple(self.cell_line_ids))
        object.__setattr__(self, "drug_ids", tuple(self.drug_ids))

    @property
    def latent_dim(self) -> int:
        return self.U.shape[0]

    def scores(self) -> np.ndarray:
        """All cell line x drug scores."""
        return self.U.T @ self.V

    def save(self, prefix) -> None:
        """Write ``<prefix>_U.csv``, ``<prefix>_V.csv`` and ``<prefix>_meta.json``."""
        prefix = Path(prefix)
        dims = [f"z{k}" for k in range(self.latent_dim)]
        write_table(f"{prefix}_U.csv", self.cell_line_ids, dims, self.U.T, corner="cell_line")
        write_table(f"{prefix}_V.csv", self.drug_ids, dims, self.V.T, corner="drug")
        meta = {"latent_dim": self.latent_dim, **self.metadata}
        Path(f"{prefix}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, prefix) -> "LatentModel":
        cl, _, U, _ = _read_table(f"{prefix}_U.csv", "latent")
        drugs, _, V, _ = _read_table(f"{prefix}_V.csv", "latent")
        meta_path = Path(f"{prefix}_meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        meta.pop("latent_dim", None)
        return cls(U.T, V.T, tuple(cl), tuple(drugs), meta)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    beta: float = 0.1
    gamma: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0 or self.gamma < 0:
            raise DataError("beta and gamma must be non-negative")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1.0
    max_epochs: int = 300
    convergence_tol: float = 1e-5
    sample_repeats: int = 3
    seed: int = 0
    max_rejections: int = 30
    patience: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError("learning rate must be positive")
        if self.max_epochs < 0 or self.sample_repeats < 1:
            raise DataError("max_epochs must be >= 0 and sample_repeats >= 1")
        if self.patience < 1:
            raise DataError("patience must be >= 1")


@dataclass(frozen=True)
class TrainingLabels:
    """Per cell line: sensitive drug indices, insensitive drug indices and the
    ordered sensitive pairs ``(i, j)`` with drug i more sensitive than drug j."""

    pos: tuple[np.ndarray, ...]
    neg: tuple[np.ndarray, ...]
    pairs: tuple[np.ndarray, ...]
    n_drugs: int

    @property
    def n_cell_lines(self) -> int:
        return len(self.pos)

    @cached_property
    def packed(self) -> "_Packed":
        return _Packed(self)

    @classmethod
    def from_labels(cls, resp: ResponseMatrix, labels: SensitivityLabels) -> "TrainingLabels":
        if resp.cell_line_ids != labels.cell_line_ids or resp.drug_ids != labels.drug_ids:
            raise DataError("labels and responses are not aligned")
        pos, neg, pairs = [], [], []
        for p in range(resp.shape[0]):
            obs = resp.observed[p]
            sp = np.flatnonzero(obs & labels.sensitive[p])
            sn = np.flatnonzero(obs & labels.insensitive[p])
            r = resp.values[p, sp]
            a, b = np.nonzero(r[:, None] < r[None, :])
            pos.append(sp)
            neg.append(sn)
            pairs.append(np.stack([sp[a], sp[b]], axis=1) if a.size else np.empty((0, 2), int))
        return cls(tuple(pos), tuple(neg), tuple(pairs), resp.shape[1])


def score(model: LatentModel, p: int, i: int) -> float:
    return float(model.U[:, p] @ model.V[:, i])


def _softplus_neg(x):
    """log(1 + exp(-x)), stable for large |x|."""
    return np.logaddexp(0.0, -x)


def _check(term: str, value: float) -> float:
    if not np.isfinite(value):
        raise LossError(term, value)
    return value


class _Packed:
    """Label index sets padded into rectangular arrays for vectorized scoring."""

    def __init__(self, labels: "TrainingLabels"):
        m = labels.n_cell_lines
        self.m, self.n = m, labels.n_drugs
        self.pos, self.pos_ok = self._pad(labels.pos)
        self.neg, self.neg_ok = self._pad(labels.neg)
        first = [pr[:, 0] if len(pr) else np.empty(0, int) for pr in labels.pairs]
        second = [pr[:, 1] if len(pr) else np.empty(0, int) for pr in labels.pairs]
        self.pa, self.pair_ok = self._pad(first)
        self.pb, _ = self._pad(second)
        n_pos = np.array([a.size for a in labels.pos], dtype=float)
        n_neg = np.array([a.size for a in labels.neg], dtype=float)
        n_pairs = self.pair_ok.sum(axis=1).astype(float)
        with np.errstate(divide="ignore"):
            self.push_w = np.where(n_pos * n_neg > 0, 1.0 / (n_pos * n_neg), 0.0)
            self.order_w = np.where(n_pairs > 0, 1.0 / n_pairs, 0.0)
        self.rows = np.arange(m)[:, None]

    @staticmethod
    def _pad(arrays):
        width = max((a.size for a in arrays), default=0)
        idx = np.zeros((len(arrays), width), dtype=np.int64)
        ok = np.zeros((len(arrays), width), dtype=bool)
        for p, a in enumerate(arrays):
            idx[p, : a.size] = a
            ok[p, : a.size] = True
        return idx, ok

    def scatter(self, rows_idx, values) -> np.ndarray:
        flat = (self.rows * self.n + rows_idx).ravel()
        return np.bincount(flat, weights=values.ravel(), minlength=self.m * self.n).reshape(
            self.m, self.n
        )


def _ranking_terms(U, V, labels: "TrainingLabels", alpha: float, with_grad: bool):
    """Push and order terms plus d(weighted terms)/d(scores) as an m x n matrix."""
    pk = labels.packed
    S = U.T @ V
    sp = np.take_along_axis(S, pk.pos, axis=1)
    sn = np.take_along_axis(S, pk.neg, axis=1)
    x = sp[:, :, None] - sn[:, None, :]
    pair_mask = pk.pos_ok[:, :, None] & pk.neg_ok[:, None, :]
    wpush = np.where(pair_mask, pk.push_w[:, None, None], 0.0)
    push = float(np.sum(_softplus_neg(x) * wpush))
    xo = np.take_along_axis(S, pk.pa, axis=1) - np.take_along_axis(S, pk.pb, axis=1)
    worder = np.where(pk.pair_ok, pk.order_w[:, None], 0.0)
    order = float(np.sum(_softplus_neg(xo) * worder))
    if not with_grad:
        return push, order, None
    g = -(1.0 - alpha) * expit(-x) * wpush
    h = -alpha * expit(-xo) * worder
    dS = (
        pk.scatter(pk.pos, g.sum(axis=2))
        - pk.scatter(pk.neg, g.sum(axis=1))
        + pk.scatter(pk.pa, h)
        - pk.scatter(pk.pb, h)
    )
    return push, order, dS


def _sim_values(sim, m: int) -> np.ndarray:
    if sim is None:
        return np.zeros((m, m))
    W = np.asarray(getattr(sim, "values", sim), dtype=float)
    if W.shape != (m, m):
        raise DataError(f"similarity shape {W.shape} does not match {m} cell lines")
    if not np.all(np.isfinite(W)):
        raise DataError("similarity used for training must be finite")
    return W


def _uv(model_or_pair):
    if isinstance(model_or_pair, LatentModel):
        return model_or_pair.U, model_or_pair.V
    return model_or_pair


def loss_terms(model, labels: TrainingLabels, sim, w: LossWeights) -> dict[str, float]:
    """Unweighted push, order, R_uv and R_sim terms and the weighted total."""
    U, V = _uv(model)
    m, n = U.shape[1], V.shape[1]
    push, order, _ = _ranking_terms(U, V, labels, w.alpha, False)
    r_uv = float(np.sum(U * U) / m + np.sum(V * V) / n)
    W = _sim_values(sim, m)
    if w.gamma:
        G = U.T @ U
        sq = np.diag(G)
        r_sim = float(np.sum(W * (sq[:, None] + sq[None, :] - 2 * G)) / m**2)
    else:
        r_sim = 0.0
    terms = {
        "push": _check("push", push),
        "order": _check("order", order),
        "r_uv": _check("r_uv", r_uv),
        "r_sim": _check("r_sim", r_sim),
    }
    terms["total"] = _check(
        "total",
        (1 - w.alpha) * push + w.alpha * order + 0.5 * w.beta * r_uv + 0.5 * w.gamma * r_sim,
    )
    return terms


def surrogate_loss(model, labels: TrainingLabels, sim, w: LossWeights) -> float:
    return loss_terms(model, labels, sim, w)["total"]


def _laplacian(W: np.ndarray) -> np.ndarray:
    S = W + W.T
    return np.diag(S.sum(axis=1)) - S


def gradients(model, labels: TrainingLabels, sim, w: LossWeights):
    """Exact gradient of :func:`surrogate_loss` with respect to U and V."""
    U, V = _uv(model)
    m, n = U.shape[1], V.shape[1]
    _, _, dS = _ranking_terms(U, V, labels, w.alpha, True)
    dU = V @ dS.T + (w.beta / m) * U
    dV = U @ dS + (w.beta / n) * V
    if w.gamma:
        dU = dU + (w.gamma / m**2) * U @ _laplacian(_sim_values(sim, m))
    return dU, dV


def sample_epoch_labels(labels: TrainingLabels, seed, repeats: int) -> list[TrainingLabels]:
    """Balanced label sets: all sensitive drugs and an equal number of
    insensitive drugs (or all of them, if fewer) per cell line."""
    if repeats < 1:
        raise DataError("repeats must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for _ in range(repeats):
        neg = []
        for pos, ng in zip(labels.pos, labels.neg):
            k = min(pos.size, ng.size)
            neg.append(np.sort(rng.choice(ng, size=k, replace=False)) if k < ng.size else ng)
        out.append(TrainingLabels(labels.pos, tuple(neg), labels.pairs, labels.n_drugs))
    return out


def _as_training_labels(resp, labels):
    if isinstance(labels, TrainingLabels):
        return labels
    return TrainingLabels.from_labels(resp, labels)


def init_latent(l: int, m: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    U = rng.uniform(-0.01, 0.01, size=(l, m))
    V = rng.uniform(-0.01, 0.01, size=(l, n))
    return U, V


def _safe_loss(fn, *args) -> float:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args)
    except LossError:
        return np.inf


def _descend(loss, grad_u, grad_v, U, V, cfg: OptimizerConfig, rng, sampler):
    """Alternating gradient steps with step halving on loss increase.

    ``grad_u(U, V, batch)`` / ``grad_v`` return block gradients for one
    sampled batch; ``sampler(rng)`` draws the per-epoch batches. A step that
    raises the full-data loss is undone and the learning rate halved.
    """
    eta = cfg.learning_rate
    current = loss(U, V)
    trace = [current]
    accepted = [current]
    rejections = 0
    for _ in range(cfg.max_epochs):
        batches = sampler(rng)
        with np.errstate(over="ignore", invalid="ignore"):
            dU = sum(grad_u(U, V, b) for b in batches) / len(batches)
            U1 = U - eta * dU
            dV = sum(grad_v(U1, V, b) for b in batches) / len(batches)
            V1 = V - eta * dV
        new = _safe_loss(loss, U1, V1) if np.all(np.isfinite(U1)) and np.all(np.isfinite(V1)) else np.inf
        if new <= current:
            U, V, current = U1, V1, new
            rejections = 0
            trace.append(current)
            accepted.append(current)
            if len(accepted) > cfg.patience:
                # mean relative decrease over the last `patience` accepted steps
                ref = accepted[-1 - cfg.patience]
                change = (ref - current) / max(abs(ref), 1e-300) / cfg.patience
                if change < cfg.convergence_tol:
                    break
            continue
        rejections += 1
        eta /= 2.0
        trace.append(current)
        if not np.isfinite(new) and rejections >= 10:
            raise DivergenceError(
                f"loss still non-finite after {rejections} step halvings", trace
            )
        if rejections >= cfg.max_rejections:
            log.info("stopping: %d consecutive rejected steps", rejections)
            break
    return U, V, trace


def train(resp_train: ResponseMatrix, labels, sim, l: int = 10,
          w: LossWeights = LossWeights(), cfg: OptimizerConfig = OptimizerConfig()):
    """Fit cell-line and drug latent vectors by alternating gradient descent.

    Each epoch draws ``cfg.sample_repeats`` balanced label sets, averages their
    gradients, steps U (V fixed) and then V (with the updated U). The step is
    kept only if the full-data loss does not increase; otherwise it is undone
    and the learning rate halved. Returns ``(model, trace)`` where ``trace``
    holds the accepted full-data loss before training and after each epoch.
    """
    if l < 1:
        raise DataError("latent dimension must be >= 1")
    labels = _as_training_labels(resp_train, labels)
    m, n = resp_train.shape
    if labels.n_cell_lines != m or labels.n_drugs != n:
        raise DataError("training labels do not match the response matrix")
    W = _sim_values(sim, m)
    rng = np.random.default_rng(cfg.seed)
    U, V = init_latent(l, m, n, rng)

    lap = (w.gamma / m**2) * _laplacian(W) if w.gamma else None

    def loss(U, V):
        return surrogate_loss((U, V), labels, W, w)

    def grad_u(U, V, batch):
        _, _, dS = _ranking_terms(U, V, batch, w.alpha, True)
        g = V @ dS.T + (w.beta / m) * U
        return g + U @ lap if lap is not None else g


    def grad_v(U, V, batch):
        _, _, dS = _ranking_terms(U, V, batch, w.alpha, True)
        return U @ dS + (w.beta / n) * V

    def sampler(rng):
        return sample_epoch_labels(labels, rng, cfg.sample_repeats)

    U, V, trace = _descend(loss, grad_u, grad_v, U, V, cfg, rng, sampler)
    meta = {
        "method": "push-rank",
        "latent_dim": l,
        **asdict(w),
        **{f"opt_{k}": v for k, v in asdict(cfg).items()},
        "epochs_run": len(trace) - 1,
        "final_loss": trace[-1],
    }
    return LatentModel(U, V, resp_train.cell_line_ids, resp_train.drug_ids, meta), trace


def extrapolate_cell_line(model: LatentModel, sim_to_train, top_k: int = 10) -> np.ndarray:
    """Latent vector for an unseen cell line from its most similar training ones.

    Takes the ``top_k`` training cell lines with the highest similarity (ties
    to the smaller id) and returns the similarity-weighted average of their
    latent vectors. Neighbours with non-positive similarity get no weight.
    """
    s = np.asarray(sim_to_train, dtype=float).ravel()
    if s.size != len(model.cell_line_ids):
        raise DataError("similarity vector does not match the training cell lines")
    if top_k < 1:
        raise DataError("top_k must be >= 1")
    if not np.all(np.isfinite(s)):
        raise DataError("similarities must be finite")
    order = sorted(range(s.size), key=lambda q: (-s[q], model.cell_line_ids[q]))[:top_k]
    weights = np.array([max(s[q], 0.0) for q in order])
    if weights.sum() <= 0:
        raise DataError("all top-k similarities are non-positive")
    # normalise first so a single neighbour is copied exactly (weight 1.0)
    return model.U[:, order] @ (weights / weights.sum())


def order_by_score(ids: Sequence[str], scores, descending: bool = True) -> list[tuple[str, float]]:
    """Sort (id, score) pairs; ties go to the smaller id."""
    sign = -1.0 if descending else 1.0
    pairs = [(i, float(s)) for i, s in zip(ids, scores)]
    return sorted(pairs, key=lambda t: (sign * t[1], t[0]))


def rank_drugs(model: LatentModel, cell_line, drugs: Sequence[str] | None = None):
    """Drugs ordered by descending score for a cell line.

    ``cell_line`` is a training cell-line id or a latent vector (e.g. from
    :func:`extrapolate_cell_line`). Returns a list of ``(drug_id, score)``.
    """
    if isinstance(cell_line, str):
        try:
            u = model.U[:, model.cell_line_ids.index(cell_line)]
        except ValueError:
            raise DataError(f"unknown cell line {cell_line}") from None
    else:
        u = np.asarray(cell_line, dtype=float)
    drugs = list(model.drug_ids if drugs is None else drugs)
    if not drugs:
        raise DataError("cannot rank an empty drug set")
    index = {d: i for i, d in enumerate(model.drug_ids)}
    try:
        cols = [index[d] for d in drugs]
    except KeyError as e:
        raise DataError(f"unknown drug {e.args[0]}") from None
    descending = model.metadata.get("method") != "pointwise-mf"
    return order_by_score(drugs, u @ model.V[:, cols], descending)


def baseline_pointwise_mf(resp_train: ResponseMatrix, l: int = 10, reg: float = 0.1,
                          cfg: OptimizerConfig = OptimizerConfig(learning_rate=0.01,
                                                                 max_epochs=2000,
                                                                 convergence_tol=1e-9)):
    """Point-wise matrix factorization of the observed responses.

    Minimizes ``sum_obs (r - u^T v)^2 + reg (||U||^2 + ||V||^2)`` with the same
    alternating, step-halving descent as :func:`train` (full batch). The
    resulting model ranks drugs by ascending predicted response.
    """
    if l < 1:
        raise DataError("latent dimension must be >= 1")
    m, n = resp_train.shape
    mask = resp_train.observed
    R = np.where(mask, resp_train.values, 0.0)
    rng = np.random.default_rng(cfg.seed)
    U, V = init_latent(l, m, n, rng)

    def residual(U, V):
        return np.where(mask, U.T @ V - R, 0.0)

    def loss(U, V):
        E = residual(U, V)
        return _check("mf", float(np.sum(E * E) + reg * (np.sum(U * U) + np.sum(V * V))))

    def grad_u(U, V, _):
        return 2 * V @ residual(U, V).T + 2 * reg * U

    def grad_v(U, V, _):
        return 2 * U @ residual(U, V) + 2 * reg * V

    U, V, trace = _descend(loss, grad_u, grad_v, U, V, cfg, rng, lambda rng: [None])
    meta = {"method": "pointwise-mf", "latent_dim": l, "reg": reg,
            **{f"opt_{k}": v for k, v in asdict(cfg).items()}, "final_loss": trace[-1]}
    return LatentModel(U, V, resp_train.cell_line_ids, resp_train.drug_ids, meta), trace
