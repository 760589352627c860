"""Elastic-net gene selection.

Per drug, responses are regressed on gene expression with an elastic-net
penalty; genes with non-zero weight at the selected penalty are kept and the
per-drug supports are unioned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import DataError, ExpressionMatrix, ResponseMatrix, align_expression

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ElasticNetFit:
    """Result of one elastic-net solve.

    ``weights`` and ``intercept`` are on the original feature scale;
    ``coef`` holds the same solution on standardized features (used for warm
    starts and KKT checks).
    """

    weights: np.ndarray
    intercept: float
    lambda1: float
    lambda2: float
    iterations: int
    converged: bool
    coef: np.ndarray
    objective: float
    kkt_residual: float

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights != 0)


class _Standardized:
    def __init__(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError(f"X {X.shape} and y {y.shape} do not align")
        if X.shape[0] < 2:
            raise DataError("elastic net needs at least two samples")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("elastic net input must be finite")
        self.m = X.shape[0]
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.active = sd > 1e-12 * np.maximum(1.0, np.abs(self.mean))
        self.sd = np.where(self.active, sd, 1.0)
        Xs = (X - self.mean) / self.sd
        Xs[:, ~self.active] = 0.0
        self.y_mean = float(y.mean())
        yc = y - self.y_mean
        self.Xs, self.yc = Xs, yc
        self.gram = Xs.T @ Xs / self.m
        self.corr = Xs.T @ yc / self.m
        self.yy = float(yc @ yc) / self.m

    def lambda_max(self) -> float:
        return float(np.max(np.abs(self.corr))) if self.corr.size else 0.0


def _objective(st: _Standardized, beta, l1, l2) -> float:
    # (1/2m)||yc - Xs b||^2 expanded through the Gram matrix
    quad = 0.5 * (st.yy - 2 * beta @ st.corr + beta @ st.gram @ beta)
    return float(quad + l1 * np.abs(beta).sum() + 0.5 * l2 * beta @ beta)


def _kkt(st: _Standardized, beta, l1, l2) -> float:
    grad = st.gram @ beta - st.corr + l2 * beta
    nz = beta != 0
    r = np.where(nz, np.abs(grad + l1 * np.sign(beta)), np.maximum(np.abs(grad) - l1, 0.0))
    r[~st.active] = 0.0
    return float(r.max()) if r.size else 0.0


@njit(cache=True)
def _kkt_fast(Gb, c, beta, active, l1, l2):
    worst = 0.0
    for j in active:
        g = Gb[j] - c[j] + l2 * beta[j]
        if beta[j] != 0.0:
            r = abs(g + l1 * np.sign(beta[j]))
        else:
            r = max(abs(g) - l1, 0.0)
        worst = max(worst, r)
    return worst


@njit(cache=True)
def _descent(G, c, yy, beta, active, l1, l2, tol, max_iter, record):
    """Cyclic covariance-update coordinate descent until the KKT residual is
    at most ``tol``. Returns (sweeps, converged, objective after each sweep)."""
    Gb = G @ beta
    objs = np.empty(max_iter + 1 if record else 0)
    it = 0
    converged = _kkt_fast(Gb, c, beta, active, l1, l2) <= tol
    while not converged and it < max_iter:
        for j in active:
            z = c[j] - Gb[j] + G[j, j] * beta[j]
            new = np.sign(z) * max(abs(z) - l1, 0.0) / (G[j, j] + l2)
            delta = new - beta[j]
            if delta != 0.0:
                for i in range(Gb.size):
                    Gb[i] += delta * G[j, i]
                beta[j] = new
        if record:
            objs[it] = (0.5 * (yy - 2.0 * beta @ c + beta @ Gb)
                        + l1 * np.abs(beta).sum() + 0.5 * l2 * beta @ beta)
        it += 1
        converged = _kkt_fast(Gb, c, beta, active, l1, l2) <= tol
    return it, converged, objs[:it]


def _solve(st: _Standardized, l1: float, l2: float, tol: float, max_iter: int,
           start=None, trace: list | None = None) -> ElasticNetFit:
    p = st.corr.size
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    beta[~st.active] = 0.0
    if trace is not None:
        trace.append(_objective(st, beta, l1, l2))
    it, converged, objs = _descent(
        np.ascontiguousarray(st.gram), st.corr, st.yy, beta, np.flatnonzero(st.active),
        l1, l2, tol, max_iter, trace is not None,
    )
    if trace is not None:
        trace.extend(float(v) for v in objs)
    converged = bool(converged)
    weights = np.where(st.active, beta / st.sd, 0.0)
    intercept = st.y_mean - float(weights @ st.mean)
    return ElasticNetFit(
        weights=weights, intercept=intercept, lambda1=l1, lambda2=l2, iterations=it,
        converged=converged, coef=beta, objective=_objective(st, beta, l1, l2),
        kkt_residual=_kkt(st, beta, l1, l2),
    )


def elastic_net_fit(X, y, lambda1: float, lambda2: float = 0.0, tol: float = 1e-10,
                    max_iter: int = 10000, start=None, trace: list | None = None) -> ElasticNetFit:
    """Coordinate-descent elastic net.

    Minimizes ``(1/2m)||y - Xw - b||^2 + lambda1*||w||_1 + (lambda2/2)*||w||^2``
    over standardized columns of ``X`` (constant columns get zero weight).
    Stops when the largest KKT violation is at most ``tol``; otherwise returns
    the partial solution with ``converged=False``. Pass a list as ``trace`` to
    collect the objective after every sweep.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise DataError("penalties must be non-negative")
    st = _Standardized(X, y)
    return _solve(st, float(lambda1), float(lambda2), tol, max_iter, start, trace)


@dataclass(frozen=True)
class RegularizationPath:
    lambdas: np.ndarray
    fits: tuple[ElasticNetFit, ...]
    cv_mse: np.ndarray
    cv_se: np.ndarray
    best_index: int

    def __len__(self):
        return len(self.fits)

    def __iter__(self):
        return iter(zip(self.lambdas, self.fits))

    @property
    def best(self) -> ElasticNetFit:
        return self.fits[self.best_index]


def lambda_grid(lambda_max: float, n_lambdas: int, ratio: float = 1e-3) -> np.ndarray:
    if n_lambdas < 2:
        raise DataError("a regularization path needs at least two penalties")
    if lambda_max <= 0:
        return np.zeros(n_lambdas)
    return np.geomspace(lambda_max, lambda_max * ratio, n_lambdas)


def _path(st, lambdas, lambda2_ratio, tol, max_iter):
    fits, start = [], None
    for l1 in lambdas:
        fit = _solve(st, float(l1), float(lambda2_ratio * l1), tol, max_iter, start)
        fits.append(fit)
        start = fit.coef
    return fits


def regularization_path(X, y, n_lambdas: int = 10, lambda2_ratio: float = 0.5,
                        n_folds: int = 3, rule: str = "min", seed: int = 0,
                        tol: float = 1e-8, max_iter: int = 10000) -> RegularizationPath:
    """Warm-started fits along a geometric penalty grid with CV selection.

    The grid runs from the saturation penalty (all weights zero) down to
    1e-3 of it, with ``lambda2 = lambda2_ratio * lambda1``. Held-out MSE comes
    from an internal ``n_folds`` split. ``rule="min"`` picks the lowest CV
    error; ``rule="1se"`` picks the largest penalty within one standard error
    of it.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    st = _Standardized(X, y)
    lambdas = lambda_grid(st.lambda_max(), n_lambdas)
    fits = _path(st, lambdas, lambda2_ratio, tol, max_iter)

    m = y.size
    folds = np.random.default_rng(seed).permutation(m) % n_folds
    errors = np.zeros((n_folds, n_lambdas))
    for f in range(n_folds):
        tr, te = folds != f, folds == f
        if tr.sum() < 2 or te.sum() < 1:
            raise DataError(f"too few samples ({m}) for {n_folds}-fold selection")
        sub = _Standardized(X[tr], y[tr])
        for i, fit in enumerate(_path(sub, lambdas, lambda2_ratio, tol, max_iter)):
            pred = X[te] @ fit.weights + fit.intercept
            errors[f, i] = np.mean((y[te] - pred) ** 2)
    mse = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / np.sqrt(n_folds)
    best = int(np.argmin(mse))
    if rule == "1se":
        ok = np.flatnonzero(mse <= mse[best] + se[best])
        best = int(ok.min())
    elif rule != "min":
        raise DataError(f"unknown selection rule {rule!r}")
    return RegularizationPath(lambdas, tuple(fits), mse, se, best)


@dataclass(frozen=True)
class PathConfig:
    n_lambdas: int = 10
    lambda2_ratio: float = 0.5
    tol: float = 1e-8
    max_iter: int = 10000
    rule: str = "min"
    seed: int = 0


def select_genes(resp: ResponseMatrix, expr: ExpressionMatrix,
                 cfg: PathConfig = PathConfig()) -> tuple[str, ...]:
    """Union over drugs of the genes selected at each drug's chosen penalty.

    Cell lines without a response to a drug are left out of that drug's
    regression. Returned ids follow the expression table's gene order.
    """
    expr = align_expression(resp, expr)
    selected = np.zeros(len(expr.gene_ids), dtype=bool)
    for j, did in enumerate(resp.drug_ids):
        rows = resp.observed[:, j]
        if rows.sum() < 3:
            log.warning("drug %s has fewer than 3 observed cell lines; skipped", did)
            continue
        path = regularization_path(
            expr.values[rows], resp.values[rows, j], cfg.n_lambdas, cfg.lambda2_ratio,
            rule=cfg.rule, seed=cfg.seed, tol=cfg.tol, max_iter=cfg.max_iter,
        )
        selected[path.best.support] = True
    if not selected.any():
        raise DataError(
            "no gene selected for any drug; weaken the regularization "
            "(more penalties on the path or a smaller l2 ratio)"
        )
    return tuple(g for g, s in zip(expr.gene_ids, selected) if s)
