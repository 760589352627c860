"""Planted low-rank response data with matching gene expression."""

from __future__ import annotations

import numpy as np

from .data import DataError, ExpressionMatrix, ResponseMatrix
from .model import LatentModel


def _ids(prefix: str, count: int) -> tuple[str, ...]:
    width = len(str(count - 1))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(count))


def _mask(rng, m, n, missing_frac, tries=100):
    for _ in range(tries):
        observed = rng.random((m, n)) >= missing_frac
        if observed.any(axis=1).all() and observed.any(axis=0).all():
            return observed
    raise DataError(f"could not draw a valid missing mask in {tries} attempts")


def _responses(U, V, rng, noise_sigma, missing_frac):
    m, n = U.shape[1], V.shape[1]
    if not 0 <= missing_frac < 0.5:
        raise DataError("missing_frac must lie in [0, 0.5)")
    cells, drugs = _ids("CL", m), _ids("D", n)
    values = -(U.T @ V) + noise_sigma * rng.standard_normal((m, n))
    observed = _mask(rng, m, n, missing_frac)
    planted = LatentModel(U, V, cells, drugs, {"method": "planted"})
    return ResponseMatrix(cells, drugs, values, observed), planted


def generate_synthetic(m: int = 40, n: int = 60, l_true: int = 5, noise_sigma: float = 0.05,
                       missing_frac: float = 0.2, seed: int = 0, expr_noise: float = 0.5):
    """Planted responses ``r_pi = -u_p . v_i + noise`` with a masked fraction.

    Latent entries are standard normal. Expression is ``A u_p + noise`` over
    ``5 * l_true`` genes for a random ``A``, so expression similarity tracks
    latent similarity. Returns ``(responses, expression, planted_model)``.
    """
    if l_true < 1:
        raise DataError("l_true must be >= 1")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((l_true, m))
    V = rng.standard_normal((l_true, n))
    resp, planted = _responses(U, V, rng, noise_sigma, missing_frac)
    G = 5 * l_true
    A = rng.standard_normal((G, l_true))
    values = (A @ U).T + expr_noise * rng.standard_normal((m, G))
    return resp, ExpressionMatrix(resp.cell_line_ids, _ids("G", G), values), planted


def generate_clustered(m: int = 40, n: int = 60, l_true: int = 5, n_clusters: int = 2,
                       noise_sigma: float = 1.0, missing_frac: float = 0.3, seed: int = 0,
                       expr_noise: float = 0.05, jitter: float = 0.0):
    """Cell lines in ``n_clusters`` groups that share one latent vector per group.

    Expression encodes cluster identity only: the ``5 * l_true`` genes are
    split into one block per cluster, members express their block at level 1
    and every gene carries non-negative uniform noise of scale ``expr_noise``.
    Cosine similarity is then near 1 within a cluster and small across.
    Returns ``(responses, expression, planted_model, cluster_of)``.
    """
    if l_true < 1 or n_clusters < 1:
        raise DataError("l_true and n_clusters must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((l_true, n_clusters))
    cluster = np.arange(m) % n_clusters
    U = centers[:, cluster] + jitter * rng.standard_normal((l_true, m))
    V = rng.standard_normal((l_true, n))
    resp, planted = _responses(U, V, rng, noise_sigma, missing_frac)
    G = max(5 * l_true, n_clusters)
    block = np.arange(G) * n_clusters // G
    values = (block[None, :] == cluster[:, None]).astype(float)
    values += expr_noise * rng.random((m, G))
    expr = ExpressionMatrix(resp.cell_line_ids, _ids("G", G), values)
    return resp, expr, planted, dict(zip(resp.cell_line_ids, (f"K{c}" for c in cluster)))
