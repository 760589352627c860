"""End-to-end experiment protocols, grid search and report files.

A run labels the responses, splits them, optionally selects genes and builds
a cell-line similarity, trains one model per grid point and split, ranks the
evaluation drugs and writes three reports into the output directory:

``cell_lines.csv``
    one row per (grid point, fold, cell line) with every metric value;
``folds.csv``
    per (grid point, fold) means over cell lines with defined values;
``summary.csv`` / ``summary.txt``
    per grid point means over all (fold, cell line) cases, with the number
    of excluded cases per metric.

Every row carries the full parameter tuple and the seed. Files contain no
timestamps or paths, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    DataError,
    ExpressionMatrix,
    ResponseMatrix,
    align_expression,
    load_expression,
    load_response,
    restrict,
)
from .genes import PathConfig, select_genes
from .labeling import label_new_cell_lines, label_train_test
from .metrics import ah_at_k, ap_at_k, at_k, concordance_index, mean_defined, nt_k, sensitive_ci
from .model import (
    LossWeights,
    OptimizerConfig,
    TrainingLabels,
    extrapolate_cell_line,
    train,
)
from .similarity import SimilarityMatrix, cosine_similarity, rbf_similarity
from .splits import holdout_split, kfold_split

log = logging.getLogger(__name__)

PROTOCOLS = ("kfold", "transductive", "holdout")
PARAMS = ("latent_dim", "alpha", "beta", "gamma")


class StageError(RuntimeError):
    """A pipeline stage failed; names the stage and the grid point."""

    def __init__(self, stage: str, detail: str, point: tuple | None = None):
        where = f" at grid point {_point_label(point)}" if point is not None else ""
        super().__init__(f"[{stage}]{where}: {detail}")
        self.stage = stage
        self.point = point


def _point_label(point) -> str:
    return ", ".join(f"{k}={v}" for k, v in zip(PARAMS, point))


@dataclass(frozen=True)
class Grid:
    latent_dim: tuple[int, ...] = (5, 10, 15, 30, 50)
    alpha: tuple[float, ...] = (0.0, 0.1, 0.5, 0.9, 1.0)
    beta: tuple[float, ...] = (0.1, 1.0)
    gamma: tuple[float, ...] = (0.0, 1.0, 100.0)

    def __post_init__(self):
        for name in PARAMS:
            values = tuple(getattr(self, name))
            if not values:
                raise DataError(f"grid list {name} is empty")
            object.__setattr__(self, name, values)

    def points(self) -> list[tuple]:
        """All parameter tuples ``(latent_dim, alpha, beta, gamma)`` in sorted order."""
        return sorted(set(itertools.product(self.latent_dim, self.alpha, self.beta, self.gamma)))


@dataclass(frozen=True)
class ExperimentConfig:
    response: str | None = None
    expression: str | None = None
    output: str = "results"
    protocol: str = "kfold"
    theta: float = 10.0
    folds: int = 5
    k: tuple[int, ...] = (5, 10)
    grid: Grid = field(default_factory=Grid)
    learning_rate: float = 1.0
    epochs: int = 300
    tol: float = 1e-5
    sample_repeats: int = 3
    seed: int = 0
    n_new: int = 4
    threshold_pct: float = 90.0
    top_k: int = 10
    similarity: str = "cosine"
    select_genes: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise DataError(f"protocol must be one of {', '.join(PROTOCOLS)}, got {self.protocol!r}")
        if self.similarity not in ("cosine", "rbf"):
            raise DataError(f"similarity must be cosine or rbf, got {self.similarity!r}")
        object.__setattr__(self, "k", tuple(int(k) for k in self.k))
        if not self.k or min(self.k) < 1:
            raise DataError("k-list must hold positive integers")
        if isinstance(self.grid, dict):
            object.__setattr__(self, "grid", Grid(**self.grid))
        if self.response is not None and self.expression is None:
            _require_expression(self)
        if self.folds < 2:
            raise DataError("folds must be >= 2")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.epochs, self.tol,
                               self.sample_repeats, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k"] = list(self.k)
        d["grid"] = {name: list(getattr(self.grid, name)) for name in PARAMS}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "grid" in d:
            grid = d["grid"]
            bad = sorted(set(grid) - set(PARAMS))
            if bad:
                raise DataError(f"unknown grid keys: {', '.join(bad)}")
            d["grid"] = Grid(**{k: tuple(v) for k, v in grid.items()})
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _require_expression(cfg: "ExperimentConfig") -> None:
    if cfg.protocol == "holdout":
        raise DataError("the holdout protocol requires an expression matrix")
    if any(g > 0 for g in cfg.grid.gamma):
        raise DataError("gamma > 0 requires an expression matrix for the similarity")


def metric_names(protocol: str, ks: Sequence[int]) -> list[str]:
    names = [f"ap@{k}" for k in ks] + [f"ah@{k}" for k in ks] + ["ci", "sci"]
    if protocol == "transductive":
        names += [f"at@{k}" for k in ks] + [f"nt@{k}" for k in ks]
    return names


def _ranked(ids: Sequence[str], scores: np.ndarray) -> list[int]:
    """Positions of ``ids`` by descending score, ties to the smaller id."""
    return sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))


def evaluate_cell_line(drug_ids, scores, truth, sensitive, ks, known_ids=None,
                       known_scores=None, known_truth=None) -> dict[str, float]:
    """All metrics for one cell line.

    ``drug_ids``/``scores``/``truth``/``sensitive`` describe the evaluation
    drugs. With ``known_*`` given, AT@k and NT@k are computed over the
    evaluation and known drugs ranked together, the evaluation drugs being
    the new ones. Cell lines without a sensitive evaluation drug get nan for
    AP, AH and sCI.
    """
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=float)
    sensitive = np.asarray(sensitive, dtype=bool)
    order = _ranked(drug_ids, scores)
    ranked = [drug_ids[i] for i in order]
    hits = sensitive[order]
    out = {}
    has_pos = bool(sensitive.any())
    for k in ks:
        out[f"ap@{k}"] = ap_at_k(ranked, hits, k) if has_pos else math.nan
    for k in ks:
        out[f"ah@{k}"] = ah_at_k(ranked, hits, k) if has_pos else math.nan
    out["ci"] = concordance_index(truth, scores) if len(drug_ids) >= 2 else math.nan
    out["sci"] = sensitive_ci(truth, scores, sensitive)
    if known_ids is not None:
        all_ids = list(drug_ids) + list(known_ids)
        all_scores = np.concatenate([scores, np.asarray(known_scores, dtype=float)])
        all_truth = np.concatenate([truth, np.asarray(known_truth, dtype=float)])
        ranked_all = [all_ids[i] for i in _ranked(all_ids, all_scores)]
        for k in ks:
            out[f"at@{k}"] = at_k(ranked_all, all_truth, k, all_ids) if len(all_ids) >= k else math.nan
        for k in ks:
            out[f"nt@{k}"] = (nt_k(ranked_all, all_truth, drug_ids, k, all_ids)
                              if len(all_ids) >= k else math.nan)
    return out


@dataclass
class _Split:
    """One train/evaluate unit shared by every grid point."""

    name: str
    train: ResponseMatrix
    labels: TrainingLabels
    sim: SimilarityMatrix | None
    # evaluation: cell line id -> (drug ids, truth, sensitive, known ids, known truth)
    cases: dict
    # holdout only: cell line id -> similarity to the training cell lines
    sim_to_train: dict | None = None


def _similarity(expr: ExpressionMatrix, kind: str) -> SimilarityMatrix:
    if kind == "cosine":
        return cosine_similarity(expr.values, expr.cell_line_ids)
    return rbf_similarity(expr.values, ids=expr.cell_line_ids)


def _genes(resp, expr, cfg: ExperimentConfig) -> ExpressionMatrix:
    if not cfg.select_genes:
        return expr
    return expr.subset_genes(select_genes(resp, expr, PathConfig(seed=cfg.seed)))


def _kfold_splits(resp, expr, cfg: ExperimentConfig):
    split = kfold_split(resp, cfg.folds, cfg.seed)
    for w in split.warnings:
        log.warning(w)
    need_sim = expr is not None and any(g > 0 for g in cfg.grid.gamma)
    for f in range(cfg.folds):
        tr, te = _stage("split", lambda: split.fold(resp, f))
        ltr, lte = _stage("label", lambda: label_train_test(tr, te, cfg.theta))
        sim = None
        if need_sim:
            sel = _stage("select-genes", lambda: _genes(tr, expr, cfg))
            sim = _stage("similarity", lambda: _similarity(sel, cfg.similarity))
        cases = {}
        for p, cid in enumerate(resp.cell_line_ids):
            test = np.flatnonzero(te.observed[p])
            if test.size == 0:
                continue
            known = np.flatnonzero(tr.observed[p])
            cases[cid] = (
                test, te.values[p, test], lte.sensitive[p, test],
                known, tr.values[p, known],
            )
        yield _Split(f"fold{f}", tr, TrainingLabels.from_labels(tr, ltr), sim, cases)


def _holdout_splits(resp, expr, cfg: ExperimentConfig):
    full_sim = _stage("similarity", lambda: _similarity(expr, cfg.similarity))
    ho = _stage("split", lambda: holdout_split(
        resp, full_sim, cfg.n_new,
        _threshold(full_sim, cfg.threshold_pct), cfg.seed))
    train_resp = _stage("split", lambda: restrict(resp, ho.train_cell_lines, resp.drug_ids))
    test_resp = _stage("split", lambda: restrict_rows(resp, ho.test_cell_lines))
    ltr, _ = _stage("label", lambda: label_train_test(train_resp, train_resp, cfg.theta))
    lte = _stage("label", lambda: label_new_cell_lines(test_resp, cfg.theta))
    sel = _stage("select-genes", lambda: _genes(train_resp, expr.subset_cell_lines(ho.train_cell_lines), cfg))
    sim_all = _stage("similarity", lambda: _similarity(
        expr.subset_genes(sel.gene_ids), cfg.similarity))
    train_sim = sim_all.subset(ho.train_cell_lines)
    index = {c: i for i, c in enumerate(sim_all.ids)}
    train_rows = [index[c] for c in ho.train_cell_lines]
    cases, to_train = {}, {}
    for p, cid in enumerate(test_resp.cell_line_ids):
        obs = np.flatnonzero(test_resp.observed[p])
        cases[cid] = (obs, test_resp.values[p, obs], lte.sensitive[p, obs], None, None)
        to_train[cid] = sim_all.values[index[cid], train_rows]
    yield _Split("holdout", train_resp, TrainingLabels.from_labels(train_resp, ltr),
                 train_sim, cases, to_train)


def restrict_rows(resp: ResponseMatrix, cell_lines: Sequence[str]) -> ResponseMatrix:
    """Row subset without the coverage check (test rows may miss drugs)."""
    rows = [resp.cell_line_index(c) for c in cell_lines]
    return ResponseMatrix(tuple(cell_lines), resp.drug_ids, resp.values[rows],
                          resp.observed[rows])


def _threshold(sim: SimilarityMatrix, pct: float) -> float:
    from .splits import default_similarity_threshold

    return default_similarity_threshold(sim.values, pct)


def _stage(name: str, fn, point=None):
    try:
        return fn()
    except StageError:
        raise
    except (DataError, ValueError, FloatingPointError, RuntimeError) as e:
        raise StageError(name, str(e), point) from e


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class Report:
    """Collected results; written with :meth:`write`."""

    protocol: str
    seed: int
    metrics: list[str]
    cell_rows: list[dict] = field(default_factory=list)

    def add(self, point, split_name, cell_line, values):
        row = dict(zip(PARAMS, point))
        row.update(seed=self.seed, split=split_name, cell_line=cell_line)
        row.update(values)
        self.cell_rows.append(row)

    def _group(self, keys):
        groups: dict = {}
        for row in self.cell_rows:
            groups.setdefault(tuple(row[k] for k in keys), []).append(row)
        return groups

    def _aggregate(self, rows) -> dict:
        out = {}
        for name in self.metrics:
            mean, excluded = mean_defined(r[name] for r in rows)
            out[name] = mean
            out[f"excluded_{name}"] = excluded
        return out

    def fold_rows(self) -> list[dict]:
        out = []
        for key, rows in self._group(PARAMS + ("split",)).items():
            row = dict(zip(PARAMS + ("split",), key))
            row["seed"] = self.seed
            row.update(self._aggregate(rows))
            out.append(row)
        return out

    def summary_rows(self) -> list[dict]:
        out = []
        for key, rows in self._group(PARAMS).items():
            row = dict(zip(PARAMS, key))
            row["seed"] = self.seed
            row["cases"] = len(rows)
            row.update(self._aggregate(rows))
            out.append(row)
        return out

    def _columns(self, head):
        return head + self.metrics + [f"excluded_{m}" for m in self.metrics]

    def write(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        base = list(PARAMS) + ["seed"]
        _write_csv(outdir / "cell_lines.csv", base + ["split", "cell_line"] + self.metrics,
                   self.cell_rows)
        _write_csv(outdir / "folds.csv", self._columns(base + ["split"]), self.fold_rows())
        summary = self.summary_rows()
        _write_csv(outdir / "summary.csv", self._columns(base + ["cases"]), summary)
        (outdir / "summary.txt").write_text(
            f"protocol: {self.protocol}\nseed: {self.seed}\n\n"
            + aligned_table(base + self.metrics, summary)
        )


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def aligned_table(columns: Sequence[str], rows: Sequence[dict]) -> str:
    """Fixed-width text table; metric values are shown to 4 decimals."""
    def cell(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.4f}" if abs(v) < 1e4 else f"{v:.4g}"
        return str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def _inputs(cfg: ExperimentConfig, resp, expr):
    if resp is None:
        if cfg.response is None:
            raise StageError("load", "no response matrix given")
        resp = _stage("load", lambda: load_response(cfg.response))
    if expr is None and cfg.expression is not None:
        expr = _stage("load", lambda: load_expression(cfg.expression))
    if expr is not None:
        expr = _stage("load", lambda: align_expression(resp, expr))
    if expr is None:
        _stage("load", lambda: _require_expression(cfg))
    return resp, expr


def _evaluate_split(sp: _Split, model, cfg: ExperimentConfig, point, report: Report):
    S = model.scores()
    drug_ids = model.drug_ids
    row_of = {c: i for i, c in enumerate(model.cell_line_ids)}
    for cid in sorted(sp.cases):
        idx, truth, sens, known, known_truth = sp.cases[cid]
        if sp.sim_to_train is not None:
            u = extrapolate_cell_line(model, sp.sim_to_train[cid], cfg.top_k)
            scores_all = u @ model.V
        else:
            scores_all = S[row_of[cid]]
        ids = [drug_ids[i] for i in idx]
        extra = {}
        if cfg.protocol == "transductive":
            extra = dict(known_ids=[drug_ids[i] for i in known],
                         known_scores=scores_all[known], known_truth=known_truth)
        report.add(point, sp.name, cid,
                   evaluate_cell_line(ids, scores_all[idx], truth, sens, cfg.k, **extra))


def run_protocol(cfg: ExperimentConfig, resp: ResponseMatrix | None = None,
                 expr: ExpressionMatrix | None = None, write: bool = True) -> Report:
    """Run every grid point on every split of the configured protocol.

    Inputs are read from ``cfg.response``/``cfg.expression`` unless passed
    directly. Reports go to ``cfg.output``; if a stage fails, the results
    collected so far are written before the :class:`StageError` propagates.
    """
    resp, expr = _inputs(cfg, resp, expr)
    report = Report(cfg.protocol, cfg.seed, metric_names(cfg.protocol, cfg.k))
    splits = _holdout_splits if cfg.protocol == "holdout" else _kfold_splits
    try:
        for sp in splits(resp, expr, cfg):
            for point in cfg.grid.points():
                l, alpha, beta, gamma = point
                w = _stage("train", lambda: LossWeights(alpha, beta, gamma), point)
                sim = sp.sim if gamma > 0 else None
                model, _ = _stage("train", lambda: train(sp.train, sp.labels, sim, l, w,
                                                         cfg.optimizer()), point)
                _stage("evaluate", lambda: _evaluate_split(sp, model, cfg, point, report), point)
                log.info("%s %s done", sp.name, _point_label(point))
    finally:
        if write:
            report.write(cfg.output)
    return report


@dataclass(frozen=True)
class GridResult:
    report: Report
    best: dict  # metric -> summary row


def _better(a: float, b: float) -> bool:
    return b is None or (not math.isnan(a) and (math.isnan(b) or a > b))


def best_points(summary: Sequence[dict], metrics: Sequence[str]) -> dict:
    """Per metric, the summary row with the largest defined value.

    Rows are visited in ascending parameter-tuple order and only a strictly
    larger value replaces the incumbent, so ties go to the smallest tuple.
    """
    rows = sorted(summary, key=lambda r: tuple(r[p] for p in PARAMS))
    best = {}
    for name in metrics:
        top = None
        for r in rows:
            if top is None or _better(r[name], top[name]):
                top = r
        best[name] = top
    return best


def grid_search(cfg: ExperimentConfig, resp=None, expr=None, write: bool = True) -> GridResult:
    """Run the grid and report the best point for every metric (``best.csv``)."""
    report = run_protocol(cfg, resp, expr, write)
    best = best_points(report.summary_rows(), report.metrics)
    if write:
        rows = []
        for name, r in best.items():
            row = {"metric": name, "value": r[name], "seed": cfg.seed}
            row.update({p: r[p] for p in PARAMS})
            rows.append(row)
        _write_csv(Path(cfg.output) / "best.csv", ["metric", "value"] + list(PARAMS) + ["seed"], rows)
    return GridResult(report, best)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with the non-None ``changes`` applied (grid keys included)."""
    grid_changes = {k: tuple(v) for k, v in changes.items() if k in PARAMS and v is not None}
    other = {k: v for k, v in changes.items() if k not in PARAMS and v is not None}
    if grid_changes:
        other["grid"] = replace(cfg.grid, **grid_changes)
    return replace(cfg, **other)
