"""Command-line interface.

Every subcommand reads and writes CSV tables (ids in the first row and
column, empty cells for missing values). Failures exit with status 1 and a
message tagged with the failing stage, e.g. ``error [train]: ...``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .data import (
    DataError,
    load_expression,
    load_labels,
    load_response,
    write_expression,
    write_labels,
    write_response,
    write_table,
    _read_table,
)
from .genes import PathConfig, select_genes
from .labeling import label_new_cell_lines, label_train_test
from .metrics import mean_defined
from .model import (
    LatentModel,
    LossWeights,
    OptimizerConfig,
    extrapolate_cell_line,
    order_by_score,
    train,
)
from .similarity import (
    cosine_similarity,
    load_similarity,
    rbf_similarity,
    spearman_profile_similarity,
    write_similarity,
)
from .splits import holdout_split, kfold_split, write_fold_assignment
from .synthetic import generate_clustered, generate_synthetic

log = logging.getLogger("pushrank")


class CliError(Exception):
    def __init__(self, stage: str, msg: str):
        super().__init__(msg)
        self.stage = stage


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ids(text: str | None) -> list[str] | None:
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


# -- subcommands -------------------------------------------------------------


def cmd_simulate(a):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.clusters:
        resp, expr, planted, cluster_of = generate_clustered(
            a.m, a.n, a.latent_dim, a.clusters, a.noise, a.missing, a.seed)
        with open(out / "clusters.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_line", "cluster"])
            w.writerows(sorted(cluster_of.items()))
    else:
        resp, expr, planted = generate_synthetic(
            a.m, a.n, a.latent_dim, a.noise, a.missing, a.seed)
    write_response(resp, out / "response.csv")
    write_expression(expr, out / "expression.csv")
    planted.save(out / "planted")


def cmd_label(a):
    resp = load_response(a.response, require_coverage=False)
    if a.train:
        labels = label_train_test(load_response(a.train), resp, a.theta)[1]
    else:
        labels = label_new_cell_lines(resp, a.theta)
    write_labels(labels, a.out)


def cmd_split(a):
    resp = load_response(a.response)
    if (a.kfold is None) == (a.holdout is None):
        raise CliError("split", "give exactly one of --kfold or --holdout")
    if a.kfold is not None:
        split = kfold_split(resp, a.kfold, a.seed)
        for w in split.warnings:
            log.warning(w)
        write_fold_assignment(split, resp, a.out)
        return
    if a.sim is None:
        raise CliError("split", "--holdout needs --sim")
    sim = load_similarity(a.sim).subset(resp.cell_line_ids)
    from .splits import default_similarity_threshold

    thr = default_similarity_threshold(sim.values, a.threshold_pct)
    ho = holdout_split(resp, sim, a.holdout, thr, a.seed)
    role = {c: "train" for c in ho.train_cell_lines}
    role.update({c: "protected" for c in ho.protected})
    role.update({c: "test" for c in ho.test_cell_lines})
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_line", "role"])
        w.writerows((c, role[c]) for c in resp.cell_line_ids)


def cmd_select_genes(a):
    resp = load_response(a.response)
    expr = load_expression(a.expression)
    genes = select_genes(resp, expr, PathConfig(a.n_lambdas, a.l2_ratio, rule=a.rule, seed=a.seed))
    Path(a.out).write_text("".join(g + "\n" for g in genes))


def cmd_similarity(a):
    if a.kind == "spearman-profile":
        if a.response is None:
            raise CliError("similarity", "spearman-profile needs --response")
        sim = spearman_profile_similarity(load_response(a.response))
    else:
        if a.expression is None:
            raise CliError("similarity", f"{a.kind} needs --expression")
        expr = load_expression(a.expression)
        if a.genes:
            expr = expr.subset_genes(Path(a.genes).read_text().split())
        if a.kind == "cosine":
            sim = cosine_similarity(expr.values, expr.cell_line_ids)
        else:
            sim = rbf_similarity(expr.values, a.rbf_gamma, expr.cell_line_ids)
    write_similarity(sim, a.out)


def cmd_train(a):
    resp = load_response(a.response)
    if a.labels:
        labels = load_labels(a.labels, a.theta)
        if labels.cell_line_ids != resp.cell_line_ids or labels.drug_ids != resp.drug_ids:
            raise CliError("train", "labels table does not match the response table")
    else:
        labels = label_train_test(resp, resp, a.theta)[0]
    sim = None
    if a.gamma > 0:
        if a.sim is None:
            raise CliError("train", "gamma > 0 needs --sim")
        sim = load_similarity(a.sim).subset(resp.cell_line_ids)
    w = LossWeights(a.alpha, a.beta, a.gamma)
    cfg = OptimizerConfig(a.lr, a.epochs, a.tol, a.sample_repeats, a.seed)
    model, trace = train(resp, labels, sim, a.latent_dim, w, cfg)
    model.save(a.out)
    if a.trace:
        Path(a.trace).write_text("epoch,loss\n" + "".join(
            f"{i},{v!r}\n" for i, v in enumerate(trace)))


def cmd_rank(a):
    model = LatentModel.load(a.model)
    rows, vectors = [], []
    if a.new_cell_lines:
        if a.sim is None:
            raise CliError("rank", "--new-cell-lines needs --sim")
        sim = load_similarity(a.sim)
        index = {c: i for i, c in enumerate(sim.ids)}
        missing = [c for c in model.cell_line_ids if c not in index]
        if missing:
            raise CliError("rank", f"similarity lacks training cell line {missing[0]}")
        cols = [index[c] for c in model.cell_line_ids]
        for cid in _ids(a.new_cell_lines):
            if cid not in index:
                raise CliError("rank", f"similarity lacks new cell line {cid}")
            rows.append(cid)
            vectors.append(extrapolate_cell_line(model, sim.values[index[cid], cols], a.top_k))
    else:
        wanted = _ids(a.cell_lines) or list(model.cell_line_ids)
        for cid in wanted:
            if cid not in model.cell_line_ids:
                raise CliError("rank", f"unknown cell line {cid}")
            rows.append(cid)
            vectors.append(model.U[:, model.cell_line_ids.index(cid)])
    scores = np.array(vectors) @ model.V
    write_table(a.out, rows, model.drug_ids, scores, corner="cell_line")
    if a.ranking:
        with open(a.ranking, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_line", "rank", "drug", "score"])
            for cid, s in zip(rows, scores):
                for r, (d, v) in enumerate(order_by_score(model.drug_ids, s), start=1):
                    w.writerow([cid, r, d, repr(v)])


METRICS = ("ap", "ah", "ci", "sci", "at", "nt")


def cmd_evaluate(a):
    pred_rows, pred_cols, pred, pred_ok = _read_table(a.pred, "prediction")
    truth = load_response(a.truth, require_coverage=False)
    labels = load_labels(a.labels)
    known = load_response(a.known, require_coverage=False) if a.known else None
    wanted = _ids(a.metrics)
    bad = [m for m in wanted if m not in METRICS]
    if bad:
        raise CliError("evaluate", f"unknown metric {bad[0]}; choose from {','.join(METRICS)}")
    if ("at" in wanted or "nt" in wanted) and known is None:
        raise CliError("evaluate", "AT@k and NT@k need --known (the training responses)")
    pcol = {d: j for j, d in enumerate(pred_cols)}
    lab_row = {c: i for i, c in enumerate(labels.cell_line_ids)}
    lab_col = {d: j for j, d in enumerate(labels.drug_ids)}
    results = []
    for p, cid in enumerate(truth.cell_line_ids):
        if cid not in pred_rows:
            continue
        prow = pred_rows.index(cid)
        drugs = [d for j, d in enumerate(truth.drug_ids) if truth.observed[p, j]]
        missing = [d for d in drugs if d not in pcol or not pred_ok[prow, pcol[d]]]
        if missing:
            raise CliError("evaluate", f"no prediction for {cid}/{missing[0]}")
        if cid not in lab_row:
            raise CliError("evaluate", f"no labels for cell line {cid}")
        sens = [labels.sensitive[lab_row[cid], lab_col[d]] for d in drugs]
        tvals = [truth.values[p, truth.drug_ids.index(d)] for d in drugs]
        scores = [pred[prow, pcol[d]] for d in drugs]
        extra = {}
        if known is not None and cid in known.cell_line_ids:
            q = known.cell_line_ids.index(cid)
            kd = [d for j, d in enumerate(known.drug_ids) if known.observed[q, j] and d not in drugs]
            extra = dict(known_ids=kd, known_scores=[pred[prow, pcol[d]] for d in kd],
                         known_truth=[known.values[q, known.drug_ids.index(d)] for d in kd])
        values = ex.evaluate_cell_line(drugs, scores, tvals, sens, a.k, **extra)
        results.append((cid, values))
    names = [n for n in _metric_columns(a.k, known is not None) if n.split("@")[0] in wanted]
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_line"] + names)
        for cid, v in results:
            w.writerow([cid] + [ex._fmt(v.get(n, math.nan)) for n in names])
        means = [mean_defined(v.get(n, math.nan) for _, v in results) for n in names]
        w.writerow(["mean"] + [ex._fmt(mv) for mv, _ in means])
        w.writerow(["excluded"] + [str(e) for _, e in means])


def _metric_columns(ks, transductive):
    return ex.metric_names("transductive" if transductive else "kfold", ks)


def _config(a) -> ex.ExperimentConfig:
    try:
        base = ex.ExperimentConfig.load(a.config).to_dict() if a.config else {}
    except DataError as e:
        raise CliError("config", str(e)) from None
    overrides = {
        "response": a.response, "expression": a.expression, "output": a.output,
        "protocol": a.protocol, "theta": a.theta, "folds": a.folds, "k": a.k,
        "learning_rate": a.lr, "epochs": a.epochs, "tol": a.tol,
        "sample_repeats": a.sample_repeats, "seed": a.seed, "n_new": a.n_new,
        "threshold_pct": a.threshold_pct, "top_k": a.top_k, "similarity": a.similarity,
        "select_genes": a.select_genes,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    grid = dict(base.get("grid", {}))
    for name, value in (("latent_dim", a.latent_dim), ("alpha", a.alpha),
                        ("beta", a.beta), ("gamma", a.gamma)):
        if value is not None:
            grid[name] = list(value)
    if grid:
        base["grid"] = grid
    try:
        return ex.ExperimentConfig.from_dict(base)
    except DataError as e:
        raise CliError("config", str(e)) from None


def cmd_run(a):
    cfg = _config(a)
    if a.save_config:
        cfg.save(a.save_config)
    ex.run_protocol(cfg)


def cmd_grid(a):
    cfg = _config(a)
    if a.save_config:
        cfg.save(a.save_config)
    result = ex.grid_search(cfg)
    for name, row in result.best.items():
        params = ", ".join(f"{p}={row[p]}" for p in ex.PARAMS)
        print(f"{name}: {ex._fmt(row[name])} at {params}")


# -- parser ------------------------------------------------------------------


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    p.add_argument("--response")
    p.add_argument("--expression")
    p.add_argument("--output", help="report directory")
    p.add_argument("--protocol", choices=ex.PROTOCOLS)
    p.add_argument("--theta", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--k", type=_ints, help="comma-separated cutoffs, e.g. 5,10")
    p.add_argument("--latent-dim", type=_ints)
    p.add_argument("--alpha", type=_floats)
    p.add_argument("--beta", type=_floats)
    p.add_argument("--gamma", type=_floats)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--sample-repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-new", type=int)
    p.add_argument("--threshold-pct", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--similarity", choices=("cosine", "rbf"))
    p.add_argument("--select-genes", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--save-config", help="write the effective config as JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pushrank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a planted synthetic dataset")
    p.add_argument("--m", type=int, default=40)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--latent-dim", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--missing", type=float, default=0.2)
    p.add_argument("--clusters", type=int, default=0,
                   help="cell lines share one latent vector per cluster")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("label", help="binary sensitivity labels from percentile thresholds")
    p.add_argument("--response", required=True)
    p.add_argument("--theta", type=float, default=10.0)
    p.add_argument("--train", help="derive thresholds from this training table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("split", help="k-fold or new-cell-line hold-out split")
    p.add_argument("--response", required=True)
    p.add_argument("--kfold", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--sim")
    p.add_argument("--threshold-pct", type=float, default=90.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("select-genes", help="elastic-net gene selection")
    p.add_argument("--response", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--n-lambdas", type=int, default=10)
    p.add_argument("--l2-ratio", type=float, default=0.5)
    p.add_argument("--rule", choices=("min", "1se"), default="min")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="gene list, one id per line")
    p.set_defaults(func=cmd_select_genes)

    p = sub.add_parser("similarity", help="cell-line similarity matrix")
    p.add_argument("--kind", choices=("cosine", "rbf", "spearman-profile"), default="cosine")
    p.add_argument("--expression")
    p.add_argument("--genes", help="restrict to the genes listed in this file")
    p.add_argument("--rbf-gamma", type=float, help="default: median heuristic")
    p.add_argument("--response")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("train", help="fit latent vectors")
    p.add_argument("--response", required=True)
    p.add_argument("--labels", help="labels table; default: derive with --theta")
    p.add_argument("--theta", type=float, default=10.0)
    p.add_argument("--sim")
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--sample-repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model prefix")
    p.add_argument("--trace", help="write the loss trace CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="score and rank drugs")
    p.add_argument("--model", required=True, help="model prefix")
    p.add_argument("--cell-lines", help="comma-separated training cell lines (default all)")
    p.add_argument("--new-cell-lines", help="comma-separated unseen cell lines")
    p.add_argument("--sim", help="similarity covering new and training cell lines")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True, help="score matrix CSV")
    p.add_argument("--ranking", help="also write a long-format ranking CSV")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("evaluate", help="ranking metrics per cell line")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--known", help="training responses (needed for at, nt)")
    p.add_argument("--k", type=_ints, default=(5, 10))
    p.add_argument("--metrics", default="ap,ah,ci,sci")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline for every grid point")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="full pipeline plus best point per metric")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as e:
        print(f"error [{e.stage}]: {e}", file=sys.stderr)
        return 1
    except ex.StageError as e:
        print(f"error {e}", file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError, FloatingPointError, RuntimeError, json.JSONDecodeError) as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
