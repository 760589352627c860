import csv
import json

import pytest

from pushrank.cli import main


def _run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert _run("simulate", "--m", 12, "--n", 16, "--seed", 1, "--out", d) == 0
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_outputs(data):
    for f in ("response.csv", "expression.csv", "planted_U.csv", "planted_V.csv"):
        assert (data / f).exists()
    assert len(_rows(data / "response.csv")) == 13


def test_stepwise_pipeline(tmp_path, data):
    resp, expr = data / "response.csv", data / "expression.csv"
    assert _run("label", "--response", resp, "--theta", 20, "--out", tmp_path / "lab.csv") == 0
    assert _run("split", "--response", resp, "--kfold", 3, "--out", tmp_path / "folds.csv") == 0
    assert _run("select-genes", "--response", resp, "--expression", expr,
                "--out", tmp_path / "genes.txt") == 0
    genes = (tmp_path / "genes.txt").read_text().split()
    assert genes
    assert _run("similarity", "--expression", expr, "--genes", tmp_path / "genes.txt",
                "--out", tmp_path / "sim.csv") == 0
    assert _run("split", "--response", resp, "--holdout", 2, "--sim", tmp_path / "sim.csv",
                "--out", tmp_path / "holdout.csv") == 0
    roles = [r[1] for r in _rows(tmp_path / "holdout.csv")[1:]]
    assert roles.count("test") == 2 and roles.count("protected") == 2

    assert _run("train", "--response", resp, "--labels", tmp_path / "lab.csv", "--theta", 20,
                "--sim", tmp_path / "sim.csv", "--latent-dim", 3, "--epochs", 30,
                "--out", tmp_path / "m", "--trace", tmp_path / "trace.csv") == 0
    losses = [float(r[1]) for r in _rows(tmp_path / "trace.csv")[1:]]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    meta = json.loads((tmp_path / "m_meta.json").read_text())
    assert meta["latent_dim"] == 3 and meta["gamma"] == 100.0

    assert _run("rank", "--model", tmp_path / "m", "--out", tmp_path / "scores.csv",
                "--ranking", tmp_path / "ranking.csv") == 0
    ranking = _rows(tmp_path / "ranking.csv")
    assert len(ranking) == 1 + 12 * 16
    assert _run("rank", "--model", tmp_path / "m", "--new-cell-lines", "CL00",
                "--sim", tmp_path / "sim.csv", "--top-k", 1, "--out", tmp_path / "new.csv") == 0

    assert _run("evaluate", "--pred", tmp_path / "scores.csv", "--truth", resp,
                "--labels", tmp_path / "lab.csv", "--k", "3", "--out", tmp_path / "ev.csv") == 0
    ev = _rows(tmp_path / "ev.csv")
    assert ev[0] == ["cell_line", "ap@3", "ah@3", "ci", "sci"]
    assert ev[-2][0] == "mean" and ev[-1][0] == "excluded"


def test_run_and_grid_with_config(tmp_path, data):
    cfg = {"response": str(data / "response.csv"), "expression": str(data / "expression.csv"),
           "k": [3], "epochs": 15, "theta": 20.0, "select_genes": False,
           "grid": {"latent_dim": [2], "alpha": [0.0], "beta": [0.1], "gamma": [0.0]}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    for out in ("a", "b"):
        assert _run("run", "--config", path, "--output", tmp_path / out,
                    "--save-config", tmp_path / f"{out}.json") == 0
    assert (tmp_path / "a" / "summary.csv").read_bytes() == \
        (tmp_path / "b" / "summary.csv").read_bytes()
    saved = json.loads((tmp_path / "a.json").read_text())
    assert saved["output"] == str(tmp_path / "a") and saved["epochs"] == 15

    assert _run("grid", "--config", path, "--alpha", "0,1", "--output", tmp_path / "g") == 0
    assert len(_rows(tmp_path / "g" / "summary.csv")) == 3
    assert len(_rows(tmp_path / "g" / "best.csv")) == 1 + 4


def test_errors_are_stage_tagged(tmp_path, data, capsys):
    assert _run("train", "--response", data / "response.csv", "--out", tmp_path / "m") == 1
    assert "error [train]: gamma > 0 needs --sim" in capsys.readouterr().err
    assert _run("run", "--response", data / "response.csv", "--protocol", "holdout",
                "--output", tmp_path / "x") == 1
    assert "error [config]: the holdout protocol requires" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("cell_line,D1\nCL1,x\n")
    assert _run("label", "--response", bad, "--out", tmp_path / "l.csv") == 1
    assert "cannot parse" in capsys.readouterr().err
