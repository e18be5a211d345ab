import json

import numpy as np
import pytest

from bdsg.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main
from bdsg.experiment import load_dataset

MIX = {"components": [{"weight": 1.0, "mean": [0.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 1.0]]}]}


@pytest.fixture
def ws(tmp_path):
    (tmp_path / "mix.json").write_text(json.dumps(MIX))
    return tmp_path


def test_gen_data(ws):
    assert main(["gen-data", "--mixture", str(ws / "mix.json"), "--M", "64", "--seed", "1",
                 "--out", str(ws / "d.csv")]) == EXIT_OK
    assert load_dataset(ws / "d.csv").shape == (64, 2)


def test_argparse_failure_is_validation(ws):
    assert main(["gen-data"]) == EXIT_VALIDATION
    assert main(["no-such-command"]) == EXIT_VALIDATION


def test_help_exits_ok(capsys):
    assert main(["--help"]) == EXIT_OK


def test_missing_file_is_io_error(ws):
    assert main(["gen-data", "--mixture", str(ws / "absent.json"), "--out", str(ws / "d.csv")]) == EXIT_IO


def test_bad_mixture_is_validation(ws):
    (ws / "bad.json").write_text('{"components": []}')
    assert main(["gen-data", "--mixture", str(ws / "bad.json"), "--out", str(ws / "d.csv")]) == EXIT_VALIDATION


def test_malformed_csv_is_validation(ws, capsys):
    (ws / "d.csv").write_text("1,2\n3\n")
    code = main(["train-boundary", "--data", str(ws / "d.csv"), "--density", str(ws / "mix.json"),
                 "--out", str(ws / "b.json"), "--N", "2", "--epochs", "1"])
    assert code == EXIT_VALIDATION and "line 2" in capsys.readouterr().err


def test_non_finite_loss_is_numeric(ws):
    (ws / "big.csv").write_text("1e200,1e200\n-1e200,2e200\n3e200,1e200\n")
    code = main(["train-boundary", "--data", str(ws / "big.csv"), "--density", str(ws / "mix.json"),
                 "--out", str(ws / "b.json"), "--N", "2", "--epochs", "3"])
    assert code == EXIT_NUMERIC


def test_n_above_m_rejected(ws):
    main(["gen-data", "--mixture", str(ws / "mix.json"), "--M", "10", "--out", str(ws / "d.csv")])
    code = main(["train-boundary", "--data", str(ws / "d.csv"), "--density", str(ws / "mix.json"),
                 "--out", str(ws / "b.json"), "--N", "20", "--epochs", "1"])
    assert code == EXIT_VALIDATION


@pytest.fixture
def trained(ws):
    main(["gen-data", "--mixture", str(ws / "mix.json"), "--M", "128", "--seed", "2", "--out", str(ws / "d.csv")])
    assert main(["train-boundary", "--data", str(ws / "d.csv"), "--density", str(ws / "mix.json"),
                 "--out", str(ws / "b.json"), "--N", "32", "--epochs", "20",
                 "--history", str(ws / "h.csv")]) == EXIT_OK
    return ws


def test_score_points_jsonl(trained):
    ws = trained
    (ws / "pts.csv").write_text("0,0\n5,5\n")
    assert main(["score", "points", "--density", str(ws / "mix.json"), "--points", str(ws / "pts.csv"),
                 "--reference", str(ws / "d.csv"), "--out", str(ws / "v.jsonl")]) == EXIT_OK
    recs = [json.loads(line) for line in (ws / "v.jsonl").read_text().splitlines()]
    assert [r["verdict"] for r in recs] == ["normal", "anomalous"]


def test_score_ood_and_strong(trained):
    ws = trained
    assert main(["score", "ood", "--density", str(ws / "mix.json"), "--points", str(ws / "d.csv"),
                 "--boundary", str(ws / "b.json"), "--N", "32", "--out", str(ws / "o.json")]) == EXIT_OK
    res = json.loads((ws / "o.json").read_text())
    assert {"total", "l0", "l1", "l2"} <= set(res)
    assert main(["score", "strong", "--density", str(ws / "mix.json"), "--boundary", str(ws / "b.json"),
                 "--reference", str(ws / "d.csv"), "--Q", "64", "--N", "32",
                 "--out", str(ws / "s.jsonl")]) == EXIT_OK
    for line in (ws / "s.jsonl").read_text().splitlines():
        assert json.loads(line)["verdict"] == "anomalous"


def test_strong_needs_reference(trained):
    ws = trained
    assert main(["score", "strong", "--density", str(ws / "mix.json"), "--boundary", str(ws / "b.json"),
                 "--out", str(ws / "s.jsonl")]) == EXIT_VALIDATION


def test_eval_self_comparison(trained):
    ws = trained
    assert main(["eval", "--truth", str(ws / "mix.json"), "--boundary", str(ws / "b.json"),
                 "--resolution", "50,50", "--lower=-5,-5", "--upper", "5,5",
                 "--out", str(ws / "r.json")]) == EXIT_OK
    report = json.loads((ws / "r.json").read_text())
    assert report["precision"] == report["recall"] == 1.0
    assert report["bp2"] <= report["bp1"]


def test_run_and_plot(ws):
    cfg = {"data": {"mixture_path": "mix.json", "M": 64, "holdout": 32},
           "boundary": {"epochs": 10, "N": 16},
           "grid": {"lower": [-4, -4], "upper": [4, 4], "resolution": [20, 20]},
           "metrics": {"n_boundary_samples": 64, "n_anomalies": 32}}
    (ws / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(ws / "c.json"), "--seed", "5",
                 "--output-dir", str(ws / "out")]) == EXIT_OK
    manifest = json.loads((ws / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["boundary"]["epochs"] == 10
    assert main(["plot", "--data", str(ws / "out" / "data.csv"),
                 "--boundary", str(ws / "out" / "boundary_samples.csv"), "--out", str(ws / "p.svg")]) == EXIT_OK
    assert (ws / "p.svg").read_text().count('fill="red"') == 64


def test_run_requires_seed(ws):
    (ws / "c.json").write_text(json.dumps({"data": {"mixture_path": "mix.json"}}))
    assert main(["run", "--config", str(ws / "c.json")]) == EXIT_VALIDATION


def test_run_failure_reports_stage(ws, capsys):
    cfg = {"data": {"mixture_path": "mix.json", "M": 32}, "boundary": {"N": 8, "epochs": 2, "widths": [2, 5, 3]}}
    (ws / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(ws / "c.json"), "--seed", "0",
                 "--output-dir", str(ws / "out")]) == EXIT_VALIDATION
    assert "boundary" in capsys.readouterr().err


def test_train_flow_round_trip(ws):
    main(["gen-data", "--mixture", str(ws / "mix.json"), "--M", "64", "--out", str(ws / "d.csv")])
    assert main(["train-flow", "--data", str(ws / "d.csv"), "--out", str(ws / "f.json"), "--epochs", "1",
                 "--n-blocks", "2", "--hidden", "8,8", "--batch-size", "32"]) == EXIT_OK
    (ws / "pts.csv").write_text("0,0\n")
    assert main(["score", "points", "--density", str(ws / "f.json"), "--points", str(ws / "pts.csv"),
                 "--out", str(ws / "v.jsonl")]) == EXIT_OK
    assert np.isfinite(json.loads((ws / "v.jsonl").read_text())["log_density"])
