import csv
import filecmp
import io
import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from channel_sim import load_curve
from fit import FitReport
from main import dispatch, parse_generator, parse_n_grid, parse_reranker, parse_subsample
from predict import evaluate_law
from rank_models import MallowsReranker, PerfectReranker, ZipfMandelbrotReranker


@pytest.fixture
def settings(tmp_path):
    """Settings file isolated from the working directory's config.yaml."""
    path = tmp_path / "settings.yaml"
    path.write_text("settings:\n  logging:\n    level: ERROR\n")
    return str(path)


def _run(settings, *argv):
    return dispatch(["--settings", settings, *argv])


def test_parse_generators():
    assert parse_generator("indep:0.3").epsilon == 0.3
    gen = parse_generator("beta:0.1,0.46")
    assert (gen.alpha, gen.beta) == (0.1, 0.46)


def test_parse_rerankers():
    assert parse_reranker("perfect") == PerfectReranker()
    assert parse_reranker("mallows:0") == PerfectReranker()
    assert isinstance(parse_reranker("mallows:0.5"), MallowsReranker)
    zipf = parse_reranker("zipf:0.1,0.5")
    assert isinstance(zipf, ZipfMandelbrotReranker)
    assert zipf.gamma == 0.5


@pytest.mark.parametrize("text", ["indep", "indep:2", "beta:1", "gauss:1"])
def test_parse_bad_generator(text):
    with pytest.raises(Exception):
        parse_generator(text)


def test_parse_grids():
    assert parse_n_grid("1..4") == (1, 2, 3, 4)
    assert parse_n_grid("1,5,10") == (1, 5, 10)
    with pytest.raises(Exception):
        parse_n_grid("3,2")
    with pytest.raises(Exception):
        parse_n_grid("0..3")


def test_parse_subsample():
    assert parse_subsample("prefix") == ("prefix", 1)
    assert parse_subsample("bootstrap:20") == ("bootstrap", 20)
    with pytest.raises(Exception):
        parse_subsample("bootstrap:0")


def test_help(capsys):
    assert dispatch(["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_command(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_no_command():
    assert dispatch([]) == 2


def test_missing_flag(settings):
    assert _run(settings, "curve", "--generator", "indep:0.3") == 2


def test_bad_spec_is_usage_error(settings):
    assert _run(settings, "curve", "--generator", "indep:1.5", "--reranker", "perfect", "--n", "1..3") == 2


def test_curve_to_stdout(settings, capsys):
    assert _run(settings, "curve", "--generator", "indep:0.3", "--reranker", "perfect", "--n", "1..3") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [float(r["failure_rate"]) for r in rows] == pytest.approx([0.3, 0.09, 0.027])
    assert "log10_failure_rate" in rows[0]


def test_simulate_is_reproducible(settings, tmp_path):
    outputs = []
    for name in ("a.csv", "b.csv"):
        path = str(tmp_path / name)
        code = _run(settings, "simulate", "--generator", "indep:0.3", "--reranker", "mallows:0.5",
                    "--n", "1..50", "--trials", "100000", "--seed", "7", "-o", path)
        assert code == 0
        with open(path, "rb") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]


def test_threads_do_not_change_output(settings, tmp_path):
    paths = [str(tmp_path / "one.csv"), str(tmp_path / "four.csv")]
    base = ["simulate", "--generator", "beta:0.5,0.5", "--reranker", "zipf:0.1,0.5",
            "--n", "1,4,16", "--trials", "3000", "--seed", "3"]
    assert _run(settings, *base, "-o", paths[0]) == 0
    assert _run(settings, "--threads", "4", *base, "-o", paths[1]) == 0
    with open(paths[0]) as a, open(paths[1]) as b:
        assert a.read() == b.read()


def test_marginals(settings, capsys):
    assert _run(settings, "marginals", "--reranker", "perfect", "--n", "3") == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows == [["j", "eta"], ["1", "1.0"], ["2", "0.0"], ["3", "0.0"]]


def test_explicit_reranker(settings, tmp_path, capsys):
    eta = tmp_path / "eta.csv"
    eta.write_text("j,eta\n1,0.5\n2,0.3\n3,0.2\n")
    assert _run(settings, "curve", "--generator", "indep:0.5", "--reranker", f"explicit:{eta}",
                "--n", "3") == 0
    assert _run(settings, "curve", "--generator", "indep:0.5", "--reranker", f"explicit:{eta}",
                "--n", "1..3") == 1
    assert "error" in capsys.readouterr().err


def test_predict(settings, capsys):
    assert _run(settings, "predict", "--generator", "indep:0.3", "--reranker", "perfect",
                "--target", "0.001") == 0
    result = json.loads(capsys.readouterr().out)
    assert result == {"reachable": True, "n": 6, "p_err_at_n": pytest.approx(0.3 ** 6), "n_cap": 100000}


def test_predict_needs_a_law(settings):
    assert _run(settings, "predict", "--target", "0.01") == 2


def test_json_errors(settings, tmp_path, capsys):
    missing = str(tmp_path / "nope.csv")
    assert _run(settings, "--json-errors", "fit", "--oracle", missing) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"


def test_empirical(settings, tmp_path, capsys):
    records = tmp_path / "records.jsonl"
    records.write_text("\n".join(json.dumps({"query_id": "q", "hyp_index": i, "acceptable": flag})
                                 for i, flag in enumerate([False, False, True])) + "\n")
    assert _run(settings, "empirical", "--records", str(records), "--n", "1..3") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [float(r["failure_rate"]) for r in rows] == [1.0, 1.0, 0.0]


def test_empirical_bad_line(settings, tmp_path):
    records = tmp_path / "records.jsonl"
    records.write_text("{oops\n")
    assert _run(settings, "empirical", "--records", str(records), "--n", "1") == 1


def test_config_file(settings, tmp_path, capsys):
    cfg = tmp_path / "flags.json"
    cfg.write_text(json.dumps({"generator": "indep:0.3", "reranker": "perfect", "n": [1, 2]}))
    assert _run(settings, "--config", str(cfg), "curve") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["n"]) for r in rows] == [1, 2]


def test_config_file_overridden_by_flags(settings, tmp_path, capsys):
    cfg = tmp_path / "flags.json"
    cfg.write_text(json.dumps({"generator": "indep:0.3", "reranker": "perfect", "n": "1..5"}))
    assert _run(settings, "--config", str(cfg), "curve", "--n", "2") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["n"]) for r in rows] == [2]


def test_config_file_unknown_key(settings, tmp_path):
    cfg = tmp_path / "flags.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert _run(settings, "--config", str(cfg), "curve") == 2


def test_run_log(tmp_path):
    log_file = tmp_path / "runs.jsonl"
    settings = tmp_path / "settings.yaml"
    settings.write_text(f"settings:\n  run_log:\n    enabled: true\n    file: {log_file}\n")
    out = str(tmp_path / "c.csv")
    assert dispatch(["--settings", str(settings), "curve", "--generator", "indep:0.3",
                     "--reranker", "random", "--n", "1", "-o", out]) == 0
    entry = json.loads(log_file.read_text().splitlines()[-1])
    assert entry["event"] == "command_finished"
    assert entry["command"] == "curve"
    assert entry["output"] == out


PIPELINE_ARTIFACTS = ("oracle.csv", "oracle.csv.meta.json", "imperfect.csv", "imperfect.csv.meta.json",
                      "law.json", "predict.json")


def _pipeline(settings, out_dir):
    out_dir.mkdir()
    path = {name: str(out_dir / name) for name in PIPELINE_ARTIFACTS}
    common = ["--generator", "beta:0.5,0.5", "--n", "1..10", "--trials", "20000", "--seed", "7"]
    assert _run(settings, "simulate", "--reranker", "perfect", *common, "-o", path["oracle.csv"]) == 0
    assert _run(settings, "simulate", "--reranker", "zipf:0.1,0.5", *common,
                "-o", path["imperfect.csv"]) == 0
    assert _run(settings, "fit", "--oracle", path["oracle.csv"], "--imperfect", path["imperfect.csv"],
                "-o", path["law.json"]) == 0
    assert _run(settings, "predict", "--params", path["law.json"], "--target", "0.2", "--n-cap", "1000",
                "-o", path["predict.json"]) == 0
    return path


def test_pipeline(settings, tmp_path):
    path = _pipeline(settings, tmp_path / "run")
    with open(path["law.json"]) as f:
        report = json.load(f)
    assert {"alpha", "beta", "gamma", "e_neg_lambda", "stage1", "stage2"} <= set(report)
    assert report["stage2"]["ran"]
    with open(path["predict.json"]) as f:
        assert "reachable" in json.load(f)

    generator, reranker = FitReport.from_json_dict(report).params.to_specs()
    for name, rer in (("oracle.csv", PerfectReranker()), ("imperfect.csv", reranker)):
        simulated = load_curve(path[name])
        fitted = evaluate_law(generator, rer, simulated.ns.tolist())
        assert np.allclose(fitted.rates, simulated.rates, atol=0.03), name


def test_pipeline_is_byte_identical(settings, tmp_path):
    first = _pipeline(settings, tmp_path / "first")
    second = _pipeline(settings, tmp_path / "second")
    for name in PIPELINE_ARTIFACTS:
        assert filecmp.cmp(first[name], second[name], shallow=False), name
