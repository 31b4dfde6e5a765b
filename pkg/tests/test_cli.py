import csv
import hashlib
import json
from pathlib import Path

import pandas as pd
import pytest

from bidimix.cli import _k_range, build_parser

from pipeline import run, run_pipeline

GOLDEN = Path(__file__).parent / "golden"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _golden(name):
    return _rows(GOLDEN / name)


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe"))


def test_pipeline_exit_codes(pipe):
    assert all(code == 0 for code in pipe["codes"].values()), pipe["codes"]


def test_se_layout_mar(pipe):
    rows = _rows(pipe["mar"] / "se.csv")
    assert rows[0] == _golden("se_header.csv")[0]
    assert [r[:2] for r in rows] == _golden("se_mar_labels.csv")


def test_se_layout_mnar(pipe):
    rows = _rows(pipe["mnar"] / "se.csv")
    assert [r[:2] for r in rows] == _golden("se_mnar_labels.csv")
    # intercept, logL and BIC rows carry no standard error
    for r in rows[1:]:
        if r[1] in ("Intercept", "logL", "BIC"):
            assert r[3] == ""
        else:
            assert float(r[3]) >= 0


def test_isni_layout(pipe):
    rows = _rows(pipe["isni"] / "isni.csv")
    gold = _golden("isni_labels.csv")
    assert rows[0] == gold[0]
    assert [r[0] for r in rows[1:]] == [g[0] for g in gold[1:]]
    assert all(len(r) == len(gold[0]) for r in rows)


def test_masses_layout(pipe):
    rows = _rows(pipe["mnar"] / "masses.csv")
    gold = _golden("masses_labels.csv")
    assert rows[0] == gold[0]
    assert [rows[1][0], rows[-1][0]] == [gold[1][0], gold[-1][0]]
    assert len(rows) == len(gold)


def test_manifest_hashes(pipe):
    man = json.loads((pipe["mar"] / "manifest.json").read_text())
    assert man["command"] == "fit" and man["seed"] == 1
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((pipe["mar"] / name).read_bytes()).hexdigest() == digest
    data_hash = hashlib.sha256((pipe["sim"] / "data.csv").read_bytes()).hexdigest()
    assert man["inputs"]["data"]["sha256"] == data_hash


def test_fit_outputs_byte_identical(pipe, tmp_path):
    data, schema = pipe["sim"] / "data.csv", pipe["sim"] / "schema.json"
    out = tmp_path / "again"
    assert run(["fit", "--data", data, "--schema", schema, "--starts", 2, "--seed", 1,
                "--k1", 2, "--k2", 2, "--mode", "mar", "--out", out]) == 0
    for name in ("fit.json", "se.csv", "masses.csv", "weights.csv", "trace.csv", "covariance.json"):
        assert (out / name).read_bytes() == (pipe["mar"] / name).read_bytes(), name


def test_scenario_outputs_byte_identical(pipe, tmp_path):
    out = tmp_path / "sc"
    assert run(["scenario", "--isni", pipe["isni"], "--scenario", 1, "--B", 200, "--seed", 3,
                "--out", out]) == 0
    for name in ("scenario.csv", "coverage.json"):
        assert (out / name).read_bytes() == (pipe["sc1"] / name).read_bytes()


def test_scenario2_outputs(pipe):
    df = pd.read_csv(pipe["sc2"] / "scenario.csv")
    assert list(df.columns[:3]) == ["draw", "c", "lambda_1"]
    assert {"rho12", "overflow"} <= set(df.columns)
    cov = json.loads((pipe["sc2"] / "coverage.json").read_text())
    assert cov["scenario"] == 2 and cov["B"] == 200


def test_isni_rejects_mnar_fit(pipe, tmp_path):
    code = run(["isni", "--fit", pipe["mnar"], "--data", pipe["sim"] / "data.csv",
                "--schema", pipe["sim"] / "schema.json", "--out", tmp_path / "x"])
    assert code == 3
    err = json.loads((tmp_path / "x" / "error.json").read_text())
    assert err["error"] == "PipelineError"


def test_isni_rejects_other_data(pipe, tmp_path):
    df = pd.read_csv(pipe["sim"] / "data.csv", dtype=str, keep_default_na=False)
    df = df[df.id != df.id.iloc[0]]
    other = tmp_path / "other.csv"
    df.to_csv(other, index=False)
    code = run(["isni", "--fit", pipe["mar"], "--data", other, "--schema", pipe["sim"] / "schema.json",
                "--out", tmp_path / "x"])
    assert code == 3


def test_stale_upstream_detected(pipe, tmp_path):
    import shutil
    stale = tmp_path / "isni"
    shutil.copytree(pipe["isni"], stale)
    p = stale / "isni.json"
    d = json.loads(p.read_text())
    d["isni"][0][0] += 1.0
    p.write_text(json.dumps(d))
    code = run(["scenario", "--isni", stale, "--scenario", 1, "--out", tmp_path / "sc"])
    assert code == 3


def test_scenario2_requires_mnar_fit(pipe, tmp_path):
    code = run(["scenario", "--isni", pipe["isni"], "--scenario", 2, "--mnar-fit", pipe["mar"],
                "--out", tmp_path / "sc"])
    assert code == 3
    assert run(["scenario", "--isni", pipe["isni"], "--scenario", 2, "--out", tmp_path / "sc"]) == 3


def test_data_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,occasion,y\na,1,1.0\na,3,2.0\n")
    assert run(["fit", "--data", bad, "--out", tmp_path / "o"]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "DataError" and err["exit_code"] == 3


def test_convergence_failure_exit_code(pipe, tmp_path):
    code = run(["fit", "--data", pipe["sim"] / "data.csv", "--schema", pipe["sim"] / "schema.json",
                "--k1", 2, "--k2", 2, "--starts", 1, "--max-iter", 2, "--no-polish",
                "--no-mar-start", "--out", tmp_path / "o"])
    assert code == 4
    assert (tmp_path / "o" / "error.json").exists()
    assert (tmp_path / "o" / "fit.json").exists()


def test_usage_errors(tmp_path):
    assert run(["fit", "--k1", "x"]) == 2
    assert run(["nonsense"]) == 2
    assert run(["scenario", "--isni", tmp_path, "--scenario", 1, "--range", 3, -3,
                "--out", tmp_path / "o"]) == 2


def test_select_command(pipe, tmp_path):
    out = tmp_path / "sel"
    assert run(["select", "--data", pipe["sim"] / "data.csv", "--schema", pipe["sim"] / "schema.json",
                "--k1", "1..2", "--k2", "1,2", "--mode", "mar", "--starts", 1, "--out", out]) == 0
    rows = _rows(out / "selection.csv")
    assert rows[0] == _golden("selection_header.csv")[0]
    assert len(rows) == 5


def test_ingest_command(pipe, tmp_path):
    out = tmp_path / "ing"
    assert run(["ingest", "--data", pipe["sim"] / "data.csv", "--schema", pipe["sim"] / "schema.json",
                "--out", out]) == 0
    summ = json.loads((out / "summary.json").read_text())
    assert summ["n"] == 300 and summ["T"] == 5


def test_k_range_parser():
    assert _k_range("1..3") == [1, 2, 3]
    assert _k_range("2,4") == [2, 4]
    assert build_parser().parse_args(["select", "--data", "d", "--out", "o", "--k1", "2..3"]).k1 == [2, 3]
