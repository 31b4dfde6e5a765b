import json
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bidimix.data import (DataError, Schema, build_dropout_indicators, ingest_summary,
                          load_csv, transform_response, write_csv)


def test_transform_response_values():
    assert transform_response(30) == 0.0
    assert_allclose(transform_response([0, 29, 30]), [math.log(31), math.log(2), 0.0])


@pytest.mark.parametrize("bad", [31, -1, 12.5, float("nan")])
def test_transform_response_rejects(bad):
    with pytest.raises(DataError):
        transform_response(bad)


def test_dropout_indicators():
    assert_array_equal(build_dropout_indicators(1, 5), [0, 1])
    assert_array_equal(build_dropout_indicators(3, 5), [0, 0, 0, 1])
    assert_array_equal(build_dropout_indicators(5, 5), [0, 0, 0, 0, 0])
    with pytest.raises(DataError):
        build_dropout_indicators(0, 5)
    with pytest.raises(DataError):
        build_dropout_indicators(6, 5)


def _frame():
    # subject a: completer, b: drops after 2 (explicit dropout row), c: drops after 1 (implicit)
    rows = [
        ("a", 1, 1.0, 85, 0), ("a", 2, 1.2, 86, 0), ("a", 3, 1.1, 87, 0),
        ("b", 1, 2.0, 85, 1), ("b", 2, 2.4, 86, 1), ("b", 3, None, 87, 1),
        ("c", 1, 0.5, 85, 1),
    ]
    return pd.DataFrame(rows, columns=["id", "occasion", "y", "age", "sex"])


def test_load_csv_patterns(tmp_path):
    path = tmp_path / "d.csv"
    _frame().to_csv(path, index=False)
    ds = load_csv(path, Schema(x=("age", "sex"), v=("age", "sex"), T=3, time_linear={"age": 1.0}))
    assert ds.n == 3 and ds.T == 3 and ds.n_completers == 1
    a, b, c = ds.subjects
    assert a.completer and a.T_i == 3 and len(a.r) == 3
    assert_array_equal(b.r, [0, 0, 1])
    assert_array_equal(b.V[:, 0], [85, 86, 87])
    # implicit dropout row: time-linear age advances, constant sex carries over
    assert_array_equal(c.r, [0, 1])
    assert_array_equal(c.V, [[85, 1], [86, 1]])


def test_load_csv_time_varying_needs_row(tmp_path):
    df = _frame()
    df = df[df.id != "b"]
    df = pd.concat([df, pd.DataFrame([("c", 2, 0.7, 86, 1)], columns=df.columns)])
    path = tmp_path / "d.csv"
    df.to_csv(path, index=False)
    with pytest.raises(DataError, match="extrapolated"):
        load_csv(path, Schema(x=("age",), v=("age",), T=3))


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.drop(index=1), "non-contiguous"),
    (lambda d: d.assign(y=d.y.astype(object).where(d.index != 0, "x")), "non-numeric"),
    (lambda d: d.drop(columns="sex"), "missing columns"),
    (lambda d: pd.concat([d, d.iloc[[0]]]), "duplicated"),
])
def test_load_csv_errors(tmp_path, mutate, msg):
    path = tmp_path / "d.csv"
    mutate(_frame()).to_csv(path, index=False)
    with pytest.raises(DataError, match=msg):
        load_csv(path, Schema(x=("age", "sex"), v=("age", "sex"), T=3, time_linear={"age": 1.0}))


def test_intermittent_rejected(tmp_path):
    df = _frame()
    df.loc[(df.id == "a") & (df.occasion == 2), "y"] = None
    path = tmp_path / "d.csv"
    df.to_csv(path, index=False)
    with pytest.raises(DataError):
        load_csv(path, Schema(x=("age",), v=("age",), T=3, time_linear={"age": 1.0}))


def test_schema_unknown_key():
    with pytest.raises(DataError):
        Schema.from_dict({"id": "id", "colour": "red"})


def test_mmse_transform_applied(tmp_path):
    df = _frame().assign(y=[30, 28, 25, 20, 18, None, 10])
    path = tmp_path / "d.csv"
    df.to_csv(path, index=False)
    ds = load_csv(path, {"x": ["sex"], "v": ["sex"], "T": 3, "transform": "mmse"})
    assert_allclose(ds.subjects[0].y, np.log1p(30 - np.array([30, 28, 25])))


def test_write_csv_roundtrip(tmp_path, sim_data):
    schema = write_csv(sim_data, tmp_path / "d.csv", schema_path=tmp_path / "s.json")
    back = load_csv(tmp_path / "d.csv", Schema.from_json(tmp_path / "s.json"))
    assert schema == Schema.from_dict(json.loads((tmp_path / "s.json").read_text()))
    for s, t in zip(sim_data.subjects, back.subjects):
        assert s.id == t.id and s.T_i == t.T_i
        assert_array_equal(s.y, t.y)
        assert_array_equal(s.X, t.X)
        assert_array_equal(s.V, t.V)
        assert_array_equal(s.r, t.r)


def test_arrays_sufficient_statistics(sim_data):
    A = sim_data.arrays
    i = 7
    s = sim_data.subjects[i]
    assert_allclose(A.sy[i], s.y.sum())
    assert_allclose(A.sx[i], s.X.sum(axis=0))
    assert_allclose(A.sxx, sum(t.X.T @ t.X for t in sim_data.subjects))
    assert_allclose(A.sxy, sum(t.X.T @ t.y for t in sim_data.subjects))


def test_risk_groups_reproduce_rows(sim_data):
    rg = sim_data.risk_groups
    rows = np.vstack([np.column_stack([s.V, s.r]) for s in sim_data.subjects])
    assert rg.counts.sum() == len(rows)
    # every (V, r) row is counted once in its group
    per_group = np.asarray(rg.counts.sum(axis=1)).ravel()
    for g in range(len(rg.r)):
        key = np.append(rg.V[g], rg.r[g])
        assert per_group[g] == np.sum(np.all(rows == key, axis=1))


def test_ingest_summary_counts(sim_data):
    summ = ingest_summary(sim_data)
    Ti = np.array([s.T_i for s in sim_data.subjects])
    assert summ["completers"] == int(np.sum(Ti == sim_data.T))
    for row in summ["occasions"]:
        t = row["occasion"]
        assert row["total"] == int(np.sum(Ti >= t))
        assert row["complete"] == int(np.sum(Ti >= t + 1))
        left = sum(v["count"] for v in row["leaving"].values())
        assert left == row["total"] - row["complete"]
