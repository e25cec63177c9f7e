from __future__ import annotations

import csv
import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from attendlight.benchcli import (
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_SCHEMA,
    EXIT_UNKNOWN_CASE,
    EXIT_USAGE,
    CliError,
    ResultRow,
    att_ratio,
    compare_tables,
    main,
    parse_seeds,
    parse_synthetic,
    read_rows,
    resolve_flow,
    resolve_topology,
    rho,
    summarize,
    write_rows,
)
from attendlight.policy import AttendLight

# -- metrics ---------------------------------------------------------------------


def test_rho_examples():
    assert rho(122.61, 141.44) == pytest.approx(-0.1331, abs=5e-5)
    assert rho(80.0, 80.0) == 0.0
    assert rho(200.0, 100.0) == 0.5
    for bad in ((0.0, 1.0), (1.0, -2.0)):
        with pytest.raises(ValueError):
            rho(*bad)


@given(st.floats(1e-3, 1e4), st.floats(1e-3, 1e4))
def test_rho_antisymmetric_and_bounded(u, b):
    assert rho(u, b) == pytest.approx(-rho(b, u))
    assert -1 <= rho(u, b) <= 1


def test_att_ratio_examples():
    assert att_ratio(122.61, 108.47) == pytest.approx(1.1304, abs=5e-5)
    assert att_ratio(5.0, 5.0) == 1.0
    assert att_ratio(3.0, 6.0) == 0.5
    with pytest.raises(ValueError):
        att_ratio(1.0, 0.0)


def test_summarize():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s["mean"] == 2.5 and s["k"] == 4
    assert s["std"] == pytest.approx(1.2909944)
    assert s["ci95"] == pytest.approx(1.96 * 1.2909944 / 2)
    assert summarize([7.0])["ci95"] == 0.0


# -- parsing helpers -------------------------------------------------------------

def test_resolvers():
    assert resolve_topology("int7", 8)[1].n_phases == 8
    assert resolve_topology("int1")[0] == "int1"
    assert resolve_flow("S3", None).label == "S3"
    assert resolve_flow(None, "lambda=3,extra=0.2").label == "L3E0.2"
    assert parse_synthetic("lambda=2.5,extra=0.1").lambda_s == 2.5
    assert parse_seeds("0:5") == [0, 1, 2, 3, 4]
    assert parse_seeds("3,1") == [3, 1]
    with pytest.raises(CliError) as err:
        parse_seeds("a-b")
    assert err.value.code == EXIT_USAGE


def test_result_row_requires_positive_att():
    with pytest.raises(ValueError):
        ResultRow("c", "a", 0, 0.0)


# -- result files and comparison --------------------------------------------------

def _rows():
    return [ResultRow("int1-S1-3", "attendlight", s, 80.0 + s) for s in range(3)] + \
           [ResultRow("int1-S1-3", "fixed_time", s, 110.0 + s) for s in range(3)] + \
           [ResultRow("int3-S2-2", "attendlight", 0, 60.0), ResultRow("int3-S2-2", "fixed_time", 0, 50.0)]


def test_rows_round_trip(tmp_path):
    path = tmp_path / "r.csv"
    write_rows(_rows()[:4], path)
    write_rows(_rows()[4:], path)
    assert read_rows(path) == _rows()
    assert path.read_text().count("case,algorithm,seed,att") == 1


def test_compare_identical_files_gives_zero(tmp_path):
    rows = [ResultRow("int1-S1-3", "attendlight", 0, 90.0)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_rows(rows, a)
    write_rows([ResultRow(r.case, "copy", r.seed, r.att) for r in rows], b)
    text = compare_tables(read_rows(a) + read_rows(b), "attendlight", ["copy"])
    body = list(csv.reader(text.split("\n\n")[0].splitlines()))[1:]
    assert body and all(float(rec[-1]) == 0.0 for rec in body)


def test_compare_values_and_row_order_invariance():
    rows = _rows()
    text = compare_tables(rows, "attendlight", ["fixed_time"], single="fixed_time")
    assert "rho,int1-S1-3,attendlight,fixed_time,-0.270270" in text
    assert "att_ratio,int3-S2-2,attendlight,fixed_time,1.200000" in text
    shuffled = rows[:]
    random.Random(0).shuffle(shuffled)
    assert compare_tables(shuffled, "attendlight", ["fixed_time"], single="fixed_time") == text


def test_compare_unknown_case():
    with pytest.raises(CliError) as err:
        compare_tables(_rows(), "attendlight", ["fixed_time"], cases=["int9-S1-8"])
    assert err.value.code == EXIT_UNKNOWN_CASE


# -- end-to-end commands ---------------------------------------------------------

def test_gen_flow_and_baseline(tmp_path, capsys):
    flow = tmp_path / "f.csv"
    assert main(["gen-flow", "--topology", "int1", "--flow", "S1", "--seed", "3", "--out", str(flow)]) == EXIT_OK
    assert flow.exists() and (tmp_path / "f.csv.manifest.json").exists()
    res = tmp_path / "res.csv"
    assert main(["baseline", "--algorithm", "max_pressure", "--topology", "int1", "--flow", str(flow),
                 "--seeds", "0,1", "--out", str(res)]) == EXIT_OK
    rows = read_rows(res)
    assert [r.seed for r in rows] == [0, 1] and rows[0].case == "int1-f-3"


def test_train_zero_episodes_is_initialisation(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--regime", "single", "--episodes", "0", "--d", "8", "--seed", "5",
                 "--out", str(out)]) == EXIT_OK
    assert AttendLight.load(out / "model.atlk").to_bytes() == AttendLight(8, seed=5).to_bytes()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [5] and len(manifest["config_hash"]) == 64
    assert {"attendlight", "numpy", "python"} <= set(manifest["versions"])
    assert (out / "curve.csv").read_text() == "iteration,mean_return,mean_att,wallclock_s\n"


def test_strict_training_and_eval_rows(tmp_path):
    args = ["train", "--regime", "single", "--episodes", "2", "--d", "8", "--n", "1",
            "--strict-deterministic", "--flow", "S1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("model.atlk", "curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    res = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(tmp_path / "a" / "model.atlk"), "--flow", "S1",
                 "--seeds", "0:5", "--out", str(res)]) == EXIT_OK
    rows = read_rows(res)
    assert len(rows) == 5 and {r.case for r in rows} == {"int1-S1-3"}


def test_train_with_snapshot_selection(tmp_path):
    out = tmp_path / "sel"
    assert main(["train", "--episodes", "2", "--d", "8", "--n", "1", "--flow", "S1", "--select-every", "1",
                 "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["selected_iteration"] in (1, 2)
    assert main(["train", "--select-every", "-1", "--out", str(out)]) == EXIT_USAGE


def test_exit_codes(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.atlk")]) == EXIT_MISSING_FILE
    assert main(["baseline", "--algorithm", "fixed_time", "--flow", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "x.csv")]) == EXIT_MISSING_FILE
    bad = tmp_path / "bad.csv"
    bad.write_text("who,what\n1,2\n")
    assert main(["compare", str(bad)]) == EXIT_SCHEMA
    junk = tmp_path / "junk.atlk"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk)]) == EXIT_SCHEMA
    good = tmp_path / "good.csv"
    write_rows(_rows(), good)
    assert main(["compare", str(good), "--baseline", "fixed_time", "--case", "int42-S1-3"]) == EXIT_UNKNOWN_CASE
    assert main(["baseline", "--algorithm", "sotl", "--sotl", "1,2", "--out", str(tmp_path / "y.csv")]) == EXIT_USAGE
    assert main(["baseline", "--algorithm", "fixed_time", "--seeds", "x", "--out", str(tmp_path / "y.csv")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["train", "--regime", "bogus"])
    assert err.value.code == EXIT_USAGE
