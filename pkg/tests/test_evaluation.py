import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg.evaluation import PairResult, accepted, auc, render_checkerboard, rmse, success_curve, summarize
from .oracles import auc_loops, rmse_loops


def test_rmse_examples():
    a = np.array([[0.0, 0.0], [10.0, 10.0]])
    assert rmse(a, a) == 0.0
    assert rmse(a, a + [3.0, 4.0]) == pytest.approx(5.0)
    assert rmse(a, a + [[0.0, 0.0], [5.0, 0.0]]) == pytest.approx(math.sqrt(12.5))


def test_rmse_rejects_mismatched_counts():
    with pytest.raises(ValueError):
        rmse(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        rmse(np.zeros((0, 2)), np.zeros((0, 2)))


@given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500), st.floats(-50, 50), st.floats(-50, 50)),
                min_size=1, max_size=30))
def test_rmse_matches_loops(rows):
    arr = np.array(rows)
    a, b = arr[:, :2], arr[:, :2] + arr[:, 2:]
    assert rmse(a, b) == rmse_loops(a.tolist(), b.tolist())


def test_accept_boundary():
    assert accepted(19.999)
    assert not accepted(20.0)
    assert PairResult("a", 50.0, 19.999).accepted and not PairResult("b", 1.0, 20.0).accepted


def test_auc_examples():
    assert auc([0.0, 0.0, 0.0]) == 1.0
    assert auc([10.0]) == pytest.approx(16 / 26)
    assert auc([25.5, 30.0, 1e6]) == 0.0
    assert auc([25.0]) == pytest.approx(1 / 26)
    with pytest.raises(ValueError):
        auc([])


@given(st.lists(st.floats(0, 40), min_size=1, max_size=40))
def test_auc_matches_loops(vals):
    assert auc(vals) == auc_loops(vals)


@given(st.lists(st.floats(0, 40), min_size=1, max_size=20), st.integers(0, 19), st.floats(0, 10))
def test_auc_monotone_in_errors(vals, idx, bump):
    worse = list(vals)
    worse[idx % len(vals)] += bump
    assert auc(worse) <= auc(vals) + 1e-15


def test_success_curve_shape():
    ts, rates = success_curve([1.5, 30.0])
    assert len(ts) == 26 and ts[0] == 0 and ts[-1] == 25
    assert rates[1] == 0.0 and rates[2] == 0.5 and rates[-1] == 0.5


def test_pair_result_validation():
    with pytest.raises(ValueError):
        PairResult("x", -1.0, 1.0)
    with pytest.raises(ValueError):
        PairResult("x", 1.0, float("nan"))


def test_summarize_and_outputs(tmp_path):
    pairs = [PairResult("p0", 30.0, 2.0, category="A"), PairResult("p1", 5.0, 21.0, category="B"),
             PairResult("p2", 8.0, 3.0, category="A")]
    b = summarize(pairs, errors=[{"pair_id": "p3", "error": "boom"}])
    assert b.accept_rate == pytest.approx(2 / 3) and b.accept_rate_global == pytest.approx(2 / 3)
    assert b.auc == pytest.approx(auc_loops([2.0, 21.0, 3.0]))
    assert b.auc_global == pytest.approx(auc_loops([30.0, 5.0, 8.0]))
    assert b.by_category["A"]["n"] == 2 and b.by_category["B"]["accept_rate"] == 0.0
    b.write_json(tmp_path / "b.json")
    d = json.loads((tmp_path / "b.json").read_text())
    assert d["errors"][0]["pair_id"] == "p3" and len(d["pairs"]) == 3
    b.write_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["pair_id"] for r in rows] == ["p0", "p1", "p2"]
    assert float(rows[1]["rmse_final"]) == 21.0 and rows[1]["accepted"] == "0"
    assert summarize([]).auc == 0.0


def test_checkerboard_equal_inputs(rng):
    img = rng.random((64, 80))
    np.testing.assert_array_equal(render_checkerboard(img, img, 16), img)


def test_checkerboard_single_tile_shows_fixed():
    a, b = np.zeros((32, 32)), np.ones((32, 32))
    np.testing.assert_array_equal(render_checkerboard(a, b, 32), a)


def test_checkerboard_pattern():
    a, b = np.zeros((256, 256)), np.ones((256, 256))
    out = render_checkerboard(a, b, 64)
    cells = out[::64, ::64]
    expect = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(float)
    np.testing.assert_array_equal(cells, expect)
    assert np.array_equal(out[:64, :64], np.zeros((64, 64))) and out.mean() == 0.5


def test_checkerboard_errors():
    with pytest.raises(ValueError):
        render_checkerboard(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        render_checkerboard(np.zeros((8, 8)), np.zeros((8, 8)), tile=4)
