import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_dsc, brute_hd
from scunetpp.metrics import HDUndefinedError, dsc, evaluate_set, hd95, logits_to_mask
from scunetpp.tensor import DimensionError


def _mask(points, shape=(6, 6)):
    m = np.zeros(shape, dtype=bool)
    for p in points:
        m[p] = True
    return m


def random_pair(rng):
    h, w = rng.integers(1, 33, 2)
    density = rng.uniform(0.02, 0.5)
    x = rng.random((h, w)) < density
    y = rng.random((h, w)) < density
    x.flat[rng.integers(x.size)] = True
    y.flat[rng.integers(y.size)] = True
    return x, y


# -- DSC -----------------------------------------------------------------------


def test_dsc_examples():
    x = _mask([(0, 0), (0, 1), (1, 0), (1, 1)])
    assert dsc(x, x) == 1.0
    assert dsc(_mask([(0, 0)]), _mask([(5, 5)])) == 0.0
    assert dsc(x, _mask([(0, 0), (1, 1)])) == pytest.approx(2 * 2 / 6)
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert dsc(x, np.zeros_like(x)) == 0.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        hd95(np.ones((2, 2)), np.ones((3, 2)))


# -- HD95 ----------------------------------------------------------------------


def test_hd_three_four_five():
    x, y = _mask([(0, 0)]), _mask([(3, 4)])
    assert hd95(x, y, "percentile") == 5.0
    assert hd95(x, y, "paper_scaled") == 4.75


def test_hd_identity():
    x = _mask([(1, 2), (3, 3), (4, 0)])
    assert hd95(x, x) == 0.0
    assert hd95(x, x, "paper_scaled") == 0.0


def test_hd_undefined_and_bad_mode():
    with pytest.raises(HDUndefinedError):
        hd95(np.zeros((3, 3)), np.ones((3, 3)))
    with pytest.raises(ValueError):
        hd95(np.ones((3, 3)), np.ones((3, 3)), "mean")


def test_percentile_interpolates():
    # pooled distances: 0 (x->y), 0, 10 (the far y pixel) -> 95th pct at rank 1.9 = 0 + 0.9 * 10
    x = _mask([(0, 0)], (1, 11))
    y = _mask([(0, 0), (0, 10)], (1, 11))
    assert hd95(x, y) == pytest.approx(9.0, abs=1e-12)
    assert hd95(x, y, "paper_scaled") == pytest.approx(9.5)


@pytest.mark.parametrize("chunk", range(5))
def test_fuzz_against_brute_force(chunk):
    rng = np.random.default_rng(100 + chunk)
    for _ in range(100):
        x, y = random_pair(rng)
        assert dsc(x, y) == brute_dsc(x, y)
        assert abs(hd95(x, y) - brute_hd(x, y, "percentile")) < 1e-9
        assert hd95(x, y, "paper_scaled") == brute_hd(x, y, "paper_scaled")


masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


@settings(max_examples=80, deadline=None)
@given(masks, st.integers(0, 2**31 - 1))
def test_symmetry_and_bounds(a, seed):
    b = np.random.default_rng(seed).random(a.shape) < 0.3
    assert dsc(a, b) == dsc(b, a)
    assert 0.0 <= dsc(a, b) <= 1.0
    if a.any() and b.any():
        assert hd95(a, b) == hd95(b, a)
        assert hd95(a, b) <= brute_hd(a, b, "paper_scaled") / 0.95 + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.integers(0, 6))
def test_translation_invariance(seed, dy, dx):
    rng = np.random.default_rng(seed)
    x = rng.random((10, 10)) < 0.3
    y = rng.random((10, 10)) < 0.3
    x[0, 0] = y[9, 9] = True
    big_x = np.zeros((16, 16), dtype=bool)
    big_y = np.zeros((16, 16), dtype=bool)
    big_x[dy : dy + 10, dx : dx + 10] = x
    big_y[dy : dy + 10, dx : dx + 10] = y
    assert abs(dsc(x, y) - dsc(big_x, big_y)) < 1e-12
    for mode in ("percentile", "paper_scaled"):
        assert abs(hd95(x, y, mode) - hd95(big_x, big_y, mode)) < 1e-12


# -- logits and reports --------------------------------------------------------


def test_logits_to_mask():
    logits = np.zeros((1, 2, 2, 2))
    logits[0, 1, 0, 0] = 1.0
    assert np.array_equal(logits_to_mask(logits)[0], [[True, False], [False, False]])
    single = np.array([[[[0.3, -0.3]]]])
    assert np.array_equal(logits_to_mask(single), [[[True, False]]])


def test_report_single_identity():
    x = _mask([(1, 1), (2, 2)])
    r = evaluate_set([x], [x])
    assert (r.dsc_mean, r.dsc_std, r.hd95_mean, r.hd95_std) == (1.0, 0.0, 0.0, 0.0)


def test_report_population_std():
    x = _mask([(0, 0), (0, 1)])
    r = evaluate_set([x, _mask([(0, 0)])], [x, _mask([(0, 0), (0, 1), (3, 3)])])
    assert r.dsc == [1.0, 0.5]
    assert r.dsc_mean == 0.75 and r.dsc_std == 0.25


def test_report_undefined_hd():
    x = _mask([(0, 0)])
    empty = np.zeros_like(x)
    r = evaluate_set([x, x, empty], [x, _mask([(3, 4)]), x], ["a", "b", "c"])
    assert r.n_hd_undefined == 1
    assert r.hd95 == [0.0, 5.0, None]
    assert r.hd95_mean == 2.5
    assert r.summary()["hd_undefined"] == 1


def test_report_files(tmp_path):
    x = _mask([(0, 0)])
    r = evaluate_set([x, np.zeros_like(x)], [x, x], ["c1/0", "c1/1"])
    r.write_csv(tmp_path / "r.csv")
    r.write_json(tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(rows[0]) == ["case_id", "dsc", "hd95", "hd_defined"]
    assert rows[1] == {"case_id": "c1/1", "dsc": "0.0", "hd95": "", "hd_defined": "0"}
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["n"] == 2 and summary["dsc_mean"] == 0.5
    # aggregates are recomputable from the rows
    assert np.mean([float(row["dsc"]) for row in rows]) == summary["dsc_mean"]


def test_report_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_set([np.ones((2, 2))], [])
