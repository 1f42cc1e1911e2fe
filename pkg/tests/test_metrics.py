import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusepos import metrics as Mx


def test_error_series_examples():
    t = np.arange(10.0)
    xy = np.column_stack([t, 2 * t])
    assert np.all(Mx.error_series(t, xy, t, xy) == 0)
    assert Mx.error_series(t, xy + [3.0, 4.0], t, xy) == pytest.approx(np.full(10, 5.0))


def test_error_series_oversampled_ground_truth():
    t = np.arange(10.0)
    gt_t = np.arange(0.0, 10.0, 0.5)
    gt = np.column_stack([gt_t, gt_t])
    e = Mx.error_series(t, np.column_stack([t, t]), gt_t, gt)
    assert len(e) == 10 and np.all(e == 0)


def test_error_series_no_alignment():
    with pytest.raises(ValueError):
        Mx.error_series([0.0, 1.0], np.zeros((2, 2)), [10.0, 11.0], np.zeros((2, 2)), tolerance=0.5)


def test_summarize_examples():
    s = Mx.summarize(np.arange(1, 101))
    assert (s.mean, s.p80, s.p95, s.count) == (50.5, 80.0, 95.0, 100)
    assert Mx.summarize([2.5] * 7) == Mx.ErrorSummary(2.5, 2.5, 2.5, 7)
    with pytest.raises(ValueError):
        Mx.summarize([])


def test_summarize_against_sort_oracle():
    g = np.random.default_rng(0)
    for _ in range(1000):
        n = int(g.integers(1, 60))
        e = g.exponential(1.0, n)
        s = Mx.summarize(e)
        srt = sorted(e.tolist())
        assert s.p80 == srt[math.ceil(0.8 * n) - 1]
        assert s.p95 == srt[math.ceil(0.95 * n) - 1]
        assert s.mean == pytest.approx(sum(srt) / n, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=80))
def test_percentiles_ordered(errs):
    s = Mx.summarize(errs)
    assert s.mean >= 0 and s.p80 <= s.p95 <= max(errs)


def test_reference_row_formats():
    # reference EKF row of the published noise table (not reproduced numerically)
    row = Mx.ErrorSummary(0.179, 0.228, 0.266, 1)
    assert Mx.comparison_table({"ekf": row}).splitlines()[1] == "ekf,0.1790,0.2280,0.2660,1"


def test_allan_constant_is_zero():
    c = Mx.allan_variance(np.full(1000, 3.0), 0.01)
    assert np.all(c.adev == 0)
    assert np.all(np.diff(c.taus) > 0)


def test_allan_homogeneity():
    y = np.random.default_rng(1).normal(size=4000)
    a = Mx.allan_variance(y, 0.02)
    b = Mx.allan_variance(2 * y, 0.02)
    assert b.adev == pytest.approx(2 * a.adev, rel=1e-12)


def test_allan_single_cluster_example():
    # m=1: avar = mean((y_{k+1}-y_k)^2)/2
    y = np.array([0.0, 1.0, 0.0, 1.0])
    c = Mx.allan_variance(y, 1.0, taus=[1.0])
    assert c.adev[0] == pytest.approx(math.sqrt(0.5))


def test_allan_slopes():
    g = np.random.default_rng(7)
    white = g.normal(size=10**6)
    assert Mx.allan_variance(white, 0.01).slope() == pytest.approx(-0.5, abs=0.05)
    walk = np.cumsum(g.normal(size=10**6))
    assert Mx.allan_variance(walk, 0.01).slope() == pytest.approx(0.5, abs=0.05)


def test_allan_rejects_long_tau():
    with pytest.raises(ValueError):
        Mx.allan_variance(np.zeros(100), 1.0, taus=[60.0])


def test_export_round_trip(tmp_path):
    e = np.random.default_rng(3).exponential(size=57)
    s = Mx.export_errors(tmp_path, e)
    assert Mx.read_summary(tmp_path / "summary.json") == s
    x, f = Mx.read_cdf(tmp_path / "cdf.csv")
    assert np.array_equal(x, np.sort(e))
    assert (x[-1], f[-1]) == (e.max(), 1.0)
    assert json.loads((tmp_path / "summary.json").read_text())["count"] == 57


def test_export_empty(tmp_path):
    assert Mx.export_errors(tmp_path, []) is None
    assert (tmp_path / "cdf.csv").read_text() == "error,cumulative_fraction\n"


def test_allan_csv_round_trip(tmp_path):
    c = Mx.allan_variance(np.random.default_rng(2).normal(size=500), 0.1)
    Mx.write_allan(tmp_path / "allan.csv", c)
    back = Mx.read_allan(tmp_path / "allan.csv")
    assert np.array_equal(back.taus, c.taus) and np.array_equal(back.adev, c.adev)


def test_pred_round_trip(tmp_path):
    g = np.random.default_rng(4)
    t, xy, h = g.random(5), g.random((5, 2)), g.random((5, 2))
    Mx.write_pred(tmp_path / "pred.csv", t, xy, h)
    t2, xy2, h2 = Mx.read_pred(tmp_path / "pred.csv")
    assert np.array_equal(t, t2) and np.array_equal(xy, xy2) and np.array_equal(h, h2)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        Mx.export_errors(blocker / "sub", [1.0])
