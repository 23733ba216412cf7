import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from absorb.impact import (BANDS, TABLE_A1, TABLE_A1_LEVELS, TABLE_A2, DReport, credible_interval,
                           d_report, hellinger, interpret_d, jaccard_index, kde, table_percentile)


def normal_hellinger(delta):
    return math.sqrt(1 - math.exp(-delta ** 2 / 8))


@pytest.fixture(scope="module")
def normals():
    r = np.random.default_rng(0)
    return r.standard_normal(100_000), r.standard_normal(100_000) + 1.0


def test_kde_matches_standard_normal(normals):
    g = kde(normals[0], 512)
    x = g.grid_points[0]
    assert np.max(np.abs(g.values - stats.norm.pdf(x))) < 0.02
    assert 0.98 <= g.integral() <= 1.02
    assert np.all(np.diff(x) > 0)
    h = g.bandwidth[0]
    assert x[0] == pytest.approx(normals[0].min() - 3 * h)
    assert x[-1] == pytest.approx(normals[0].max() + 3 * h)


def test_kde_deterministic_and_errors(normals):
    a, b = kde(normals[0][:5000]), kde(normals[0][:5000].copy())
    assert np.array_equal(a.values, b.values)
    with pytest.raises(ValueError):
        kde(np.ones(500))
    with pytest.raises(ValueError):
        kde(np.arange(50.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.1, 10), st.floats(-50, 50))
def test_kde_mean_preserved(seed, scale, loc):
    x = np.random.default_rng(seed).gamma(2.0, scale, 2000) + loc
    assert kde(x).mean()[0] == pytest.approx(x.mean(), abs=1e-3 * max(1.0, x.std()))


def test_kde_2d_integral_and_mean():
    r = np.random.default_rng(1)
    x = r.multivariate_normal([1, -2], [[1, 0.5], [0.5, 2]], 20_000)
    g = kde(x, 128)
    assert 0.98 <= g.integral() <= 1.02
    assert g.mean() == pytest.approx(x.mean(axis=0), abs=1e-3)


def test_hellinger_gaussian_oracle(normals):
    f, g = kde(normals[0]), kde(normals[1])
    assert hellinger(f, g) == pytest.approx(normal_hellinger(1.0), abs=0.02)
    assert hellinger(f, g) == hellinger(g, f)
    assert hellinger(f, f) < 1e-6


def test_hellinger_disjoint_and_dims():
    r = np.random.default_rng(2)
    u, v = kde(r.uniform(0, 1, 100_000)), kde(r.uniform(10, 11, 100_000))
    assert hellinger(u, v) >= 0.999
    with pytest.raises(ValueError):
        hellinger(u, kde(r.standard_normal((500, 2))))


def test_hellinger_triangle_and_shift():
    r = np.random.default_rng(3)
    for _ in range(5):
        locs = r.uniform(-1, 1, 3)
        gs = [kde(r.standard_normal(5000) * r.uniform(0.5, 2) + m) for m in locs]
        a, b, c = gs
        assert hellinger(a, c) <= hellinger(a, b) + hellinger(b, c) + 1e-3
    x, y = r.standard_normal(20_000), r.standard_normal(20_000) + 0.5
    base = hellinger(kde(x), kde(y))
    assert hellinger(kde(x + 7.3), kde(y + 7.3)) == pytest.approx(base, abs=1e-3)


def test_credible_interval_examples():
    r = np.random.default_rng(4)
    lo, hi = credible_interval(r.standard_normal(100_000))
    assert lo == pytest.approx(-1.96, abs=0.05) and hi == pytest.approx(1.96, abs=0.05)
    lo, hi = credible_interval(r.uniform(0, 1, 100_000))
    assert lo == pytest.approx(0.025, abs=0.01) and hi == pytest.approx(0.975, abs=0.01)
    assert credible_interval(np.full(200, 3.5)) == (3.5, 3.5)
    with pytest.raises(ValueError):
        credible_interval(np.zeros(99))
    x = r.standard_normal(1001)
    assert credible_interval(x, 0.5) == tuple(np.quantile(x, [0.25, 0.75]))


def test_jaccard_examples():
    assert jaccard_index((0, 2), (0, 2)) == 1
    assert jaccard_index((0, 1), (2, 3)) == 0
    assert jaccard_index((0, 2), (1, 3)) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        jaccard_index((1, 1), (0, 2))


@settings(max_examples=100)
@given(st.floats(-10, 10), st.floats(0.01, 10), st.floats(-10, 10), st.floats(0.01, 10))
def test_jaccard_range_and_symmetry(a0, la, b0, lb):
    a, b = (a0, a0 + la), (b0, b0 + lb)
    j = jaccard_index(a, b)
    assert 0 <= j <= 1 and j == pytest.approx(jaccard_index(b, a))


def test_interpret_d_examples():
    assert interpret_d(0.05) == ["probably no impact"]
    assert interpret_d(0.35) == ["moderate", "substantial"]
    assert interpret_d(0.70) == ["severe"]
    with pytest.raises(ValueError):
        interpret_d(1.01)
    with pytest.raises(ValueError):
        interpret_d(-0.01)


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1))
def test_interpret_d_nonempty_and_monotone(a, b):
    lo, hi = sorted((a, b))
    order = [label for label, _, _ in BANDS]
    ra = [order.index(x) for x in interpret_d(lo)]
    rb = [order.index(x) for x in interpret_d(hi)]
    assert ra and rb
    assert min(rb) >= min(ra) and max(rb) >= max(ra)


def test_reference_tables():
    assert TABLE_A1.shape == (100, 3) and TABLE_A2.shape == (9, 3)
    assert np.all(np.diff(TABLE_A1, axis=0) >= 0)
    assert list(TABLE_A1[49]) == [0.10, 0.10, 0.09]
    assert list(TABLE_A1[99]) == [0.99, 0.81, 0.72]
    assert table_percentile(0.10, "d1") == 50
    assert table_percentile(0.99, "d1") == 100
    assert table_percentile(0.0, "d1") == 3   # first three levels tie at 0.02; closest to 50 wins
    assert TABLE_A1_LEVELS[0] == 1


def test_d_report_synthetic():
    r = np.random.default_rng(5)
    a = r.standard_normal((100_000, 2))
    b = np.column_stack([r.standard_normal(100_000) + 1, r.standard_normal(100_000)])
    rep = d_report(a, b)
    assert rep.d1 == pytest.approx(normal_hellinger(1.0), abs=0.03)
    assert rep.d2 < 0.02
    assert 0 <= rep.d12 <= 1
    same = d_report(a, a)
    assert max(same.d1, same.d2, same.d12) < 0.02
    assert DReport.from_json(rep.to_json()) == rep
    assert set(json_keys(rep)) == {"d1", "d2", "d12", "bands", "ci_abs", "ci_nbc", "jaccard",
                                   "percentiles"}
    with pytest.raises(ValueError):
        d_report(a[:999], b)


def json_keys(rep):
    import json
    return json.loads(rep.to_json()).keys()


def test_grid_csv():
    g = kde(np.random.default_rng(6).standard_normal((300, 2)), 8)
    lines = g.to_csv().splitlines()
    assert lines[0] == "x,y,density" and len(lines) == 65
