import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from langshape import metrics


def brute_ranks(x):
    return [1 + sum(v < xi for v in x) + 0.5 * (sum(v == xi for v in x) - 1) for xi in x]


def brute_spearman(x, y):
    rx, ry = brute_ranks(x), brute_ranks(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def student_sf(t, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    pdf = lambda u: c * (1 + u * u / df) ** (-(df + 1) / 2)
    val, _ = integrate.quad(pdf, 0, abs(t), epsabs=1e-14, epsrel=1e-13)
    return 0.5 - val


def brute_welch(a, b):
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, df, 2 * student_sf(t, df)


def brute_auc(points):
    total = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        total += (x1 - x0) * (y0 + y1) / 2
    return total


def test_rankdata_averages_ties():
    assert metrics.rankdata([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


def test_spearman_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = int(rng.integers(3, 25))
        x = rng.integers(0, 6, n).astype(float)  # plenty of ties
        y = rng.normal(size=n)
        if len(set(x)) < 2:
            continue
        assert abs(metrics.spearman(x, y) - brute_spearman(list(x), list(y))) < 1e-10


def test_spearman_edge_cases():
    assert metrics.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(metrics.spearman([1, 1, 1], [1, 2, 3]))
    with pytest.raises(ValueError):
        metrics.spearman([1, 2], [1])


def test_welch_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(60):
        a = rng.normal(rng.normal(), rng.uniform(0.2, 3), int(rng.integers(2, 15)))
        b = rng.normal(rng.normal(), rng.uniform(0.2, 3), int(rng.integers(2, 15)))
        res = metrics.welch_t_test(a, b)
        t, df, p = brute_welch(list(a), list(b))
        assert abs(res.t - t) < 1e-10 and abs(res.df - df) < 1e-10 * max(1, df)
        assert abs(res.p - p) < 1e-10


def test_welch_degenerate_inputs():
    res = metrics.welch_t_test([2.0, 2.0], [2.0, 2.0, 2.0])
    assert not res.defined
    assert metrics.compare([1.0, 1.0], [1.0, 1.0]) == "none"
    with pytest.raises(ValueError):
        metrics.welch_t_test([1.0], [1.0, 2.0])
    huge = metrics.welch_t_test(np.arange(100.0) + 1e6, np.arange(100.0))
    assert 0 < huge.p <= 1e-300


def test_compare_directions():
    hi = np.array([10.0, 11, 12, 11, 10])
    lo = np.array([1.0, 2, 1, 2, 1])
    assert metrics.compare(hi, lo) == "improvement"
    assert metrics.compare(lo, hi) == "deterioration"


def test_auc_against_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(60):
        n = int(rng.integers(2, 30))
        x = np.concatenate([[0], np.cumsum(rng.integers(1, 500, n - 1))])
        y = np.cumsum(rng.integers(0, 5, n))
        pts = list(zip(x.tolist(), y.tolist()))
        assert abs(metrics.auc(pts) - brute_auc(pts)) < 1e-10 * max(1.0, brute_auc(pts))


def test_auc_of_a_linear_curve():
    assert metrics.auc([(0, 0), (10, 10)]) == 50.0
    with pytest.raises(ValueError):
        metrics.auc([(0, 0)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
def test_ranks_are_a_permutation_average(xs):
    r = metrics.rankdata(xs)
    assert np.isclose(r.sum(), len(xs) * (len(xs) + 1) / 2)
    assert np.allclose(r, brute_ranks(xs))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=20))
def test_spearman_is_bounded_and_symmetric(pairs):
    x, y = zip(*pairs)
    rho = metrics.spearman(x, y)
    if not math.isnan(rho):
        assert -1 <= rho <= 1
        assert rho == pytest.approx(metrics.spearman(y, x), abs=1e-12)


def test_confidence_band_uses_step_interpolation():
    curves = [[(0, 0), (10, 2), (20, 5)], [(0, 0), (10, 4), (20, 5)]]
    grid, mean, half = metrics.confidence_band(curves, np.array([0, 5, 10, 15, 20]))
    assert mean.tolist() == [0, 0, 3, 3, 5]
    sd = np.std([2, 4], ddof=1)
    assert np.isclose(half[2], 1.96 * sd / np.sqrt(2))
    assert half[0] == half[4] == 0


def test_rank_aggregation_and_leave_one_out():
    table = {
        "A": {"t1": 10.0, "t2": 1.0, "t3": 5.0},
        "B": {"t1": 5.0, "t2": 2.0, "t3": 6.0},
        "C": {"t1": 1.0, "t2": 3.0, "t3": 1.0},
    }
    ranks = metrics.mean_ranks(table)
    assert ranks == pytest.approx({"A": 2.0, "B": 5 / 3, "C": 7 / 3})
    assert metrics.rank_aggregate(table) == "B"
    sel = metrics.leave_one_out_selection(table)
    assert sel == {"t1": "B", "t2": "A", "t3": "A"}  # t2 held out: A and B tie at 1.5
    tie = {"X": {"t": 1.0}, "W": {"t": 1.0}}
    assert metrics.rank_aggregate(tie) == "W"
    assert metrics.leave_one_out_selection({"only": {"t1": 1.0, "t2": 2.0}}) == {"t1": "only", "t2": "only"}


def test_action_correlations_signs():
    rng = np.random.default_rng(0)
    F = rng.dirichlet(np.ones(18), size=200)
    p = F[:, 5] + 0.01 * rng.normal(size=200)
    rho = metrics.action_correlations(F, p)
    assert len(rho) == 8 and rho["DOWN"] > 0.9
    rows = metrics.correlation_report({("task", "text"): (F, p)})
    assert rows[0]["DOWN"] == rho["DOWN"] and rows[0]["task"] == "task"
