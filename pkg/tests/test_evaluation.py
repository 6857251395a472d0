import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_model, random_model
from red_density.evaluation import (
    RankedScores,
    anomaly_scores,
    average_precision,
    evaluate,
    mean_average_precision,
    ndcg,
    paired_t_test,
    pr_curve,
    ranking_from_labels,
    test_nll_report,
)
from red_density.exceptions import DegenerateTestError
from red_density.numerics import make_rng

ANAN = [1, 0, 1, 0]


def brute_force_ap(ranked):
    """Exact rational enumeration of precision@r * recall increment."""
    pos = sum(ranked)
    total, tp, prev = Fraction(0), 0, Fraction(0)
    for r, lab in enumerate(ranked, 1):
        tp += lab
        rec = Fraction(tp, pos)
        total += Fraction(tp, r) * (rec - prev)
        prev = rec
    return total


def test_pr_curve_anan():
    c = pr_curve(ranking_from_labels(ANAN))
    np.testing.assert_allclose(c.precision, [1, 0.5, 2 / 3, 0.5], atol=1e-15)
    np.testing.assert_allclose(c.recall, [0.5, 0.5, 1, 1], atol=1e-15)


def test_pr_curve_edge_cases():
    c = pr_curve(ranking_from_labels([1, 1, 1]))
    np.testing.assert_array_equal(c.precision, 1.0)
    np.testing.assert_allclose(c.recall, [1 / 3, 2 / 3, 1])
    c = pr_curve(ranking_from_labels([1, 1, 0, 0]))
    np.testing.assert_array_equal(c.precision[:2], 1.0)
    with pytest.raises(ValueError):
        pr_curve(ranking_from_labels([0, 0]))


def test_average_precision_anan():
    assert average_precision(ranking_from_labels(ANAN)) == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision(ranking_from_labels([1, 1, 0, 0, 0])) == 1.0


@pytest.mark.parametrize("n", [3, 5, 7])
def test_average_precision_matches_enumeration(n):
    for ranked in itertools.product([0, 1], repeat=n):
        if sum(ranked) == 0:
            continue
        ap = average_precision(ranking_from_labels(list(ranked)))
        assert ap == pytest.approx(float(brute_force_ap(ranked)), abs=1e-12)


def test_ap_equals_area_under_step_curve():
    rng = make_rng(0)
    labels = (rng.random(200) < 0.1).astype(int)
    rs = RankedScores.from_scores(rng.standard_normal(200), labels)
    c = pr_curve(rs)
    area = 0.0
    for i in range(len(c.recall)):
        left = c.recall[i - 1] if i else 0.0
        area += (c.recall[i] - left) * c.precision[i]
    assert average_precision(rs) == pytest.approx(area, abs=1e-12)
    assert np.all(np.diff(c.recall) >= 0) and c.recall[-1] == 1.0


def test_ndcg():
    assert ndcg(ranking_from_labels(ANAN)) == pytest.approx(1.5 / (1 + 1 / math.log2(3)), abs=1e-12)
    assert ndcg(ranking_from_labels(ANAN)) == pytest.approx(0.919720789148187619, abs=1e-12)
    assert ndcg(ranking_from_labels([1, 1, 0])) == 1.0


def test_map():
    assert mean_average_precision([0.8, 0.6]) == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        mean_average_precision([])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_invariant_to_monotone_transform(seed):
    rng = make_rng(seed)
    s = rng.standard_normal(50)
    labels = (rng.random(50) < 0.2).astype(int)
    labels[0] = 1
    a = RankedScores.from_scores(s, labels)
    b = RankedScores.from_scores(np.exp(3 * s) - 7, labels)
    assert average_precision(a) == average_precision(b)
    assert ndcg(a) == ndcg(b)


def test_random_ranking_ap_expectation():
    n, pos = 200, 20
    rng = make_rng(1)
    labels = np.zeros(n, int)
    labels[:pos] = 1
    aps = [average_precision(RankedScores.from_scores(rng.random(n), labels)) for _ in range(400)]
    se = np.std(aps, ddof=1) / np.sqrt(len(aps))
    # E[prec@k * rel_k] = (pos/n)(1/k)(1 + (k-1)(pos-1)/(n-1)); sum over k, divide by pos
    q = (pos - 1) / (n - 1)
    harmonic = sum(1 / k for k in range(1, n + 1))
    expected = (harmonic * (1 - q) + n * q) / n
    assert expected > pos / n
    assert abs(np.mean(aps) - expected) < 3 * se


def test_ties_keep_index_order():
    rs = RankedScores.from_scores([1.0, 0.5, 1.0, 0.5], [0, 1, 1, 0])
    np.testing.assert_array_equal(rs.order, [1, 3, 0, 2])


def test_anomaly_scores_rank_outlier_first():
    m = identity_model(3)
    X = make_rng(2).standard_normal((100, 3))
    X[37] = [10.0, 0.0, 0.0]
    rs = anomaly_scores(m, X)
    assert rs.order[0] == 37
    perm = make_rng(3).permutation(100)
    rs2 = anomaly_scores(m, X[perm])
    np.testing.assert_array_equal(np.sort(rs2.scores), np.sort(rs.scores))


def test_paired_t_test():
    t, p = paired_t_test([1, 2, 3], [2, 3, 5])
    assert t == pytest.approx(-4.0, abs=1e-12)
    # dof = 2 closed form: p = 1 - |t| / sqrt(2 + t^2)
    assert p == pytest.approx(1 - 4 / math.sqrt(18), abs=1e-12)
    t2, p2 = paired_t_test([2, 3, 5], [1, 2, 3])
    assert t2 == -t and p2 == p
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [1, 2, 3])


def test_paired_t_test_against_quadrature():
    from scipy import integrate, special

    rng = make_rng(4)
    a, b = rng.standard_normal(12), rng.standard_normal(12) + 0.4
    t, p = paired_t_test(a, b)
    nu = 11
    c = special.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * special.gamma(nu / 2))
    tail, _ = integrate.quad(lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2), abs(t), np.inf, epsabs=1e-14)
    assert p == pytest.approx(2 * tail, abs=1e-10)


def test_test_nll_report():
    m = random_model(d=2, seed=5)
    X = make_rng(6).standard_normal((10, 2))
    assert test_nll_report(m, X)[0] == pytest.approx(m.nll(X), abs=1e-14)
    labels = np.array([0, 1] * 5)
    assert test_nll_report(m, X, labels)[0] == pytest.approx(m.nll(X[labels == 0]), abs=1e-14)
    with pytest.raises(ValueError):
        test_nll_report(m, X, np.ones(10, int))


def test_evaluate_report_sections():
    m = identity_model(2)
    X = make_rng(7).standard_normal((30, 2))
    assert evaluate(m, X).anomaly is None
    labels = np.zeros(30, int)
    labels[3] = 1
    rep = evaluate(m, X, labels)
    assert set(rep.anomaly) >= {"average_precision", "ndcg"}
    assert rep.n_nll_rows == 29
