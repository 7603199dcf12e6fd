import csv
import itertools
import math

import numpy as np
import pytest

from mirmodel.model import LOG2PI
from mirmodel.select import ebic, empty_loglik, fit_subset_loglik, select_subsets

from .conftest import make_data


def test_ebic_formula():
    assert ebic(-100.0, 2, 10, 5, 8, 2.0) == pytest.approx(200 + 2 * math.log(50) + 4 * math.log(8))
    assert ebic(-100.0, 0, 10, 5, 8) == 200.0
    with pytest.raises(ValueError):
        ebic(0.0, 1, 2, 2, 2, -1.0)


def test_empty_loglik_closed_form():
    Y = np.array([[1.0, -1.0], [2.0, 0.0]])
    s2 = 6.0 / 4
    assert empty_loglik(Y) == pytest.approx(-2 * (LOG2PI + 1 + math.log(s2)))


def selection_data(seed=3):
    lam = (0.3, 0.3, 0.0, 0.0)
    return make_data(n=30, T=20, d=4, lam=lam, seed=seed, density=5 / 30)


def test_exhaustive_table_is_complete_and_consistent():
    data = selection_data()
    res = select_subsets(data, q_max=4, strategy="exhaustive")
    subsets = {f.subset for f in res.per_subset_table}
    assert subsets == {s for m in range(5) for s in itertools.combinations(range(4), m)}
    for f in res.per_subset_table:
        assert f.ebic == pytest.approx(ebic(f.loglik, f.size, data.n, data.T, data.d, 2.0))
    assert res.best_subset == min(res.per_subset_table, key=lambda f: f.ebic).subset


def test_exhaustive_matches_direct_fits():
    data = selection_data()
    res = select_subsets(data, q_max=2, strategy="exhaustive")
    for f in res.per_subset_table:
        ll, ok = fit_subset_loglik(data, f.subset)
        assert ok and ll == pytest.approx(f.loglik, rel=1e-12)


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_bound_equals_exhaustive(seed):
    data = selection_data(seed)
    a = select_subsets(data, q_max=4, strategy="exhaustive")
    b = select_subsets(data, q_max=4, strategy="bound")
    assert a.best_subset == b.best_subset
    assert a.ebic_value == pytest.approx(b.ebic_value, rel=1e-12)


def test_selection_recovers_truth_and_greedy_agrees():
    data = selection_data()
    res = select_subsets(data, strategy="exhaustive")
    assert res.best_subset == (0, 1)
    assert select_subsets(data, strategy="greedy").best_subset == (0, 1)


def test_gamma_monotone_subset_size():
    data = selection_data(6)
    small = select_subsets(data, gamma=2.0, q_max=4)
    large = select_subsets(data, gamma=0.0, q_max=4)
    assert len(large.best_subset) >= len(small.best_subset)


def test_nested_likelihoods_increase():
    data = selection_data()
    res = select_subsets(data, q_max=4, strategy="exhaustive")
    ll = {f.subset: f.loglik for f in res.per_subset_table}
    for s, v in ll.items():
        for k in s:
            parent = tuple(x for x in s if x != k)
            assert v >= ll[parent] - 1e-6 * abs(v)


def test_csv_output(tmp_path):
    data = selection_data()
    res = select_subsets(data, q_max=2)
    path = tmp_path / "sel.csv"
    res.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert rows[0]["subset"] == "{}"
    assert {r["subset"] for r in rows} >= {"{1}", "{1,2}"}


def test_qmax_validation():
    with pytest.raises(ValueError):
        select_subsets(selection_data(), q_max=9)
    with pytest.raises(ValueError):
        select_subsets(selection_data(), strategy="random")
