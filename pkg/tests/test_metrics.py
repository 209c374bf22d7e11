import numpy as np
import pytest
from scipy import stats

from qelab.metrics import (
    UnknownLabel,
    ZeroVariance,
    average_ranks,
    macro_prf,
    pearson,
    spearman,
)


def textbook_pearson(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxy = sum(a * b for a, b in zip(x, y))
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    return (n * sxy - sx * sy) / np.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))


def brute_force_ranks(values):
    out = []
    for v in values:
        smaller = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        out.append(smaller + (equal + 1) / 2.0)
    return out


def counting_macro_prf(pred, gold, classes):
    f_sum = p_sum = r_sum = 0.0
    for c in classes:
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        p_sum, r_sum, f_sum = p_sum + p, r_sum + r, f_sum + f
    n = len(classes)
    return f_sum / n, p_sum / n, r_sum / n


def test_pearson_positive_affine():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == 1.0


def test_pearson_negation():
    x = np.arange(10.0)
    assert pearson(x, -x) == -1.0


def test_pearson_matches_textbook_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        x = rng.normal(size=100)
        y = rng.normal(size=100) + 0.3 * x
        assert abs(pearson(x, y) - textbook_pearson(list(x), list(y))) <= 1e-12
        assert abs(pearson(x, y) - stats.pearsonr(x, y)[0]) <= 1e-10


def test_pearson_zero_variance():
    with pytest.raises(ZeroVariance):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_pearson_affine_invariance_and_symmetry():
    rng = np.random.default_rng(1)
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    r = pearson(x, y)
    assert abs(pearson(3.5 * x + 2.0, y) - r) <= 1e-12
    assert abs(pearson(y, x) - r) <= 1e-12


def test_spearman_monotone_transform():
    rng = np.random.default_rng(2)
    x = rng.normal(size=40)
    assert spearman(x, np.exp(x)) == 1.0
    assert spearman(np.argsort(np.argsort(x)).astype(float), x) == 1.0


def test_spearman_reversed():
    x = np.arange(20.0)
    assert spearman(x, x[::-1]) == -1.0


def test_spearman_ties_match_brute_force():
    x = [1.0, 2.0, 2.0, 3.0]
    y = [1.0, 3.0, 2.0, 4.0]
    expected = textbook_pearson(brute_force_ranks(x), brute_force_ranks(y))
    assert abs(spearman(x, y) - expected) <= 1e-12


def test_spearman_random_with_ties_vs_scipy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.integers(0, 6, size=60).astype(float)
        y = x + rng.integers(0, 4, size=60)
        assert np.array_equal(average_ranks(x), np.array(brute_force_ranks(list(x))))
        assert abs(spearman(x, y) - stats.spearmanr(x, y)[0]) <= 1e-10


def test_spearman_invariant_under_monotone_transform_of_either_argument():
    rng = np.random.default_rng(4)
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    base = spearman(x, y)
    assert abs(spearman(np.tanh(x), y) - base) <= 1e-12
    assert abs(spearman(x, y**3) - base) <= 1e-12


def test_macro_perfect_predictions():
    gold = ["a", "b", "c", "d", "e"] * 4
    assert macro_prf(gold, gold, "abcde") == (1.0, 1.0, 1.0)


def test_macro_degenerate_hand_case():
    classes = list("ABCDE")
    gold = ["A"] * 7 + ["B"] * 4 + ["C"] * 3 + ["D"] * 3 + ["E"] * 3
    pred = ["A"] * 20
    f, p, r = macro_prf(pred, gold, classes)
    assert abs(p - 0.07) <= 1e-12
    assert abs(r - 0.20) <= 1e-12
    assert abs(f - (2 * 0.35 * 1.0 / 1.35) / 5) <= 1e-12
    assert round(f, 4) == 0.1037


def test_macro_binary_all_ok():
    gold = ["OK"] * 6 + ["BAD"] * 2
    pred = ["OK"] * 8
    f, p, r = macro_prf(pred, gold, ("OK", "BAD"))
    assert r == (6 / 6) / 2


def test_macro_single_class_on_balanced_gold_is_one_over_c():
    classes = list("abcde")
    gold = classes * 10
    pred = ["c"] * 50
    _, _, r = macro_prf(pred, gold, classes)
    assert r == 0.2


def test_macro_matches_counting_oracle():
    rng = np.random.default_rng(5)
    classes = list("xyz")
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        gold = [classes[i] for i in rng.integers(0, 3, n)]
        pred = [classes[i] for i in rng.integers(0, 3, n)]
        ours = macro_prf(pred, gold, classes)
        ref = counting_macro_prf(pred, gold, classes)
        assert max(abs(a - b) for a, b in zip(ours, ref)) <= 1e-12


def test_macro_unknown_label():
    with pytest.raises(UnknownLabel):
        macro_prf(["a", "q"], ["a", "a"], ("a", "b"))
    with pytest.raises(UnknownLabel):
        macro_prf(["a", "a"], ["a", "q"], ("a", "b"))


def test_macro_scores_within_unit_interval():
    rng = np.random.default_rng(6)
    classes = ("OK", "BAD")
    for _ in range(100):
        n = int(rng.integers(1, 40))
        gold = [classes[i] for i in rng.integers(0, 2, n)]
        pred = [classes[i] for i in rng.integers(0, 2, n)]
        for v in macro_prf(pred, gold, classes):
            assert 0.0 <= v <= 1.0
