from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conattsd.errors import ContractError
from conattsd.metrics import compute_metrics


def _pct(x):
    scaled = x * 10000
    return (2 * scaled.numerator + scaled.denominator) // (2 * scaled.denominator) / 100


def brute_force(pred, gold):
    """Independent confusion-count oracle in exact rationals, weighted by support."""
    n = len(gold)
    totals = [Fraction(0)] * 3
    per_class = {}
    for c in (0, 1):
        tp = sum(1 for p, g in zip(pred, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gold) if p != c and g == c)
        precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
        support = tp + fn
        per_class[c] = (precision, recall, f1, support)
        for k, v in enumerate((precision, recall, f1)):
            totals[k] += v * support
    return [_pct(t / n) for t in totals], per_class


def test_perfect_predictions():
    m = compute_metrics([0, 1, 1, 0, 1], [0, 1, 1, 0, 1])
    assert (m.precision, m.recall, m.f1) == (100.0, 100.0, 100.0)
    assert m.confusion == ((2, 0), (0, 3))


def test_hand_computed_example():
    m = compute_metrics([1, 0, 0, 0], [1, 1, 0, 0])
    assert m.per_class[1]["precision"] == 100.0 and m.per_class[1]["recall"] == 50.0
    assert m.per_class[1]["f1"] == 66.67
    assert m.per_class[0]["precision"] == 66.67 and m.per_class[0]["f1"] == 80.0
    assert m.f1 == 73.33
    assert m.confusion == ((2, 0), (1, 1)) and m.support == (2, 2)
    assert m.accuracy == 75.0


def test_zero_division_is_zero():
    m = compute_metrics([0, 0, 0], [1, 1, 0])
    assert m.per_class[1] == {"precision": 0.0, "recall": 0.0, "f1": 0.0, "support": 2}
    m = compute_metrics([1, 1], [1, 1])
    assert m.per_class[0]["precision"] == 0.0 and m.f1 == 100.0


def test_input_errors():
    with pytest.raises(ContractError):
        compute_metrics([], [])
    with pytest.raises(ContractError):
        compute_metrics([0, 1], [0])
    with pytest.raises(ContractError):
        compute_metrics([0, 2], [0, 1])


def test_matches_brute_force_on_1000_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        gold = rng.integers(0, 2, n).tolist()
        pred = rng.integers(0, 2, n).tolist()
        m = compute_metrics(pred, gold)
        want, per_class = brute_force(pred, gold)
        assert [m.precision, m.recall, m.f1] == want
        for c in (0, 1):
            assert m.per_class[c]["support"] == per_class[c][3]
            assert m.per_class[c]["f1"] == _pct(per_class[c][2])
        assert sum(map(sum, m.confusion)) == n


def test_ties_round_half_up():
    # class-1 precision is 1/32 = 3.125%
    m = compute_metrics([1] * 32, [1] + [0] * 31)
    assert m.per_class[1]["precision"] == 3.13
    assert m.per_class[0]["precision"] == 0.0
    # weighted F1 is exactly 485/8 = 60.625%
    pred = [0] * 9 + [1] * 9 + [0] * 5 + [1] * 13
    gold = [0] * 18 + [1] * 18
    assert compute_metrics(pred, gold).f1 == 60.63


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30), st.randoms())
def test_permutation_invariance(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = compute_metrics([p for p, _ in pairs], [g for _, g in pairs])
    b = compute_metrics([p for p, _ in shuffled], [g for _, g in shuffled])
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_values_are_percentages(pairs):
    m = compute_metrics([p for p, _ in pairs], [g for _, g in pairs])
    for v in (m.precision, m.recall, m.f1, m.accuracy):
        assert 0 <= v <= 100 and round(v, 2) == v
    assert m.n == len(pairs)
    # weighted recall is accuracy
    assert m.recall == m.accuracy
