import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from fsidx.sketch import ErrorReport, QuantileSketch, SketchError, error_metrics, exact_quantile
from oracles import nearest_rank

SIX = (0.10, 0.25, 0.50, 0.75, 0.90, 0.99)


def test_gamma_from_alpha():
    s = QuantileSketch(alpha=0.01)
    assert s.gamma == pytest.approx(1.01 / 0.99)


def test_insert_zero_counts_separately():
    s = QuantileSketch()
    s.insert(0)
    assert s.zero_count == 1
    assert s.count == 1
    assert s.buckets == {}


def test_insert_negative_rejected():
    s = QuantileSketch()
    with pytest.raises(SketchError):
        s.insert(-1)


def test_exact_quantile_singleton():
    assert exact_quantile([5], 0.5) == 5


def test_exact_quantile_nearest_rank_definition():
    assert exact_quantile([1, 2, 3, 4], 0.5) == 2


def test_exact_quantile_empty_rejected():
    with pytest.raises(SketchError):
        exact_quantile([], 0.5)


def test_exact_quantile_matches_independent_sort():
    rng = random.Random(11)
    values = [rng.randrange(1, 10**6) for _ in range(1001)]
    for q in SIX:
        assert exact_quantile(values, q) == nearest_rank(values, q)


def test_quantile_singleton_within_alpha():
    s = QuantileSketch(alpha=0.01)
    s.insert(42)
    for q in (0.0, 0.1, 0.5, 0.99, 1.0):
        assert abs(s.quantile(q) - 42) / 42 <= 0.01


def test_quantile_empty_rejected():
    with pytest.raises(SketchError):
        QuantileSketch().quantile(0.5)


def test_median_of_1_to_1000_within_one_percent():
    s = QuantileSketch(alpha=0.01)
    for v in range(1, 1001):
        s.insert(v)
    exact = exact_quantile(list(range(1, 1001)), 0.5)
    assert abs(s.quantile(0.5) - exact) / exact <= 0.01


def test_uniform_relative_error_guarantee():
    s = QuantileSketch(alpha=0.01)
    values = list(range(1, 100_001))
    for v in values:
        s.insert(v)
    for q in SIX:
        exact = exact_quantile(values, q)
        assert abs(s.quantile(q) - exact) / exact <= 0.01


def test_lognormal_relative_error_guarantee():
    rng = random.Random(3)
    values = [math.exp(rng.gauss(8, 2)) for _ in range(10_000)]
    s = QuantileSketch(alpha=0.01)
    for v in values:
        s.insert(v)
    for q in SIX:
        exact = exact_quantile(values, q)
        assert abs(s.quantile(q) - exact) / abs(exact) <= 0.01


def test_relative_error_on_100_random_datasets():
    rng = random.Random(99)
    for trial in range(100):
        n = rng.randrange(10, 2000)
        scale = 10 ** rng.randrange(0, 7)
        values = [rng.random() * scale + 1e-6 for _ in range(n)]
        s = QuantileSketch(alpha=0.01)
        for v in values:
            s.insert(v)
        for q in SIX:
            exact = exact_quantile(values, q)
            assert abs(s.quantile(q) - exact) / exact <= 0.01, (trial, q)


def test_merge_identity_element():
    s = QuantileSketch()
    for v in (1, 5, 9, 0):
        s.insert(v)
    merged = s.merge(QuantileSketch())
    assert merged == s


def test_merge_equals_single_sketch_over_union():
    rng = random.Random(7)
    a, b, together = QuantileSketch(), QuantileSketch(), QuantileSketch()
    for _ in range(5000):
        v = rng.randrange(0, 10**9)
        (a if rng.random() < 0.5 else b).insert(v)
        together.insert(v)
    merged = a.merge(b)
    assert merged == together
    for q in SIX:
        assert merged.quantile(q) == together.quantile(q)


def test_merge_commutative_bucket_for_bucket():
    rng = random.Random(13)
    a, b = QuantileSketch(), QuantileSketch()
    for _ in range(1000):
        a.insert(rng.randrange(1, 10**6))
        b.insert(rng.randrange(1, 10**6))
    ab, ba = a.merge(b), b.merge(a)
    assert ab.buckets == ba.buckets
    assert ab == ba


def test_merge_associative():
    rng = random.Random(17)
    sketches = []
    for _ in range(3):
        s = QuantileSketch()
        for _ in range(500):
            s.insert(rng.randrange(1, 10**6))
        sketches.append(s)
    a, b, c = sketches
    assert a.merge(b).merge(c) == a.merge(b.merge(c))


def test_merge_alpha_mismatch_rejected():
    with pytest.raises(SketchError):
        QuantileSketch(alpha=0.01).merge(QuantileSketch(alpha=0.02))


def test_mean_is_exact():
    s = QuantileSketch()
    values = [3, 7, 11, 10**12, 0]
    for v in values:
        s.insert(v)
    assert s.mean() == sum(values) / len(values)
    assert s.sum == sum(values)


def test_bounded_memory():
    rng = random.Random(23)
    s = QuantileSketch(alpha=0.01)
    lo, hi = 1.0, 1.0
    for _ in range(50_000):
        v = rng.random() * 10**9 + 0.001
        lo, hi = min(lo, v), max(hi, v)
        s.insert(v)
    bound = math.ceil(math.log(hi / lo) / math.log(s.gamma)) + 1
    assert s.bucket_count <= bound


def test_collapse_cap_bounds_bucket_count():
    s = QuantileSketch(alpha=0.01, max_buckets=64)
    rng = random.Random(29)
    for _ in range(20_000):
        s.insert(rng.random() * 10**12 + 1e-9)
    assert s.bucket_count <= 64
    # Upper quantiles stay accurate; the collapsed low end may not.
    assert s.quantile(0.99) <= s.max


def test_serialize_round_trip_empty():
    s = QuantileSketch(alpha=0.02)
    assert QuantileSketch.deserialize(s.serialize()) == s


def test_serialize_round_trip_bucket_for_bucket():
    rng = random.Random(31)
    s = QuantileSketch()
    for _ in range(10_000):
        s.insert(rng.randrange(0, 10**9))
    restored = QuantileSketch.deserialize(s.serialize())
    assert restored == s
    assert restored.buckets == s.buckets
    assert restored.sum == s.sum and restored.min == s.min and restored.max == s.max


def test_serialize_truncated_rejected():
    s = QuantileSketch()
    for v in (1, 2, 3):
        s.insert(v)
    payload = s.serialize()
    with pytest.raises(SketchError):
        QuantileSketch.deserialize(payload[:-3])
    with pytest.raises(SketchError):
        QuantileSketch.deserialize(payload + b"x")


@settings(max_examples=50)
@given(st.lists(st.integers(min_value=0, max_value=10**12), min_size=1, max_size=300))
def test_serialize_round_trip_property(values):
    s = QuantileSketch()
    for v in values:
        s.insert(v)
    assert QuantileSketch.deserialize(s.serialize()) == s


def test_error_metrics_zero_when_exact():
    values = list(range(1, 101))
    estimates = {q: exact_quantile(values, q) for q in SIX}
    summary = error_metrics(estimates, values, SIX)
    for cell in summary["per_quantile"].values():
        assert cell["value_error_mean"] == 0
        assert cell["rank_error_mean"] == 0


def test_error_metrics_hand_computed_rank_error():
    # values 1..100, q=0.5: estimate 51 sits at rank 51, expected rank 50.
    values = list(range(1, 101))
    summary = error_metrics({0.5: 51}, values, (0.5,))
    assert summary["per_quantile"][0.5]["rank_error_mean"] == pytest.approx(0.01)
    assert summary["per_quantile"][0.5]["value_error_mean"] == pytest.approx(1 / 50)


def test_error_metrics_flags_zero_exact_quantile():
    values = [0, 0, 0, 5]
    summary = error_metrics({0.25: 0.0}, values, (0.25,))
    assert summary["flagged_zero_cells"] == 1
    assert summary["per_quantile"][0.25]["value_error_mean"] is None


def test_error_report_mean_relative_error_within_alpha():
    rng = random.Random(41)
    report = ErrorReport(SIX)
    for _ in range(30):
        values = [rng.randrange(1, 10**7) for _ in range(rng.randrange(100, 1000))]
        s = QuantileSketch(alpha=0.01)
        for v in values:
            s.insert(v)
        report.add({q: s.quantile(q) for q in SIX}, values)
    summary = report.summary()
    assert summary["value_error"]["mean"] <= 0.01
    assert summary["rank_error"]["max_q"] <= 1.0
