from __future__ import annotations

import csv
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import record
from failmode.evaluator import RecognitionCounts
from failmode.metrics import (
    Regime,
    as_fraction,
    classify_failure_modes,
    concept_profiles,
    diversity,
    format_pct,
    independence_baseline,
    jaccard,
    lift,
    lift_table,
    max_baseline,
    regime_for,
    summarize,
    transfer_report,
    write_csv,
)

TAU = Fraction(3, 5)


# -- naive references: plain loops, no shared helpers ------------------------------


def naive_summary(records, tau):
    fms = []
    for r in records:
        if Fraction(r.failures, r.m) >= tau and r.concepts not in fms:
            fms.append(r.concepts)
    pfm = Fraction(len(fms), len(records))
    mfr = Fraction(sum(r.failures for r in records), sum(r.m for r in records))
    div = None
    if len(fms) >= 2:
        total, count = Fraction(0), 0
        for i in range(len(fms)):
            for j in range(i + 1, len(fms)):
                inter = len([c for c in fms[i] if c in fms[j]])
                union = len(set(fms[i]) | set(fms[j]))
                total += 1 - Fraction(inter, union)
                count += 1
        div = total / count
    return pfm, mfr, div


def naive_F(records, concept):
    vals = [Fraction(r.failures, r.m) for r in records if concept in r.concepts]
    return sum(vals, Fraction(0)) / len(vals), len(vals)


def naive_lift(records, a, b):
    fa, _ = naive_F(records, a)
    fb, _ = naive_F(records, b)
    both = [Fraction(r.failures, r.m) for r in records if a in r.concepts and b in r.concepts]
    observed = sum(both, Fraction(0)) / len(both)
    return observed - (fa + fb - fa * fb)


@st.composite
def record_fixtures(draw):
    ids = list("abcdef")
    n = draw(st.integers(1, 50))
    sets = draw(st.lists(st.frozensets(st.sampled_from(ids), min_size=1, max_size=4), min_size=n, max_size=n, unique=True))
    m = draw(st.sampled_from([5, 10, 20]))
    fails = draw(st.lists(st.integers(0, m), min_size=n, max_size=n))
    return [record(s, f, m=m) for s, f in zip(sets, fails)]


@settings(max_examples=80, deadline=None)
@given(records=record_fixtures())
def test_summary_matches_naive(records):
    s = summarize(records, TAU)
    pfm, mfr, div = naive_summary(records, TAU)
    assert (s.pfm, s.mfr, s.div) == (pfm, mfr, div)
    assert s.pfm * s.n_sets == s.n_failure_modes
    assert 0 <= s.pfm <= 1 and 0 <= s.mfr <= 1


@settings(max_examples=60, deadline=None)
@given(records=record_fixtures())
def test_profiles_and_lift_match_naive(records):
    for p in concept_profiles(records, n_min=1):
        assert (p.F, p.n) == naive_F(records, p.concept)
    for e in lift_table(records, n_min=1):
        assert e.lift == naive_lift(records, *e.pair)
        assert e.lift == e.observed - e.baseline


@pytest.mark.parametrize("failures, included", [(3, True), (2, False), (5, True)])
def test_threshold_boundary_is_inclusive(failures, included):
    assert (frozenset("a") in classify_failure_modes([record("a", failures)], 0.6)) is included


def test_fr_just_below_threshold_is_excluded():
    assert classify_failure_modes([record("a", 59, m=100)], 0.6) == set()


def test_failure_mode_count_is_monotone_in_tau():
    recs = [record(c, f) for c, f in zip("abcdef", range(6))]
    counts = [len(classify_failure_modes(recs, t)) for t in (0.2, 0.4, 0.6, 0.8, 1.0)]
    assert counts == sorted(counts, reverse=True)


@pytest.mark.parametrize(
    "modes, expected",
    [([{"a", "b"}, {"a", "b"}], Fraction(0)), ([{"a"}, {"b"}], Fraction(1)), ([{"a"}], None), ([], None),
     ([{"a", "b"}, {"b", "c"}], Fraction(2, 3))],
)
def test_diversity(modes, expected):
    assert diversity([frozenset(m) for m in modes]) == expected


def test_jaccard_and_fraction_helpers():
    assert jaccard({"a"}, {"a", "b"}) == Fraction(1, 2)
    assert jaccard(set(), set()) == 1
    assert as_fraction(0.1) == Fraction(1, 10)
    assert as_fraction("0.354") == Fraction(354, 1000)


def test_recognition_rate_arithmetic():
    assert RecognitionCounts(8, 10, 6, 10).rate == Fraction(7, 10)
    assert RecognitionCounts(0, 0, 0, 0).rate is None


@pytest.mark.parametrize(
    "R, regime",
    [("0.976", Regime.REASONING), ("0.7", Regime.REASONING), ("0.699", Regime.MIXED),
     ("0.5", Regime.MIXED), ("0.3", Regime.RECOGNITION), ("0.209", Regime.RECOGNITION)],
)
def test_regime_thresholds(R, regime):
    assert regime_for(Fraction(R)) is regime


def test_profiles_support_filter_and_recognition():
    recs = [record({"a", "b"}, 3)] * 1 + [record({"a", f"x{i}"}, 1) for i in range(10)]
    log = {"a": RecognitionCounts(8, 10, 6, 10)}
    profiles = {p.concept: p for p in concept_profiles(recs, log)}
    assert set(profiles) == {"a"}  # b and x_i have fewer than 10 records
    a = profiles["a"]
    assert a.n == 11 and a.R == Fraction(7, 10) and a.regime is Regime.REASONING
    assert a.F == (Fraction(3, 5) + 10 * Fraction(1, 5)) / 11
    assert concept_profiles(recs)[0].regime is None


def test_baselines():
    assert independence_baseline(0.3, 0.2) == Fraction(44, 100)
    assert max_baseline(0.3, 0.2) == Fraction(3, 10)


@pytest.mark.parametrize(
    "observed, baseline, text",
    [("0.354", "0.218", "+13.6%"), ("0.50", "0.316", "+18.4%"), ("0.1", "0.3", "-20.0%")],
)
def test_lift_formatting(observed, baseline, text):
    assert lift(observed, baseline) == Fraction(observed) - Fraction(baseline)
    assert format_pct(lift(observed, baseline), 1, signed=True) == text


def test_lift_table_baselines_and_order():
    recs = [record({"a", "b"}, 5)] + [record({"a", f"x{i}"}, 0) for i in range(3)] + [record({"b", f"y{i}"}, 0) for i in range(3)]
    table = lift_table(recs, n_min=1)
    assert table[0].pair == ("a", "b")
    assert [abs(e.lift) for e in table] == sorted((abs(e.lift) for e in table), reverse=True)
    ind = {e.pair: e for e in table}[("a", "b")]
    mx = {e.pair: e for e in lift_table(recs, n_min=1, baseline="max")}[("a", "b")]
    assert ind.baseline == Fraction(7, 16) and mx.baseline == Fraction(1, 4)
    with pytest.raises(ValueError):
        lift_table(recs, baseline="median")


def test_transfer_multiplier():
    src = [record(c, 20, m=20) for c in "abcde"]
    tgt = [record(c, f, m=20) for c, f in zip("abcde", (20, 18, 14, 12, 14))]
    rep = transfer_report(src, tgt, "0.095")
    assert rep.mean_target_fr == Fraction(78, 100)
    assert round(rep.multiplier, 1) == 8.2


def test_transfer_spearman_and_buckets():
    src = [record(c, f, m=20) for c, f in zip("abcd", (2, 8, 14, 20))]
    same = [record(c, f, m=20) for c, f in zip("abcd", (1, 5, 9, 19))]
    assert transfer_report(src, same, 0.1).spearman == pytest.approx(1.0)
    flat = [record(c, 10, m=20) for c in "abcd"]
    rep = transfer_report(src, flat, 0.1)
    assert rep.spearman is None
    assert {mean for _, _, mean in rep.buckets} == {Fraction(1, 2)}


def test_transfer_requires_inputs():
    with pytest.raises(ValueError):
        transfer_report([], [record("a", 1)], 0.1)
    with pytest.raises(ValueError, match="not evaluated"):
        transfer_report([record("a", 1)], [record("b", 1)], 0.1)


def test_write_csv(tmp_path):
    write_csv([{"x": 1, "y": None}], tmp_path / "t.csv", ["x", "y"])
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert rows == [{"x": "1", "y": ""}]
