import math

import pytest
from hypothesis import given, strategies as st

from flexmore.analysis import (
    AVG_GROUP,
    FULL,
    ScoreRecord,
    ScoreTable,
    avg_score,
    build_report,
    fit_rank_sensitivity,
    parse_rank,
    peak_rank,
    quantile,
    rel_improvement,
    select_ranks,
    summarize_peaks,
    summarize_slopes,
)
from flexmore.errors import DataError

CODE_BASELINE_GROUPS = [0.6757, 0.4668, 0.3909, 0.3831, 0.5381, 0.2443]


def test_avg_score_reported_baseline():
    groups = {f"g{i}": [v] for i, v in enumerate(CODE_BASELINE_GROUPS)}
    assert avg_score(groups) == pytest.approx(0.4498, abs=5e-5)


def test_avg_score_unweighted_over_groups():
    # one group with three tasks, one with one task
    assert avg_score({"a": [0.2, 0.4, 0.6], "b": [0.7]}) == pytest.approx(0.55, abs=1e-12)


def test_avg_score_from_records_and_errors():
    recs = [ScoreRecord("e", 1, "a", "t1", 0.2), ScoreRecord("e", 1, "a", "t2", 0.4),
            ScoreRecord("e", 1, "b", "t3", 0.9)]
    assert avg_score(recs) == pytest.approx(0.6)
    with pytest.raises(DataError):
        avg_score({})
    with pytest.raises(DataError):
        avg_score({"a": []})


@pytest.mark.parametrize(
    "model,base,expected,tol",
    [(0.4522, 0.4221, 7.13, 0.01), (0.4631, 0.4457, 3.92, 0.05), (0.5, 0.4, 25.0, 1e-12)],
)
def test_rel_improvement_examples(model, base, expected, tol):
    assert rel_improvement(model, base) == pytest.approx(expected, abs=tol)


def test_rel_improvement_rejects_nonpositive_baseline():
    for b in (0.0, -0.1):
        with pytest.raises(DataError):
            rel_improvement(0.5, b)


@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_rel_improvement_sign_and_zero(a, b):
    d = rel_improvement(a, b)
    assert (d > 0) == (a > b) or a == b
    assert rel_improvement(b, b) == 0.0
    # the reverse change has the opposite sign
    assert d * rel_improvement(b, a) <= 0


def test_regression_exact_line():
    fit = fit_rank_sensitivity([(2**k, 0.3 + 0.05 * k) for k in range(6)])
    assert fit.beta == pytest.approx(0.05, abs=1e-12)
    assert fit.alpha == pytest.approx(0.3, abs=1e-12)
    assert fit.pearson_r == pytest.approx(1.0, abs=1e-12)
    down = fit_rank_sensitivity([(2**k, 1.0 - 0.1 * k) for k in range(4)])
    assert down.pearson_r == pytest.approx(-1.0, abs=1e-12)


def test_regression_four_points():
    # x = 0,1,2,3 ; y = 1, 2, 2, 3 -> beta = 0.6, alpha = 1.1, r = 3 / sqrt(10)
    fit = fit_rank_sensitivity([(1, 1), (2, 2), (4, 2), (8, 3)])
    assert fit.beta == pytest.approx(0.6, abs=1e-12)
    assert fit.alpha == pytest.approx(1.1, abs=1e-12)
    assert fit.pearson_r == pytest.approx(3 / math.sqrt(10), abs=1e-12)
    assert fit.n_points == 4


def test_regression_constant_scores_and_errors():
    fit = fit_rank_sensitivity([(1, 0.5), (2, 0.5), (4, 0.5)])
    assert fit.beta == 0 and fit.pearson_r == 0
    with pytest.raises(DataError):
        fit_rank_sensitivity([(4, 0.1)])
    with pytest.raises(DataError):
        fit_rank_sensitivity([(4, 0.1), (4, 0.2)])


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=12))
def test_pearson_bounded(scores):
    fit = fit_rank_sensitivity([(2**k, s) for k, s in enumerate(scores)])
    assert -1.0 <= fit.pearson_r <= 1.0


def test_peak_rank_examples():
    pk = peak_rank([(1, 0.1), (2, 0.4), (4, 0.3)], "e", "g")
    assert (pk.r_star, pk.log2_r_star) == (2, 1)
    # ties resolve to the lowest rank
    assert peak_rank([(8, 0.5), (2, 0.5), (1, 0.2)]).r_star == 2
    with pytest.raises(DataError):
        peak_rank([])
    with pytest.raises(DataError):
        peak_rank([(2, 0.1), (2, 0.2)])


@given(st.permutations([(1, 0.3), (2, 0.7), (4, 0.7), (8, 0.1), (16, 0.5)]))
def test_peak_rank_order_invariant(pts):
    assert peak_rank(pts).r_star == 2


def test_quantile_examples():
    xs = [8, 2, 6, 4]
    assert quantile(xs, 0.5) == 5
    assert quantile(xs, 0.25) == 3.5
    assert quantile(xs, 0.75) == 6.5
    assert quantile([3], 0.25) == 3
    with pytest.raises(DataError):
        quantile([], 0.5)


def test_summaries():
    s = summarize_peaks([2, 4, 6, 8])
    assert (s.median, s.q25, s.q75, s.n) == (5, 3.5, 6.5, 4)
    sl = summarize_slopes([0.01, -0.02, 0.03])
    assert (sl.median, sl.min, sl.max, sl.n) == (0.01, -0.02, 0.03, 3)
    with pytest.raises(DataError):
        summarize_peaks([])
    with pytest.raises(DataError):
        summarize_slopes([])


def _table(spec):
    """spec: {expert: {rank: {group: [scores]}}}"""
    t = ScoreTable()
    for e, by_rank in spec.items():
        for r, by_group in by_rank.items():
            for g, scores in by_group.items():
                for i, s in enumerate(scores):
                    t.add(ScoreRecord(e, r, g, f"{g}-{i}", s))
    return t


def test_select_ranks_strategies():
    t = _table({
        "code": {1: {"a": [0.9], "b": [0.1]}, 2: {"a": [0.5], "b": [0.8]}, FULL: {"a": [1.0], "b": [1.0]}},
        "math": {1: {"a": [0.2], "b": [0.2]}, 4: {"a": [0.3], "b": [0.9]}},
    })
    proxy = select_ranks(t, "per_group_proxy", "a")
    assert proxy.chosen == {"code": 1, "math": 4}
    avg = select_ranks(t, "all_groups_avg")
    assert avg.chosen == {"code": 2, "math": 4}
    with pytest.raises(DataError):
        select_ranks(t, "per_group_proxy")
    with pytest.raises(DataError):
        select_ranks(t, "per_group_proxy", "zzz")
    with pytest.raises(DataError):
        select_ranks(t, "best")


def test_table_rejects_duplicates():
    t = ScoreTable([ScoreRecord("e", 1, "g", "t", 0.1)])
    with pytest.raises(DataError):
        t.add(ScoreRecord("e", 1, "g", "t", 0.2))


def test_parse_rank():
    assert parse_rank("16") == 16 and parse_rank(" full ") == FULL
    for bad in ("0", "3", "-2", "x"):
        with pytest.raises(ValueError):
            parse_rank(bad)


SAMPLE = _table({
    "code": {1: {"a": [0.25, 0.5], "b": [1 / 3]}, 2: {"a": [0.1, 0.2], "b": [0.7]}, FULL: {"a": [1.0, 1.0], "b": [1.0]}},
})


def test_csv_roundtrip_is_exact():
    text = SAMPLE.to_csv()
    back = ScoreTable.from_csv(text)
    assert list(back) == list(SAMPLE)
    assert back.to_csv() == text


def test_jsonl_roundtrip_is_exact():
    back = ScoreTable.from_jsonl(SAMPLE.to_jsonl())
    assert list(back) == list(SAMPLE)


def test_read_dispatches_on_extension(tmp_path):
    (tmp_path / "s.csv").write_text(SAMPLE.to_csv())
    (tmp_path / "s.jsonl").write_text(SAMPLE.to_jsonl())
    assert list(ScoreTable.read(tmp_path / "s.csv")) == list(SAMPLE)
    assert list(ScoreTable.read(tmp_path / "s.jsonl")) == list(SAMPLE)


@pytest.mark.parametrize(
    "text,line",
    [
        ("expert,rank,group,task,score\ne,3,g,t,0.1\n", 2),
        ("expert,rank,group,task,score\ne,1,g,t,0.1\ne,2,g,t,abc\n", 3),
        ("expert,rank,group,task,score\ne,1,g,t\n", 2),
    ],
)
def test_csv_errors_carry_line_numbers(text, line):
    with pytest.raises(DataError, match=f":{line}"):
        ScoreTable.from_csv(text)


def test_empty_and_bad_header():
    with pytest.raises(DataError):
        ScoreTable.from_csv("expert,rank,group,task,score\n")
    with pytest.raises(DataError):
        ScoreTable.from_csv("a,b\n1,2\n")
    with pytest.raises(DataError):
        ScoreTable.from_jsonl('{"expert": "e"}\n')


def test_build_report_contents():
    t = _table({
        "code": {r: {"a": [0.1 * k], "b": [0.5]} for k, r in enumerate([1, 2, 4], start=1)},
        "math": {r: {"a": [0.9 - 0.1 * k], "b": [0.5]} for k, r in enumerate([1, 2, 4], start=1)},
    })
    t.add(ScoreRecord("code", FULL, "a", "a-0", 0.2))
    t.add(ScoreRecord("code", FULL, "b", "b-0", 0.5))
    rep = build_report(t)
    fits = {(r["model"], r["group"]): r for r in rep.regression}
    assert fits[("code", "a")]["beta"] == pytest.approx(0.1)
    assert fits[("math", "a")]["beta"] == pytest.approx(-0.1)
    assert fits[("experts", "a")]["beta"] == pytest.approx(0.0, abs=1e-12)
    assert ("code", AVG_GROUP) in fits
    peaks = {(p["expert"], p["group"]): p["r_star"] for p in rep.peaks}
    assert peaks[("code", "a")] == 4 and peaks[("math", "a")] == 1
    summary = {s["group"]: s for s in rep.peak_summary}
    assert summary["a"]["median"] == 1.0
    row = next(r for r in rep.averages if r["model"] == "code" and r["rank"] == 4)
    assert row["avg"] == pytest.approx(0.4)
    assert row["delta_pct"] == pytest.approx(rel_improvement(0.4, 0.35))
    assert next(r for r in rep.averages if r["model"] == "math")["delta_pct"] is None
    with pytest.raises(DataError):
        build_report(ScoreTable())
