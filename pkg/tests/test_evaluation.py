"""Metric identities, the all-propaganda closed form, and ratio tables."""

from __future__ import annotations

import json

import pytest

from propdistill.corpus import BENIGN, PROPAGANDA, article_from_sentences
from propdistill.errors import ValidationError
from propdistill.evaluation import (
    MetricsReport,
    baseline_all_propaganda,
    macro_f1,
    metrics_from_counts,
    per_class_prf,
    ratio_analysis,
    score,
)


def _labeled_articles(n_prop: int, n_benign: int, split="test"):
    labels = [PROPAGANDA] * n_prop + [BENIGN] * n_benign
    texts = [f"sentence number {i}" for i in range(len(labels))]
    return [article_from_sentences("fix", texts, labels, split=split)]


# ---------------------------------------------------------------- score


def test_perfect_predictions():
    gold = {1: PROPAGANDA, 2: BENIGN, 3: PROPAGANDA}
    report = score(dict(gold), gold, "sentence")
    assert (report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0)
    assert (report.tp, report.fp, report.fn, report.tn) == (2, 0, 0, 1)


def test_zero_predicted_positives_zero_over_zero_rule():
    gold = {1: PROPAGANDA, 2: BENIGN}
    predictions = {1: BENIGN, 2: BENIGN}
    report = score(predictions, gold, "sentence")
    assert report.precision == 0.0 and report.recall == 0.0 and report.f1 == 0.0


def test_score_mismatched_units_listed():
    with pytest.raises(ValidationError, match="unit sets differ"):
        score({1: PROPAGANDA}, {2: PROPAGANDA}, "sentence")


def test_score_permutation_invariant():
    gold = {i: (PROPAGANDA if i % 3 == 0 else BENIGN) for i in range(30)}
    pred = {i: (PROPAGANDA if i % 2 == 0 else BENIGN) for i in range(30)}
    forward = score(pred, gold, "sentence")
    reversed_keys = dict(reversed(list(pred.items())))
    backward = score(reversed_keys, gold, "sentence")
    assert forward == backward


def test_metric_identities_exact_on_integer_counts():
    report = metrics_from_counts("sentence", tp=7, fp=3, fn=5, tn=11)
    assert report.precision == 7 / 10
    assert report.recall == 7 / 12
    assert report.f1 == 2 * (7 / 10) * (7 / 12) / ((7 / 10) + (7 / 12))


# ---------------------------------------------------------------- all-propaganda baseline


def test_all_propaganda_closed_form_paper_sentence_ratio():
    articles = _labeled_articles(2486, 10000 - 2486)
    report = baseline_all_propaganda(articles, "sentence")
    assert report.precision == pytest.approx(0.2486, abs=1e-12)
    assert report.recall == 1.0
    assert 100 * report.f1 == pytest.approx(39.82, abs=0.01)


def test_all_propaganda_closed_form_paper_token_ratio():
    gold = {i: (PROPAGANDA if i < 1041 else BENIGN) for i in range(10000)}
    predictions = {i: PROPAGANDA for i in range(10000)}
    report = score(predictions, gold, "token")
    assert report.precision == pytest.approx(0.1041, abs=1e-12)
    assert report.recall == 1.0
    assert 100 * report.f1 == pytest.approx(18.86, abs=0.01)


def test_all_propaganda_half_ratio_closed_form():
    articles = _labeled_articles(10, 10)
    report = baseline_all_propaganda(articles, "sentence")
    assert report.f1 == pytest.approx(2 / 3, abs=1e-12)


def test_all_propaganda_matches_closed_form_generally():
    for n_prop, n_benign in ((1, 9), (3, 5), (25, 75)):
        articles = _labeled_articles(n_prop, n_benign)
        report = baseline_all_propaganda(articles, "sentence")
        r = n_prop / (n_prop + n_benign)
        assert report.precision == pytest.approx(r, abs=1e-12)
        assert report.recall == 1.0
        assert report.f1 == pytest.approx(2 * r / (1 + r), abs=1e-12)


# ---------------------------------------------------------------- per-class / macro


def test_per_class_prf_and_macro():
    gold = ["a", "a", "b", "b", "c"]
    pred = ["a", "b", "b", "b", "a"]
    per = per_class_prf(gold, pred, ["a", "b", "c"])
    assert per["a"]["precision"] == 0.5 and per["a"]["recall"] == 0.5
    assert per["b"]["precision"] == pytest.approx(2 / 3)
    assert per["c"]["f1"] == 0.0
    assert macro_f1(gold, pred, ["a", "b", "c"]) == pytest.approx(
        (per["a"]["f1"] + per["b"]["f1"] + 0.0) / 3
    )


# ---------------------------------------------------------------- ratio analysis


def _table_fixture(counts):
    gold, classes = [], []
    for cls, (n_prop, n_benign) in counts.items():
        gold += [PROPAGANDA] * n_prop + [BENIGN] * n_benign
        classes += [cls] * (n_prop + n_benign)
    return gold, classes


def test_ratio_analysis_contingency_column():
    gold, classes = _table_fixture({"Contingency": (146, 214), "Temporal": (18, 81)})
    table = ratio_analysis(gold, classes, "relation")
    assert table.counts[PROPAGANDA]["Contingency"] == 146
    assert table.ratio(PROPAGANDA, "Contingency") == pytest.approx(40.56, abs=0.01)
    assert table.ratio(BENIGN, "Contingency") == pytest.approx(59.44, abs=0.01)
    assert table.ratio(PROPAGANDA, "Temporal") == pytest.approx(18.18, abs=0.01)


def test_ratio_analysis_empty_column_renders_none():
    gold, classes = _table_fixture({"M1": (66, 169), "D3": (335, 447)})
    table = ratio_analysis(gold, classes, "role")
    assert table.ratio(PROPAGANDA, "M2") is None
    rendered = table.format_text()
    assert "0 (none)" in rendered
    assert table.ratio(PROPAGANDA, "D3") == pytest.approx(42.84, abs=0.01)


def test_ratio_analysis_single_class_single_column():
    gold = [PROPAGANDA] * 3
    classes = ["Expansion"] * 3
    table = ratio_analysis(gold, classes, "relation")
    assert table.column_total("Expansion") == 3
    assert all(table.column_total(c) == 0 for c in table.columns if c != "Expansion")


def test_ratio_table_totals_and_idempotent_rebuild():
    gold, classes = _table_fixture(
        {"Comparison": (102, 184), "Contingency": (146, 214), "Temporal": (18, 81), "Expansion": (337, 712)}
    )
    table = ratio_analysis(gold, classes, "relation")
    assert table.row_total(PROPAGANDA) == 603
    assert table.grand_total() == len(gold)
    # rebuilding from its own emitted counts reproduces the table
    payload = json.loads(table.to_json())
    gold2, classes2 = [], []
    for row, cols in payload["counts"].items():
        for col, count in cols.items():
            gold2 += [row] * count
            classes2 += [col] * count
    rebuilt = ratio_analysis(gold2, classes2, "relation")
    assert rebuilt.counts == table.counts


def test_ratio_analysis_overall_column():
    gold, classes = _table_fixture(
        {"Comparison": (102, 184), "Contingency": (146, 214), "Temporal": (18, 81), "Expansion": (337, 712)}
    )
    table = ratio_analysis(gold, classes, "relation")
    # totals column is the row sum over tabulated sentences
    assert table.row_total(PROPAGANDA) == 603 and table.row_total(BENIGN) == 1191
    assert table.overall_ratio(PROPAGANDA) == pytest.approx(100 * 603 / 1794, abs=1e-9)
    # the published overall ratio pair on its own: 620/1414 -> 30.48/69.52
    gold2, classes2 = _table_fixture({"Expansion": (620, 1414)})
    table2 = ratio_analysis(gold2, classes2, "relation")
    assert table2.overall_ratio(PROPAGANDA) == pytest.approx(30.48, abs=0.01)
    assert table2.overall_ratio(BENIGN) == pytest.approx(69.52, abs=0.01)


def test_ratio_analysis_rejects_bad_axis_and_labels():
    with pytest.raises(ValidationError):
        ratio_analysis([PROPAGANDA], ["Contingency"], "sentiment")
    with pytest.raises(ValidationError):
        ratio_analysis(["weird"], ["Contingency"], "relation")
    with pytest.raises(ValidationError):
        ratio_analysis([PROPAGANDA], ["M9"], "role")


def test_tsv_and_json_emissions_agree():
    gold, classes = _table_fixture({"Contingency": (146, 214)})
    table = ratio_analysis(gold, classes, "relation")
    tsv = table.to_tsv()
    payload = json.loads(table.to_json())
    assert "146 (40.56)" in tsv
    assert payload["counts"][PROPAGANDA]["Contingency"] == 146
    assert payload["ratios"][PROPAGANDA]["Contingency"] == pytest.approx(40.5555, abs=1e-3)


def test_metrics_report_serialization_roundtrip():
    report = MetricsReport("sentence", 0.5, 0.25, 1 / 3, 1, 1, 3, 5)
    payload = report.as_dict()
    assert payload["counts"] == {"TP": 1, "FP": 1, "FN": 3, "TN": 5}
    assert "precision" in report.to_tsv()
