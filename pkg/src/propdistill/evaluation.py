"""Metrics and ratio analyses.

All propaganda metrics use propaganda as the positive class; 0/0 ratios are
defined as 0. Token-level scoring is per word (after any-positive subword
aggregation), documented here because the source task does not pin the unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from .corpus import BENIGN, PROPAGANDA, RELATIONS, ROLES, Article
from .errors import ValidationError

ROWS = (PROPAGANDA, BENIGN)


@dataclass
class MetricsReport:
    level: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": {"TP": self.tp, "FP": self.fp, "FN": self.fn, "TN": self.tn},
        }

    def to_tsv(self) -> str:
        header = "level\tprecision\trecall\tf1\tTP\tFP\tFN\tTN"
        row = f"{self.level}\t{self.precision:.6f}\t{self.recall:.6f}\t{self.f1:.6f}\t{self.tp}\t{self.fp}\t{self.fn}\t{self.tn}"
        return header + "\n" + row + "\n"


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics_from_counts(level: str, tp: int, fp: int, fn: int, tn: int) -> MetricsReport:
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return MetricsReport(level, precision, recall, f1, tp, fp, fn, tn)


def _is_positive(label) -> bool:
    if isinstance(label, str):
        return label == PROPAGANDA
    return bool(label)


def score(predictions: Mapping[Any, Any], gold: Mapping[Any, Any], level: str) -> MetricsReport:
    """Propaganda-class precision/recall/F1 over identically-indexed units.

    Unit keys are opaque; values are `propaganda`/`benign` strings or booleans.
    A mismatch between the prediction and gold index sets is an error listing
    the offending ids.
    """
    pred_keys, gold_keys = set(predictions), set(gold)
    if pred_keys != gold_keys:
        missing_gold = sorted(map(repr, pred_keys - gold_keys))[:10]
        missing_pred = sorted(map(repr, gold_keys - pred_keys))[:10]
        raise ValidationError(
            f"prediction/gold unit sets differ; predicted-without-gold={missing_gold}, "
            f"gold-without-prediction={missing_pred}"
        )
    tp = fp = fn = tn = 0
    for key in predictions:
        p, g = _is_positive(predictions[key]), _is_positive(gold[key])
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(level, tp, fp, fn, tn)


def sentence_gold_units(articles: Iterable[Article]) -> dict[tuple[str, int], str]:
    units = {}
    for article in articles:
        for sentence in article.sentences:
            if sentence.gold_label is not None:
                units[(article.article_id, sentence.index)] = sentence.gold_label
    return units


def token_gold_units(articles: Iterable[Article]) -> dict[tuple[str, int, int], str]:
    units = {}
    for article in articles:
        for sentence in article.sentences:
            for t_idx, token in enumerate(sentence.tokens):
                if token.gold_label is not None:
                    units[(article.article_id, sentence.index, t_idx)] = token.gold_label
    return units


def baseline_all_propaganda(articles: Sequence[Article], level: str) -> MetricsReport:
    """The naive predictor that labels every unit propaganda: P = r, R = 1."""
    gold = sentence_gold_units(articles) if level == "sentence" else token_gold_units(articles)
    if not gold:
        raise ValidationError(f"no gold {level}-level labels present")
    predictions = {key: PROPAGANDA for key in gold}
    return score(predictions, gold, level)


def per_class_prf(gold: Sequence, pred: Sequence, classes: Sequence) -> dict[Any, dict[str, float]]:
    """One-vs-rest precision/recall/F1 per class (0/0 defined as 0)."""
    if len(gold) != len(pred):
        raise ValidationError(f"gold/pred length mismatch: {len(gold)} vs {len(pred)}")
    out = {}
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, pred) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, pred) if g == cls and p != cls)
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        out[cls] = {
            "precision": precision,
            "recall": recall,
            "f1": _safe_div(2 * precision * recall, precision + recall),
        }
    return out


def macro_f1(gold: Sequence, pred: Sequence, classes: Sequence) -> float:
    per = per_class_prf(gold, pred, classes)
    return sum(v["f1"] for v in per.values()) / len(classes)


@dataclass
class RatioTable:
    """Cross-tabulation of gold labels against teacher argmax classes.

    `counts[row][col]` holds raw counts; ratios are column-wise percentages.
    Empty columns have no ratio and render as "none".
    """

    axis: str  # "relation" or "role"
    columns: tuple[str, ...]
    counts: dict[str, dict[str, int]]

    def column_total(self, col: str) -> int:
        return sum(self.counts[row][col] for row in ROWS)

    def row_total(self, row: str) -> int:
        return sum(self.counts[row].values())

    def grand_total(self) -> int:
        return sum(self.row_total(row) for row in ROWS)

    def ratio(self, row: str, col: str) -> float | None:
        total = self.column_total(col)
        if total == 0:
            return None
        return 100.0 * self.counts[row][col] / total

    def overall_ratio(self, row: str) -> float | None:
        total = self.grand_total()
        if total == 0:
            return None
        return 100.0 * self.row_total(row) / total

    @staticmethod
    def _cell(count: int, ratio: float | None) -> str:
        return f"{count} (none)" if ratio is None else f"{count} ({ratio:.2f})"

    def format_text(self) -> str:
        header = [""] + list(self.columns) + ["Total"]
        rows = [header]
        for row in ROWS:
            cells = [row]
            for col in self.columns:
                cells.append(self._cell(self.counts[row][col], self.ratio(row, col)))
            cells.append(self._cell(self.row_total(row), self.overall_ratio(row)))
            rows.append(cells)
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)

    def to_tsv(self) -> str:
        lines = ["\t".join([""] + list(self.columns) + ["Total"])]
        for row in ROWS:
            cells = [row]
            for col in self.columns:
                cells.append(self._cell(self.counts[row][col], self.ratio(row, col)))
            cells.append(self._cell(self.row_total(row), self.overall_ratio(row)))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "axis": self.axis,
            "columns": list(self.columns),
            "counts": self.counts,
            "ratios": {
                row: {col: self.ratio(row, col) for col in self.columns} for row in ROWS
            },
            "totals": {row: self.row_total(row) for row in ROWS},
        }
        return json.dumps(payload, indent=2)


def ratio_analysis(
    gold_labels: Sequence[str], classes: Sequence[str], axis: str
) -> RatioTable:
    """Tabulate propaganda/benign counts per teacher-predicted class.

    `gold_labels` and `classes` are aligned per sentence; `axis` selects the
    column set (4 relations or 8 roles).
    """
    if axis == "relation":
        columns = RELATIONS
    elif axis == "role":
        columns = ROLES
    else:
        raise ValidationError(f"unknown analysis axis {axis!r}")
    if len(gold_labels) != len(classes):
        raise ValidationError(f"gold/class length mismatch: {len(gold_labels)} vs {len(classes)}")
    counts = {row: {col: 0 for col in columns} for row in ROWS}
    for gold, cls in zip(gold_labels, classes):
        if gold not in ROWS:
            raise ValidationError(f"unknown gold label {gold!r}")
        if cls not in columns:
            raise ValidationError(f"class {cls!r} not a valid {axis} column")
        counts[gold][cls] += 1
    return RatioTable(axis, tuple(columns), counts)
