"""Corpus ingestion: articles with span-projected labels, relation pairs, role documents.

Label projection works at the character level: a word token is propaganda iff its
character span overlaps at least one gold span, and a sentence is propaganda iff
at least one of its tokens is. Token-level units are whitespace/punctuation words;
subword segmentation is an encoder concern (see `align_tokens`).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AlignmentError, ParseError, ValidationError

PROPAGANDA = "propaganda"
BENIGN = "benign"

SPLITS = ("train", "dev", "test")

RELATIONS = ("Comparison", "Contingency", "Temporal", "Expansion")
EXPLICITNESS = ("explicit", "implicit")

ROLES = ("M1", "M2", "C1", "C2", "D1", "D2", "D3", "D4")

# Long-form role tags accepted by the loader, normalized to subtype codes.
_ROLE_ALIASES = {
    "main event": "M1",
    "consequence": "M2",
    "previous context": "C1",
    "previous event": "C1",
    "current context": "C2",
    "historical event": "D1",
    "anecdotal event": "D2",
    "evaluation": "D3",
    "expectation": "D4",
}

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

_TERMINALS = ".!?"
_CLOSERS = "\"'”’)]"


@dataclass(frozen=True)
class Token:
    start: int
    end: int
    gold_label: str | None = None


@dataclass(frozen=True)
class Sentence:
    index: int
    start: int
    end: int
    tokens: tuple[Token, ...]
    gold_label: str | None = None


@dataclass(frozen=True)
class Article:
    article_id: str
    text: str
    sentences: tuple[Sentence, ...]
    split: str = "train"


@dataclass(frozen=True)
class RelationPair:
    arg1_text: str
    arg2_text: str
    relation: str
    explicitness: str


@dataclass(frozen=True)
class RoleDocument:
    doc_id: str
    sentences: tuple[tuple[str, str], ...]  # (text, role code)


def word_spans(text: str, base: int = 0) -> list[tuple[int, int]]:
    """Character spans of word tokens: alphanumeric runs or single punctuation marks."""
    return [(base + m.start(), base + m.end()) for m in _WORD_RE.finditer(text)]


def sentence_split(text: str) -> list[tuple[int, int]]:
    """Deterministic offset-preserving segmentation.

    Boundaries occur after runs of .!? (plus trailing closers) followed by
    whitespace, and at newlines. The gaps between returned spans are pure
    whitespace, so the spans plus inter-span whitespace reconstruct the text.
    Text without terminal punctuation yields a single span.
    """
    spans: list[tuple[int, int]] = []
    n = len(text)
    i = 0
    start: int | None = None

    def close(end: int) -> None:
        nonlocal start
        while end > start and text[end - 1].isspace():
            end -= 1
        if end > start:
            spans.append((start, end))
        start = None

    while i < n:
        ch = text[i]
        if start is None:
            if not ch.isspace():
                start = i
            i += 1
            continue
        if ch == "\n":
            close(i)
            i += 1
            continue
        if ch in _TERMINALS:
            j = i + 1
            while j < n and text[j] in _TERMINALS:
                j += 1
            while j < n and text[j] in _CLOSERS:
                j += 1
            if j >= n or text[j].isspace():
                close(j)
            i = j
            continue
        i += 1
    if start is not None:
        close(n)
    return spans


def merge_spans(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of character spans as a sorted list of disjoint spans."""
    ordered = sorted((s, e) for s, e in spans if e > s)
    merged: list[tuple[int, int]] = []
    for s, e in ordered:
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def _overlaps(start: int, end: int, spans: Sequence[tuple[int, int]]) -> bool:
    return any(s < end and start < e for s, e in spans)


def build_article(
    article_id: str,
    text: str,
    gold_spans: Sequence[tuple[int, int]] | None = None,
    split: str = "train",
    sentence_labels: Mapping[int, str] | None = None,
) -> Article:
    """Segment text and project gold character spans onto tokens and sentences.

    With `gold_spans`, every token gets a label and a sentence is propaganda iff
    one of its tokens is. With `sentence_labels` only sentence labels are set.
    With neither, labels are absent (unlabeled inference input).
    """
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r} for article {article_id!r}")
    merged = merge_spans(gold_spans) if gold_spans is not None else None
    sentences = []
    for idx, (s_start, s_end) in enumerate(sentence_split(text)):
        tokens = []
        for t_start, t_end in word_spans(text[s_start:s_end], base=s_start):
            label = None
            if merged is not None:
                label = PROPAGANDA if _overlaps(t_start, t_end, merged) else BENIGN
            tokens.append(Token(t_start, t_end, label))
        if not tokens:
            continue
        if merged is not None:
            label = PROPAGANDA if any(t.gold_label == PROPAGANDA for t in tokens) else BENIGN
        elif sentence_labels is not None:
            label = sentence_labels.get(idx)
        else:
            label = None
        sentences.append(Sentence(idx, s_start, s_end, tuple(tokens), label))
    # Re-number in case empty segments were dropped.
    sentences = [replace(s, index=i) for i, s in enumerate(sentences)]
    return Article(article_id, text, tuple(sentences), split)


def article_from_sentences(
    article_id: str,
    sentence_texts: Sequence[str],
    labels: Sequence[str | None] | None = None,
    split: str = "train",
) -> Article:
    """Build an article from pre-segmented sentences (joined by newlines).

    The given segmentation is kept as-is; texts are not re-split, so sentences
    may contain internal punctuation.
    """
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r} for article {article_id!r}")
    if labels is not None and len(labels) != len(sentence_texts):
        raise ValidationError(f"{article_id!r}: {len(labels)} labels for {len(sentence_texts)} sentences")
    text = "\n".join(sentence_texts)
    sentences = []
    offset = 0
    for idx, sent_text in enumerate(sentence_texts):
        start, end = offset, offset + len(sent_text)
        offset = end + 1  # newline separator
        tokens = tuple(Token(s, e) for s, e in word_spans(sent_text, base=start))
        if not tokens:
            raise ValidationError(f"{article_id!r}: sentence {idx} has no tokens")
        label = labels[idx] if labels is not None else None
        sentences.append(Sentence(idx, start, end, tokens, label))
    return Article(article_id, text, tuple(sentences), split)


def _read_tsv(path: Path, n_fields: int) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != n_fields:
                raise ParseError(f"{path}:{lineno}: expected {n_fields} tab-separated fields, got {len(fields)}")
            rows.append((lineno, fields))
    return rows


def load_split_manifest(path: str | Path) -> dict[str, str]:
    manifest = {}
    for lineno, (article_id, split) in ((ln, f) for ln, f in _read_tsv(Path(path), 2)):
        if split not in SPLITS:
            raise ParseError(f"{path}:{lineno}: unknown split {split!r}")
        manifest[article_id] = split
    return manifest


def load_propaganda_corpus(
    articles_dir: str | Path,
    spans_file: str | Path | None,
    split_manifest: str | Path,
    sentence_labels_file: str | Path | None = None,
) -> list[Article]:
    """Load `<article_id>.txt` files with gold labels projected from the spans TSV.

    Spans TSV rows are `article_id \\t start \\t end` (end exclusive); overlapping
    spans are merged. Alternatively `sentence_labels_file` rows
    `article_id \\t sentence_index \\t {propaganda|benign}` label sentences directly
    (tokens stay unlabeled). Split assignment follows the manifest.
    """
    articles_dir = Path(articles_dir)
    manifest = load_split_manifest(split_manifest)

    texts: dict[str, str] = {}
    for txt_path in sorted(articles_dir.glob("*.txt")):
        texts[txt_path.stem] = txt_path.read_text(encoding="utf-8")
    if not texts:
        raise ValidationError(f"no article .txt files found under {articles_dir}")

    spans_by_article: dict[str, list[tuple[int, int]]] = {aid: [] for aid in texts}
    if spans_file is not None:
        for lineno, fields in _read_tsv(Path(spans_file), 3):
            article_id, start_s, end_s = fields
            try:
                start, end = int(start_s), int(end_s)
            except ValueError as exc:
                raise ParseError(f"{spans_file}:{lineno}: non-integer offsets {start_s!r}/{end_s!r}") from exc
            if article_id not in texts:
                raise ValidationError(f"{spans_file}:{lineno}: span references unknown article {article_id!r}")
            if not (0 <= start < end <= len(texts[article_id])):
                raise ValidationError(
                    f"span [{start}, {end}) out of bounds for article {article_id!r} "
                    f"(length {len(texts[article_id])})"
                )
            spans_by_article[article_id].append((start, end))

    labels_by_article: dict[str, dict[int, str]] = {aid: {} for aid in texts}
    if sentence_labels_file is not None:
        for lineno, fields in _read_tsv(Path(sentence_labels_file), 3):
            article_id, index_s, label = fields
            if article_id not in texts:
                raise ValidationError(f"{sentence_labels_file}:{lineno}: unknown article {article_id!r}")
            if label not in (PROPAGANDA, BENIGN):
                raise ParseError(f"{sentence_labels_file}:{lineno}: unknown label {label!r}")
            try:
                labels_by_article[article_id][int(index_s)] = label
            except ValueError as exc:
                raise ParseError(f"{sentence_labels_file}:{lineno}: non-integer index {index_s!r}") from exc

    articles = []
    for article_id in sorted(texts):
        if article_id not in manifest:
            raise ValidationError(f"article {article_id!r} missing from split manifest")
        articles.append(
            build_article(
                article_id,
                texts[article_id],
                gold_spans=spans_by_article[article_id] if spans_file is not None else None,
                split=manifest[article_id],
                sentence_labels=labels_by_article[article_id] if sentence_labels_file is not None else None,
            )
        )
    return articles


def align_tokens(
    sentence: Sentence, subword_spans: Sequence[tuple[int, int]]
) -> dict[int, list[int]]:
    """Map token index -> indices of the subwords contained in that token's span.

    Every subword must fall inside exactly one token span; anything else is an
    alignment error.
    """
    mapping: dict[int, list[int]] = {}
    tok_idx = 0
    tokens = sentence.tokens
    for sub_idx, (s, e) in enumerate(subword_spans):
        while tok_idx < len(tokens) and tokens[tok_idx].end <= s:
            tok_idx += 1
        if tok_idx >= len(tokens) or not (tokens[tok_idx].start <= s and e <= tokens[tok_idx].end):
            raise AlignmentError(
                f"subword [{s}, {e}) not contained in any token of sentence {sentence.index}"
            )
        mapping.setdefault(tok_idx, []).append(sub_idx)
    return mapping


def propagate_token_labels(
    alignment: Mapping[int, Sequence[int]], tokens: Sequence[Token], n_subwords: int
) -> list[str | None]:
    """Each subword inherits the label of its token."""
    labels: list[str | None] = [None] * n_subwords
    for tok_idx, sub_indices in alignment.items():
        for sub_idx in sub_indices:
            labels[sub_idx] = tokens[tok_idx].gold_label
    return labels


def aggregate_subword_predictions(
    alignment: Mapping[int, Sequence[int]], subword_positive: Sequence[bool], n_tokens: int
) -> list[bool]:
    """Token is predicted positive iff any of its subwords is (any-positive rule)."""
    out = [False] * n_tokens
    for tok_idx, sub_indices in alignment.items():
        out[tok_idx] = any(subword_positive[i] for i in sub_indices)
    return out


def _top_level_relation(sense: str) -> str:
    top = sense.split(".", 1)[0].strip()
    canon = {r.lower(): r for r in RELATIONS}.get(top.lower())
    if canon is None:
        raise ValidationError(f"unknown discourse relation sense {sense!r}")
    return canon


def load_relation_corpus(path: str | Path) -> list[RelationPair]:
    """Load JSONL records `{arg1, arg2, sense, explicitness}`.

    Senses are mapped to their top-level class; records with multiple senses are
    duplicated, one pair per distinct top-level class.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                arg1, arg2 = rec["arg1"], rec["arg2"]
                senses = rec["sense"]
                explicitness = rec["explicitness"]
            except (KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: missing field {exc}") from exc
            if explicitness not in EXPLICITNESS:
                raise ValidationError(f"{path}:{lineno}: unknown explicitness {explicitness!r}")
            if isinstance(senses, str):
                senses = [senses]
            seen = []
            for sense in senses:
                rel = _top_level_relation(sense)
                if rel not in seen:
                    seen.append(rel)
                    pairs.append(RelationPair(arg1, arg2, rel, explicitness))
    return pairs


def normalize_role(tag: str) -> str:
    if tag in ROLES:
        return tag
    canon = _ROLE_ALIASES.get(tag.strip().lower())
    if canon is None:
        raise ValidationError(f"unknown discourse role tag {tag!r}")
    return canon


def load_role_corpus(path: str | Path) -> list[RoleDocument]:
    """Load JSONL records `{doc_id, sentences: [{text, role}]}` with one role per sentence."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                doc_id = rec["doc_id"]
                sentences = tuple(
                    (entry["text"], normalize_role(entry["role"])) for entry in rec["sentences"]
                )
            except (KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: missing field {exc}") from exc
            docs.append(RoleDocument(doc_id, sentences))
    return docs


def propaganda_char_set(article: Article) -> set[int]:
    """Characters covered by propaganda tokens; used for span round-trip checks."""
    chars: set[int] = set()
    for sentence in article.sentences:
        for token in sentence.tokens:
            if token.gold_label == PROPAGANDA:
                chars.update(range(token.start, token.end))
    return chars
