"""Shared fixtures: toy configurations and synthetic corpora.

The synthetic generators build small separable datasets: relation pairs whose
second argument carries a class marker word, role documents with one marker per
role, and labeled articles where propaganda sentences contain a marker word
annotated as a gold span.
"""

from __future__ import annotations

import random

import numpy as np
import pytest
import torch

from propdistill.corpus import (
    PROPAGANDA,
    RELATIONS,
    ROLES,
    RelationPair,
    RoleDocument,
    build_article,
)
from propdistill.encoder import EncoderConfig
from propdistill.teachers import TeacherOutputs

torch.set_num_threads(2)

RELATION_MARKERS = {
    "Comparison": ("however", "contrast"),
    "Contingency": ("because", "therefore"),
    "Temporal": ("before", "afterwards"),
    "Expansion": ("furthermore", "additionally"),
}
ROLE_MARKERS = {
    "M1": "announced",
    "M2": "resulted",
    "C1": "previously",
    "C2": "currently",
    "D1": "decades",
    "D2": "imagine",
    "D3": "outrageous",
    "D4": "predict",
}
FILLER_WORDS = ("the", "officials", "city", "report", "people", "council")
PROPAGANDA_MARKERS = ("traitor", "menace", "disgraceful", "scheme")
BENIGN_MARKERS = ("meeting", "budget", "schedule", "update")


def toy_encoder_config(d: int = 16, **kwargs) -> EncoderConfig:
    defaults = dict(
        hidden_dim=d,
        num_layers=1,
        num_heads=2,
        vocab_buckets=512,
        max_input_length=256,
    )
    defaults.update(kwargs)
    return EncoderConfig(**defaults)


def filler_sentence(rng: random.Random, k: int = 4) -> str:
    return " ".join(rng.choice(FILLER_WORDS) for _ in range(k))


def make_relation_pairs(n_per_class: int, seed: int = 7) -> list[RelationPair]:
    rng = random.Random(seed)
    pairs = []
    for rel in RELATIONS:
        for i in range(n_per_class):
            arg2 = f"{rng.choice(RELATION_MARKERS[rel])} {filler_sentence(rng, 3)}"
            pairs.append(
                RelationPair(filler_sentence(rng), arg2, rel, "implicit" if i % 2 else "explicit")
            )
    rng.shuffle(pairs)
    return pairs


def make_role_docs(n_docs: int, seed: int = 9) -> list[RoleDocument]:
    rng = random.Random(seed)
    docs = []
    for di in range(n_docs):
        sents = [(f"{ROLE_MARKERS[role]} {filler_sentence(rng, 3)}", role) for role in ROLES]
        rng.shuffle(sents)
        docs.append(RoleDocument(f"doc{di}", tuple(sents)))
    return docs


def make_labeled_text(rng: random.Random, n_sentences: int) -> tuple[str, list[tuple[int, int]]]:
    """Article text where one marker word per sentence decides the label.

    Returns the text and the gold character spans (the propaganda markers).
    """
    lines, spans = [], []
    offset = 0
    for _ in range(n_sentences):
        is_prop = rng.random() < 0.45
        words = [rng.choice(FILLER_WORDS) for _ in range(2)]
        marker = rng.choice(PROPAGANDA_MARKERS) if is_prop else rng.choice(BENIGN_MARKERS)
        words.insert(rng.randrange(len(words) + 1), marker)
        line = " ".join(words) + "."
        if is_prop:
            k = line.find(marker)
            spans.append((offset + k, offset + k + len(marker)))
        lines.append(line)
        offset += len(line) + 1
    return "\n".join(lines), spans


def make_labeled_article(article_id: str, rng: random.Random, n_sentences: int, split: str):
    text, spans = make_labeled_text(rng, n_sentences)
    return build_article(article_id, text, gold_spans=spans, split=split)


def make_article_corpus(
    n_train: int = 8, n_dev: int = 4, n_sentences: int = 10, seed: int = 21
) -> list:
    rng = random.Random(seed)
    corpus = [make_labeled_article(f"t{i}", rng, n_sentences, "train") for i in range(n_train)]
    corpus += [make_labeled_article(f"d{i}", rng, n_sentences, "dev") for i in range(n_dev)]
    return corpus


def synthetic_teacher_outputs(
    article, d: int, rng: np.random.Generator, noise: float = 0.02
) -> TeacherOutputs:
    """Label-correlated teacher signals: peaked distributions and clustered embeddings.

    Propaganda sentences lean Contingency/D3, benign Expansion/C2, echoing the
    corpus statistics the teachers are meant to capture. The first sentence's
    local row is the uniform distribution.
    """
    n = len(article.sentences)
    p_local = np.full((n, 4), 0.25, dtype=np.float32)
    p_global = np.zeros((n, 8), dtype=np.float32)
    s_local = np.zeros((n, d), dtype=np.float32)
    s_global = np.zeros((n, d), dtype=np.float32)
    u_prop = rng.standard_normal(d).astype(np.float32)
    u_prop /= np.linalg.norm(u_prop)
    u_benign = rng.standard_normal(d).astype(np.float32)
    u_benign /= np.linalg.norm(u_benign)
    contingency, expansion = RELATIONS.index("Contingency"), RELATIONS.index("Expansion")
    evaluation, current = ROLES.index("D3"), ROLES.index("C2")
    for i, sentence in enumerate(article.sentences):
        prop = sentence.gold_label == PROPAGANDA
        if i > 0:
            row = np.full(4, 0.05, dtype=np.float32)
            row[contingency if prop else expansion] = 0.85
            p_local[i] = row
        row = np.full(8, 0.02, dtype=np.float32)
        row[evaluation if prop else current] = 0.86
        p_global[i] = row
        base = u_prop if prop else u_benign
        s_local[i] = base + noise * rng.standard_normal(d).astype(np.float32)
        s_global[i] = base + noise * rng.standard_normal(d).astype(np.float32)
    return TeacherOutputs(
        article.article_id, p_local, p_global, s_local, s_global, list(range(n)), "synthetic"
    )


def synthetic_cache(corpus, d: int = 16, seed: int = 21) -> dict[str, TeacherOutputs]:
    rng = np.random.default_rng(seed)
    return {a.article_id: synthetic_teacher_outputs(a, d, rng) for a in corpus}


@pytest.fixture(scope="session")
def relation_pairs():
    return make_relation_pairs(10)


@pytest.fixture(scope="session")
def role_docs():
    return make_role_docs(5)


@pytest.fixture(scope="session")
def article_corpus():
    return make_article_corpus()


@pytest.fixture(scope="session")
def teacher_cache(article_corpus):
    return synthetic_cache(article_corpus)


def write_workspace(root, n_train=3, n_dev=2, n_sentences=5, seed=13) -> dict:
    """File-based corpus layout: article txt files, spans/manifest TSVs, teacher JSONLs."""
    import json

    rng = random.Random(seed)
    articles_dir = root / "articles"
    articles_dir.mkdir(parents=True, exist_ok=True)
    spans_rows, manifest_rows = [], []
    ids = [(f"train{i}", "train") for i in range(n_train)] + [(f"dev{i}", "dev") for i in range(n_dev)]
    for aid, split in ids:
        text, spans = make_labeled_text(rng, n_sentences)
        (articles_dir / f"{aid}.txt").write_text(text, encoding="utf-8")
        spans_rows += [(aid, s, e) for s, e in spans]
        manifest_rows.append((aid, split))
    (root / "spans.tsv").write_text(
        "".join(f"{a}\t{s}\t{e}\n" for a, s, e in spans_rows), encoding="utf-8"
    )
    (root / "splits.tsv").write_text(
        "".join(f"{a}\t{sp}\n" for a, sp in manifest_rows), encoding="utf-8"
    )
    with open(root / "relations.jsonl", "w", encoding="utf-8") as fh:
        for pair in make_relation_pairs(6, seed=seed):
            fh.write(
                json.dumps(
                    {
                        "arg1": pair.arg1_text,
                        "arg2": pair.arg2_text,
                        "sense": pair.relation,
                        "explicitness": pair.explicitness,
                    }
                )
                + "\n"
            )
    with open(root / "roles.jsonl", "w", encoding="utf-8") as fh:
        for doc in make_role_docs(4, seed=seed):
            fh.write(
                json.dumps(
                    {"doc_id": doc.doc_id, "sentences": [{"text": t, "role": r} for t, r in doc.sentences]}
                )
                + "\n"
            )
    config = {
        "seed": 0,
        "paths": {
            "articles_dir": str(articles_dir),
            "spans_file": str(root / "spans.tsv"),
            "split_manifest": str(root / "splits.tsv"),
            "relation_corpus": str(root / "relations.jsonl"),
            "role_corpus": str(root / "roles.jsonl"),
            "teacher_dir": str(root / "teachers"),
            "cache_dir": str(root / "cache"),
            "output_dir": str(root / "runs"),
        },
        "encoder": {
            "hidden_dim": 16,
            "num_layers": 1,
            "num_heads": 2,
            "vocab_buckets": 512,
            "max_input_length": 256,
        },
        "teacher_train": {"epochs": 20, "learning_rate": 3e-3, "early_stop_dev_f1": 1.0, "dev_fraction": 0.0},
        "train": {"mode": "baseline", "epochs": 3, "learning_rate": 3e-3},
    }
    import yaml

    config_path = root / "config.yaml"
    config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return {"root": root, "config": config_path, "config_dict": config}


@pytest.fixture(scope="session")
def trained_teachers(relation_pairs, role_docs):
    """Tiny real teachers, trained once per session on the separable corpora."""
    from propdistill.teachers import TeacherTrainConfig, train_relation_teacher, train_role_teacher

    enc = toy_encoder_config()
    rel_config = TeacherTrainConfig(
        encoder=enc, epochs=30, learning_rate=3e-3, seed=0, early_stop_dev_f1=1.0
    )
    rel = train_relation_teacher(relation_pairs, rel_config, dev_pairs=relation_pairs)
    role_config = TeacherTrainConfig(
        encoder=enc, epochs=60, learning_rate=3e-3, seed=0, early_stop_dev_f1=1.0
    )
    role = train_role_teacher(role_docs, role_config, dev_docs=role_docs)
    return rel, role
