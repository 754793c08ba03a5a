"""The two frozen teachers: 4-way discourse relations and 8-way discourse roles.

Teachers are trained with supervised cross-entropy, selected by dev macro-F1,
then frozen. Their per-article outputs (probability rows plus sentence
embeddings) are cached to disk keyed by a fingerprint of both checkpoints, so
student training never touches teacher parameters.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import random
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import RELATIONS, ROLES, Article, RelationPair, RoleDocument, article_from_sentences
from .encoder import EncoderConfig, build_encoder, encode_document, pair_embedding
from .errors import ConfigError, MissingTeacherCacheError, ValidationError
from .evaluation import macro_f1
from .layers import TwoLayerHead

UNIFORM_LOCAL = (0.25, 0.25, 0.25, 0.25)

CACHE_MANIFEST = "manifest.json"


@dataclass
class TeacherTrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 20
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0
    dev_fraction: float = 0.2
    head_hidden: int | None = None  # None -> encoder hidden_dim
    early_stop_dev_f1: float | None = None


class RelationTeacher(nn.Module):
    """Adjacent-sentence pair classifier over the four top-level relations."""

    def __init__(self, encoder_config: EncoderConfig, head_hidden: int | None = None):
        super().__init__()
        self.encoder_config = encoder_config
        self.encoder = build_encoder(encoder_config)
        d = encoder_config.hidden_dim
        self.head = TwoLayerHead(2 * d, head_hidden or d, len(RELATIONS))

    def pair_logits(self, pair: RelationPair) -> torch.Tensor:
        article = article_from_sentences("pair", [pair.arg1_text, pair.arg2_text])
        enc = encode_document(article, self.encoder_config, self.encoder)
        return self.head(pair_embedding(enc, 1))


class RoleTeacher(nn.Module):
    """Per-sentence classifier over the eight news discourse roles."""

    def __init__(self, encoder_config: EncoderConfig, head_hidden: int | None = None):
        super().__init__()
        self.encoder_config = encoder_config
        self.encoder = build_encoder(encoder_config)
        d = encoder_config.hidden_dim
        self.head = TwoLayerHead(d, head_hidden or d, len(ROLES))

    def document_logits(self, texts: Sequence[str]) -> torch.Tensor:
        article = article_from_sentences("doc", list(texts))
        enc = encode_document(article, self.encoder_config, self.encoder)
        return self.head(enc.sentence_embeddings)


@dataclass
class TeacherOutputs:
    """Frozen per-article teacher signals, aligned to surviving sentence indices."""

    article_id: str
    p_local: np.ndarray  # (n, 4); first row is the uniform distribution
    p_global: np.ndarray  # (n, 8)
    s_local: np.ndarray  # (n, d_rel)
    s_global: np.ndarray  # (n, d_role)
    sentence_indices: list[int]
    teacher_hash: str

    @property
    def n(self) -> int:
        return int(self.p_local.shape[0])


def _split_dev(items: list, fraction: float, rng: random.Random) -> tuple[list, list]:
    if fraction <= 0 or len(items) < 2:
        return items, items
    shuffled = list(items)
    rng.shuffle(shuffled)
    n_dev = max(1, round(fraction * len(shuffled)))
    return shuffled[n_dev:], shuffled[:n_dev]


def _check_classes(labels: Sequence[str], classes: Sequence[str], what: str) -> None:
    counts = Counter(labels)
    missing = [c for c in classes if counts[c] == 0]
    if missing:
        raise ValidationError(f"{what} training data has empty classes: {missing}")


def _linear_decay(optimizer, total_steps: int):
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: max(0.0, 1.0 - step / max(1, total_steps))
    )


def train_relation_teacher(
    pairs: Sequence[RelationPair],
    config: TeacherTrainConfig,
    dev_pairs: Sequence[RelationPair] | None = None,
) -> RelationTeacher:
    """Train the local discourse-relation teacher; returns the best-dev-F1 checkpoint.

    Training aborts if any of the four relation classes is absent.
    """
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)
    if dev_pairs is None:
        train_pairs, dev_list = _split_dev(list(pairs), config.dev_fraction, rng)
    else:
        train_pairs, dev_list = list(pairs), list(dev_pairs)
    _check_classes([p.relation for p in train_pairs], RELATIONS, "relation teacher")

    model = RelationTeacher(config.encoder, config.head_hidden)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    scheduler = _linear_decay(optimizer, config.epochs * len(train_pairs))
    class_index = {rel: i for i, rel in enumerate(RELATIONS)}

    best_f1, best_state, history = -1.0, None, []
    for epoch in range(config.epochs):
        model.train()
        order = list(train_pairs)
        rng.shuffle(order)
        epoch_loss = 0.0
        for pair in order:
            optimizer.zero_grad()
            logits = model.pair_logits(pair)
            target = torch.tensor(class_index[pair.relation])
            loss = F.cross_entropy(logits.unsqueeze(0), target.unsqueeze(0))
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += float(loss.detach())
        dev_f1 = _relation_dev_f1(model, dev_list)
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(1, len(order)), "dev_macro_f1": dev_f1})
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if config.early_stop_dev_f1 is not None and best_f1 >= config.early_stop_dev_f1:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    model.history = history
    return model


@torch.no_grad()
def _relation_dev_f1(model: RelationTeacher, pairs: Sequence[RelationPair]) -> float:
    model.eval()
    gold = [p.relation for p in pairs]
    pred = [RELATIONS[int(model.pair_logits(p).argmax())] for p in pairs]
    model.train()
    return macro_f1(gold, pred, RELATIONS)


@torch.no_grad()
def relation_accuracy(model: RelationTeacher, pairs: Sequence[RelationPair]) -> float:
    model.eval()
    hits = sum(1 for p in pairs if RELATIONS[int(model.pair_logits(p).argmax())] == p.relation)
    return hits / len(pairs) if pairs else 0.0


def train_role_teacher(
    docs: Sequence[RoleDocument],
    config: TeacherTrainConfig,
    dev_docs: Sequence[RoleDocument] | None = None,
) -> RoleTeacher:
    """Train the global discourse-role teacher with per-sentence cross-entropy."""
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)
    if dev_docs is None:
        train_docs, dev_list = _split_dev(list(docs), config.dev_fraction, rng)
    else:
        train_docs, dev_list = list(docs), list(dev_docs)
    _check_classes(
        [role for doc in train_docs for _, role in doc.sentences], ROLES, "role teacher"
    )

    model = RoleTeacher(config.encoder, config.head_hidden)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    scheduler = _linear_decay(optimizer, config.epochs * len(train_docs))
    class_index = {role: i for i, role in enumerate(ROLES)}

    best_f1, best_state, history = -1.0, None, []
    for epoch in range(config.epochs):
        model.train()
        order = list(train_docs)
        rng.shuffle(order)
        epoch_loss = 0.0
        for doc in order:
            optimizer.zero_grad()
            logits = model.document_logits([text for text, _ in doc.sentences])
            targets = torch.tensor([class_index[role] for _, role in doc.sentences])
            loss = F.cross_entropy(logits, targets)
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += float(loss.detach())
        dev_f1 = _role_dev_f1(model, dev_list)
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(1, len(order)), "dev_macro_f1": dev_f1})
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if config.early_stop_dev_f1 is not None and best_f1 >= config.early_stop_dev_f1:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    model.history = history
    return model


@torch.no_grad()
def _role_dev_f1(model: RoleTeacher, docs: Sequence[RoleDocument]) -> float:
    model.eval()
    gold, pred = [], []
    for doc in docs:
        logits = model.document_logits([text for text, _ in doc.sentences])
        gold.extend(role for _, role in doc.sentences)
        pred.extend(ROLES[int(i)] for i in logits.argmax(dim=1))
    model.train()
    return macro_f1(gold, pred, ROLES)


@torch.no_grad()
def role_accuracy(model: RoleTeacher, docs: Sequence[RoleDocument]) -> float:
    model.eval()
    hits = total = 0
    for doc in docs:
        logits = model.document_logits([text for text, _ in doc.sentences])
        for (_, role), idx in zip(doc.sentences, logits.argmax(dim=1)):
            hits += int(ROLES[int(idx)] == role)
            total += 1
    return hits / total if total else 0.0


def module_fingerprint(module: nn.Module) -> str:
    """Checksum over parameter names, shapes, and exact bytes (frozen-teacher checks)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        array = tensor.detach().cpu().numpy()
        digest.update(name.encode())
        digest.update(str(array.dtype).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def teacher_pair_hash(rel: RelationTeacher, role: RoleTeacher) -> str:
    digest = hashlib.sha256()
    digest.update(module_fingerprint(rel).encode())
    digest.update(module_fingerprint(role).encode())
    return digest.hexdigest()


@torch.no_grad()
def infer_teacher_outputs(article: Article, rel: RelationTeacher, role: RoleTeacher) -> TeacherOutputs:
    """Run both frozen teachers over one article.

    The first sentence has no preceding sentence, so its local distribution is
    the uniform (0.25, 0.25, 0.25, 0.25) by rule.
    """
    rel.eval()
    role.eval()
    enc_local = encode_document(article, rel.encoder_config, rel.encoder)
    enc_global = encode_document(article, role.encoder_config, role.encoder)
    if enc_local.sentence_indices != enc_global.sentence_indices:
        raise ConfigError(
            "teacher encoders disagree on surviving sentences; align their "
            "max_input_length and subword settings"
        )
    n = enc_local.n
    s_local = enc_local.sentence_embeddings
    s_global = enc_global.sentence_embeddings

    rows = [torch.tensor(UNIFORM_LOCAL, dtype=s_local.dtype)]
    for i in range(1, n):
        rows.append(torch.softmax(rel.head(torch.cat([s_local[i - 1], s_local[i]])), dim=-1))
    p_local = torch.stack(rows) if n else torch.zeros((0, len(RELATIONS)))
    p_global = (
        torch.softmax(role.head(s_global), dim=-1) if n else torch.zeros((0, len(ROLES)))
    )
    return TeacherOutputs(
        article_id=article.article_id,
        p_local=p_local.numpy(),
        p_global=p_global.numpy(),
        s_local=s_local.numpy(),
        s_global=s_global.numpy(),
        sentence_indices=list(enc_local.sentence_indices),
        teacher_hash=teacher_pair_hash(rel, role),
    )


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_teacher_outputs(outputs: TeacherOutputs, cache_dir: str | Path) -> Path:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{outputs.article_id}.npz"
    buf = io.BytesIO()
    np.savez(
        buf,
        p_local=outputs.p_local,
        p_global=outputs.p_global,
        s_local=outputs.s_local,
        s_global=outputs.s_global,
        sentence_indices=np.asarray(outputs.sentence_indices, dtype=np.int64),
        teacher_hash=np.asarray(outputs.teacher_hash),
    )
    _atomic_write_bytes(path, buf.getvalue())
    return path


def load_teacher_outputs(
    cache_dir: str | Path, article_id: str, expected_hash: str | None = None
) -> TeacherOutputs:
    """Load one cached record; stale hash or corruption is a cache miss."""
    path = Path(cache_dir) / f"{article_id}.npz"
    if not path.exists():
        raise MissingTeacherCacheError(
            f"no cached teacher outputs for article {article_id!r}; run `propdistill cache-teacher`"
        )
    try:
        with np.load(path, allow_pickle=False) as data:
            outputs = TeacherOutputs(
                article_id=article_id,
                p_local=data["p_local"],
                p_global=data["p_global"],
                s_local=data["s_local"],
                s_global=data["s_global"],
                sentence_indices=[int(i) for i in data["sentence_indices"]],
                teacher_hash=str(data["teacher_hash"]),
            )
    except (OSError, ValueError, KeyError) as exc:
        raise MissingTeacherCacheError(f"corrupt cache record for article {article_id!r}: {exc}") from exc
    if expected_hash is not None and outputs.teacher_hash != expected_hash:
        raise MissingTeacherCacheError(
            f"stale cache record for article {article_id!r} (teacher checkpoints changed)"
        )
    return outputs


def cache_teacher_outputs(
    articles: Sequence[Article],
    rel: RelationTeacher,
    role: RoleTeacher,
    cache_dir: str | Path,
) -> dict:
    """Ensure a fresh cache record per article; valid records are not recomputed.

    Returns the manifest, which is also written to `manifest.json`.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    current_hash = teacher_pair_hash(rel, role)
    records = {}
    recomputed = []
    for article in articles:
        try:
            outputs = load_teacher_outputs(cache_dir, article.article_id, expected_hash=current_hash)
        except MissingTeacherCacheError:
            outputs = infer_teacher_outputs(article, rel, role)
            save_teacher_outputs(outputs, cache_dir)
            recomputed.append(article.article_id)
        records[article.article_id] = {
            "file": f"{article.article_id}.npz",
            "n": outputs.n,
            "teacher_hash": outputs.teacher_hash,
        }
    manifest = {"teacher_hash": current_hash, "records": records, "recomputed": recomputed}
    _atomic_write_bytes(cache_dir / CACHE_MANIFEST, json.dumps(manifest, indent=2).encode())
    return manifest


def save_teacher(teacher: RelationTeacher | RoleTeacher, path: str | Path) -> None:
    kind = "relation" if isinstance(teacher, RelationTeacher) else "role"
    head_hidden = teacher.head.second.in_features
    payload = {
        "kind": kind,
        "encoder_config": asdict(teacher.encoder_config),
        "head_hidden": head_hidden,
        "state_dict": teacher.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_teacher(path: str | Path) -> RelationTeacher | RoleTeacher:
    payload = torch.load(Path(path), weights_only=False)
    config = EncoderConfig(**payload["encoder_config"])
    cls = RelationTeacher if payload["kind"] == "relation" else RoleTeacher
    teacher = cls(config, payload["head_hidden"])
    teacher.load_state_dict(payload["state_dict"])
    teacher.eval()
    return teacher


def checkpoint_file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
