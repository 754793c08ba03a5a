"""Student models and training: feature concatenation and knowledge distillation.

Three modes share one training loop. `baseline` is the plain encoder+head
cross-entropy model, `concat` appends the 12 teacher probabilities (4 relations
+ 8 roles) to every sentence/token feature, and `distill` adds student relation
and role heads trained against the frozen teachers with response KL and
spatial-matrix MSE. Teachers are consumed only through their cached outputs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import BENIGN, PROPAGANDA, RELATIONS, ROLES, Article
from .distill import (
    LossWeights,
    RELATION_REDUCTIONS,
    build_loss_report,
    propaganda_ce,
    relation_mse,
    response_kl,
    spatial_matrix,
    total_loss,
)
from .encoder import DocumentEncoding, EncoderConfig, build_encoder, encode_document
from .errors import ConfigError, MissingTeacherCacheError, NumericalError, ValidationError
from .evaluation import MetricsReport, score
from .layers import TwoLayerHead
from .teachers import TeacherOutputs, load_teacher_outputs

CLASS_LABELS = (BENIGN, PROPAGANDA)  # column order of all 2-way outputs

LEVELS = ("sentence", "token")
MODES = ("baseline", "concat", "distill")

TEACHER_FEATURE_DIM = len(RELATIONS) + len(ROLES)  # 12


@dataclass
class TrainConfig:
    level: str = "sentence"
    mode: str = "distill"
    epochs: int = 6
    learning_rate: float | None = None  # None: 1e-3 toy backbone, 1e-5 pretrained
    weight_decay: float = 1e-2
    batch_size: int = 1  # articles per optimizer step
    seed: int = 0
    head_hidden: int | None = None
    decision_threshold: float = 0.5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    relation_loss_reduction: str = "mean"
    epsilon: float = 1e-12
    ablate_relations: tuple[str, ...] = ()
    shuffle: bool = True
    early_stop_train_f1: float | None = None
    track_train_f1: bool = False

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown level {self.level!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.relation_loss_reduction not in RELATION_REDUCTIONS:
            raise ConfigError(f"unknown relation_loss_reduction {self.relation_loss_reduction!r}")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ConfigError("decision_threshold must be in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for rel in self.ablate_relations:
            if rel not in RELATIONS:
                raise ConfigError(f"unknown relation {rel!r} in ablate_relations")


@dataclass
class Prediction:
    article_id: str
    sentence_indices: list[int]
    sentence_probs: torch.Tensor  # (n, 2), columns (benign, propaganda)
    token_probs: list[torch.Tensor]  # per surviving sentence: (m_i, 2)

    @property
    def n(self) -> int:
        return int(self.sentence_probs.shape[0])

    def sentence_labels(self, threshold: float = 0.5) -> list[str]:
        return [PROPAGANDA if float(p) >= threshold else BENIGN for p in self.sentence_probs[:, 1]]

    def token_labels(self, threshold: float = 0.5) -> list[list[str]]:
        return [
            [PROPAGANDA if float(p) >= threshold else BENIGN for p in probs[:, 1]]
            for probs in self.token_probs
        ]


class ConcatModel(nn.Module):
    """Teacher probabilities appended to every feature vector (width d + 12)."""

    def __init__(self, encoder_config: EncoderConfig, head_hidden: int | None = None):
        super().__init__()
        self.encoder_config = encoder_config
        self.encoder = build_encoder(encoder_config)
        d = encoder_config.hidden_dim
        h = head_hidden or d
        feat = d + TEACHER_FEATURE_DIM
        self.sentence_head = TwoLayerHead(feat, h, 2)
        self.token_head = TwoLayerHead(feat, h, 2)

    @property
    def feature_width(self) -> int:
        return self.sentence_head.in_dim


class DistillModel(nn.Module):
    """Propaganda head plus student relation and role heads over one encoder."""

    def __init__(self, encoder_config: EncoderConfig, head_hidden: int | None = None):
        super().__init__()
        self.encoder_config = encoder_config
        self.encoder = build_encoder(encoder_config)
        d = encoder_config.hidden_dim
        h = head_hidden or d
        self.propaganda_head = TwoLayerHead(d, h, 2)
        self.role_head = TwoLayerHead(d, h, len(ROLES))
        self.relation_head = TwoLayerHead(2 * d, h, len(RELATIONS))


@dataclass
class DistillForward:
    prediction: Prediction
    q_local: torch.Tensor  # (n, 4)
    q_global: torch.Tensor  # (n, 8)
    sentence_embeddings: torch.Tensor  # (n, d)


def _check_alignment(enc: DocumentEncoding, outputs: TeacherOutputs, article_id: str) -> None:
    if list(outputs.sentence_indices) != list(enc.sentence_indices):
        raise ValidationError(
            f"teacher cache for article {article_id!r} covers sentences "
            f"{outputs.sentence_indices}, encoder produced {enc.sentence_indices}; "
            "re-run cache-teacher with matching encoder settings"
        )


def concat_features(enc: DocumentEncoding, outputs: TeacherOutputs) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Sentence and token features with the 12 teacher probabilities appended.

    Tokens inherit the teacher probabilities of their sentence.
    """
    dtype = enc.sentence_embeddings.dtype
    p_local = torch.from_numpy(np.asarray(outputs.p_local)).to(dtype)
    p_global = torch.from_numpy(np.asarray(outputs.p_global)).to(dtype)
    sent = torch.cat([enc.sentence_embeddings, p_local, p_global], dim=1)
    tokens = []
    for i, w in enumerate(enc.token_embeddings):
        extra = torch.cat([p_local[i], p_global[i]]).expand(w.shape[0], TEACHER_FEATURE_DIM)
        tokens.append(torch.cat([w, extra], dim=1))
    return sent, tokens


def forward_concat(
    article: Article,
    teacher_outputs: TeacherOutputs | None,
    model: ConcatModel,
) -> Prediction:
    """Eq.-3-style forward: s_i (+) P_i_local (+) P_i_global through two-layer heads."""
    if teacher_outputs is None:
        raise MissingTeacherCacheError(
            f"concat mode needs cached teacher outputs for article {article.article_id!r}; "
            "run `propdistill cache-teacher`"
        )
    enc = encode_document(article, model.encoder_config, model.encoder)
    _check_alignment(enc, teacher_outputs, article.article_id)
    if enc.n == 0:
        empty = enc.sentence_embeddings.new_zeros((0, 2))
        return Prediction(article.article_id, [], empty, [])
    sent_feats, token_feats = concat_features(enc, teacher_outputs)
    sent_probs = model.sentence_head.probabilities(sent_feats)
    token_probs = [model.token_head.probabilities(f) for f in token_feats]
    return Prediction(article.article_id, list(enc.sentence_indices), sent_probs, token_probs)


def forward_distill(article: Article, model: DistillModel) -> DistillForward:
    """Propaganda head on s_i / w_ij; relation head on s_i (+) s_{i-1}; role head on s_i.

    The first sentence's pair partner is the zero vector.
    """
    enc = encode_document(article, model.encoder_config, model.encoder)
    s = enc.sentence_embeddings
    n = enc.n
    if n == 0:
        empty2 = s.new_zeros((0, 2))
        pred = Prediction(article.article_id, [], empty2, [])
        return DistillForward(pred, s.new_zeros((0, 4)), s.new_zeros((0, 8)), s)
    sent_probs = model.propaganda_head.probabilities(s)
    token_probs = [model.propaganda_head.probabilities(w) for w in enc.token_embeddings]
    previous = torch.cat([torch.zeros_like(s[:1]), s[:-1]], dim=0)
    q_local = model.relation_head.probabilities(torch.cat([s, previous], dim=1))
    q_global = model.role_head.probabilities(s)
    pred = Prediction(article.article_id, list(enc.sentence_indices), sent_probs, token_probs)
    return DistillForward(pred, q_local, q_global, s)


def ablate_relation(outputs: TeacherOutputs, relation: str | int) -> TeacherOutputs:
    """Zero one relation's column of P_local and renormalize rows.

    Rows that concentrated all mass on the removed class become uniform over the
    remaining three.
    """
    idx = RELATIONS.index(relation) if isinstance(relation, str) else int(relation)
    if not 0 <= idx < len(RELATIONS):
        raise ValidationError(f"relation index {idx} out of range")
    p = np.array(outputs.p_local, dtype=outputs.p_local.dtype, copy=True)
    p[:, idx] = 0.0
    sums = p.sum(axis=1)
    dead = sums == 0
    live = ~dead
    p[live] = p[live] / sums[live, None]
    if dead.any():
        remaining = 1.0 / (len(RELATIONS) - 1)
        p[dead] = remaining
        p[dead, idx] = 0.0
    return replace(outputs, p_local=p)


class _TeacherSource:
    """Resolves (and memoizes) per-article teacher outputs, applying ablation masks."""

    def __init__(
        self,
        source: Mapping[str, TeacherOutputs] | str | Path | None,
        ablate: Sequence[str] = (),
    ):
        self.source = source
        self.ablate = tuple(ablate)
        self._cache: dict[str, TeacherOutputs] = {}

    def get(self, article_id: str) -> TeacherOutputs:
        if article_id in self._cache:
            return self._cache[article_id]
        if self.source is None:
            raise MissingTeacherCacheError(
                f"teacher outputs required for article {article_id!r}; run `propdistill cache-teacher`"
            )
        if isinstance(self.source, Mapping):
            if article_id not in self.source:
                raise MissingTeacherCacheError(
                    f"no teacher outputs for article {article_id!r}; run `propdistill cache-teacher`"
                )
            outputs = self.source[article_id]
        else:
            outputs = load_teacher_outputs(self.source, article_id)
        for rel in self.ablate:
            outputs = ablate_relation(outputs, rel)
        self._cache[article_id] = outputs
        return outputs


def _gold_onehot(labels: Sequence[str | None], dtype) -> tuple[list[int], torch.Tensor]:
    """Indices of labeled rows and their one-hot targets in (benign, propaganda) order."""
    indices = [i for i, lab in enumerate(labels) if lab is not None]
    onehot = torch.zeros((len(indices), 2), dtype=dtype)
    for row, i in enumerate(indices):
        onehot[row, 1 if labels[i] == PROPAGANDA else 0] = 1.0
    return indices, onehot


def _surviving_labels(article: Article, indices: Sequence[int], level: str) -> list:
    sentences = [article.sentences[i] for i in indices]
    if level == "sentence":
        return [s.gold_label for s in sentences]
    return [[t.gold_label for t in s.tokens] for s in sentences]


@dataclass
class TrainResult:
    model: nn.Module
    config: TrainConfig
    encoder_config: EncoderConfig
    history: list[dict]
    best_dev_f1: float
    best_epoch: int


def _build_model(config: TrainConfig, encoder_config: EncoderConfig) -> nn.Module:
    if config.mode == "concat":
        return ConcatModel(encoder_config, config.head_hidden)
    return DistillModel(encoder_config, config.head_hidden)


def _default_lr(encoder_config: EncoderConfig) -> float:
    return 1e-5 if encoder_config.backbone == "pretrained_longdoc" else 1e-3


def _article_loss(
    article: Article,
    model: nn.Module,
    config: TrainConfig,
    teachers: _TeacherSource | None,
    teacher_matrices: dict[str, tuple[torch.Tensor, torch.Tensor]],
) -> tuple[torch.Tensor, dict[str, float]]:
    weights = config.loss_weights
    parts: dict[str, torch.Tensor] = {}

    if config.mode == "concat":
        outputs = teachers.get(article.article_id)
        enc = encode_document(article, model.encoder_config, model.encoder)
        _check_alignment(enc, outputs, article.article_id)
        sent_feats, token_feats = concat_features(enc, outputs)
        if config.level == "sentence":
            probs = model.sentence_head.probabilities(sent_feats)
            labels = _surviving_labels(article, enc.sentence_indices, "sentence")
            idx, onehot = _gold_onehot(labels, probs.dtype)
            ce = propaganda_ce(probs[idx], onehot, config.epsilon) if idx else probs.sum() * 0.0
        else:
            ce = None
            for feats, token_labels in zip(
                token_feats, _surviving_labels(article, enc.sentence_indices, "token")
            ):
                if feats.shape[0] == 0:
                    continue
                probs = model.token_head.probabilities(feats)
                idx, onehot = _gold_onehot(token_labels[: feats.shape[0]], probs.dtype)
                if idx:
                    term = propaganda_ce(probs[idx], onehot, config.epsilon)
                    ce = term if ce is None else ce + term
            if ce is None:
                ce = sent_feats.sum() * 0.0
        parts["propaganda_ce"] = ce
        total = total_loss(parts, weights, config.level)
        return total, {k: float(v.detach()) for k, v in parts.items()}

    fwd = forward_distill(article, model)
    enc_indices = fwd.prediction.sentence_indices
    if config.level == "sentence":
        labels = _surviving_labels(article, enc_indices, "sentence")
        idx, onehot = _gold_onehot(labels, fwd.prediction.sentence_probs.dtype)
        ce = (
            propaganda_ce(fwd.prediction.sentence_probs[idx], onehot, config.epsilon)
            if idx
            else fwd.sentence_embeddings.sum() * 0.0
        )
    else:
        ce = None
        for probs, token_labels in zip(
            fwd.prediction.token_probs, _surviving_labels(article, enc_indices, "token")
        ):
            if probs.shape[0] == 0:
                continue
            idx, onehot = _gold_onehot(token_labels[: probs.shape[0]], probs.dtype)
            if idx:
                term = propaganda_ce(probs[idx], onehot, config.epsilon)
                ce = term if ce is None else ce + term
        if ce is None:
            ce = fwd.sentence_embeddings.sum() * 0.0
    parts["propaganda_ce"] = ce

    if config.mode == "distill" and fwd.prediction.n > 0:
        need_response = weights.response_local > 0 or weights.response_global > 0
        need_relation = weights.relation_local > 0 or weights.relation_global > 0
        if need_response or need_relation:
            outputs = teachers.get(article.article_id)
            _check_alignment_ids(enc_indices, outputs, article.article_id)
            dtype = fwd.sentence_embeddings.dtype
            if weights.response_local > 0:
                p_local = torch.from_numpy(np.asarray(outputs.p_local)).to(dtype)
                parts["response_local"] = response_kl(p_local, fwd.q_local, config.epsilon)
            if weights.response_global > 0:
                p_global = torch.from_numpy(np.asarray(outputs.p_global)).to(dtype)
                parts["response_global"] = response_kl(p_global, fwd.q_global, config.epsilon)
            if need_relation:
                m_student = spatial_matrix(fwd.sentence_embeddings)
                key = article.article_id
                if key not in teacher_matrices:
                    m_local = (
                        spatial_matrix(torch.from_numpy(np.asarray(outputs.s_local)).to(dtype))
                        if weights.relation_local > 0
                        else None
                    )
                    m_global = (
                        spatial_matrix(torch.from_numpy(np.asarray(outputs.s_global)).to(dtype))
                        if weights.relation_global > 0
                        else None
                    )
                    teacher_matrices[key] = (m_local, m_global)
                m_local, m_global = teacher_matrices[key]
                if weights.relation_local > 0:
                    parts["relation_local"] = relation_mse(
                        m_local, m_student, config.relation_loss_reduction
                    )
                if weights.relation_global > 0:
                    parts["relation_global"] = relation_mse(
                        m_global, m_student, config.relation_loss_reduction
                    )
    total = total_loss(parts, weights, config.level)
    return total, {k: float(v.detach()) for k, v in parts.items()}


def _check_alignment_ids(indices: Sequence[int], outputs: TeacherOutputs, article_id: str) -> None:
    if list(outputs.sentence_indices) != list(indices):
        raise ValidationError(
            f"teacher cache for article {article_id!r} covers sentences "
            f"{outputs.sentence_indices}, encoder produced {list(indices)}; "
            "re-run cache-teacher with matching encoder settings"
        )


def predict_article(
    article: Article,
    model: nn.Module,
    config: TrainConfig,
    teachers: _TeacherSource | None = None,
) -> Prediction:
    model.eval()
    with torch.no_grad():
        if config.mode == "concat":
            outputs = teachers.get(article.article_id) if teachers is not None else None
            return forward_concat(article, outputs, model)
        return forward_distill(article, model).prediction


def collect_units(
    articles: Sequence[Article],
    model: nn.Module,
    config: TrainConfig,
    teachers: _TeacherSource | None,
    level: str,
) -> tuple[dict, dict]:
    """Prediction and gold maps over identical unit keys.

    Labeled sentences/tokens lost to truncation are predicted benign.
    """
    predictions: dict = {}
    gold: dict = {}
    threshold = config.decision_threshold
    for article in articles:
        pred = predict_article(article, model, config, teachers)
        if level == "sentence":
            labels = pred.sentence_labels(threshold)
            by_index = dict(zip(pred.sentence_indices, labels))
            for sentence in article.sentences:
                if sentence.gold_label is None:
                    continue
                key = (article.article_id, sentence.index)
                gold[key] = sentence.gold_label
                predictions[key] = by_index.get(sentence.index, BENIGN)
        else:
            token_labels = pred.token_labels(threshold)
            by_index = dict(zip(pred.sentence_indices, token_labels))
            for sentence in article.sentences:
                for t_idx, token in enumerate(sentence.tokens):
                    if token.gold_label is None:
                        continue
                    key = (article.article_id, sentence.index, t_idx)
                    gold[key] = token.gold_label
                    row = by_index.get(sentence.index)
                    if row is not None and t_idx < len(row):
                        predictions[key] = row[t_idx]
                    else:
                        predictions[key] = BENIGN
    return predictions, gold


def evaluate_student(
    articles: Sequence[Article],
    model: nn.Module,
    config: TrainConfig,
    teachers: _TeacherSource | None = None,
) -> MetricsReport:
    predictions, gold = collect_units(articles, model, config, teachers, config.level)
    if not gold:
        raise ValidationError(f"no gold {config.level}-level labels in the evaluated articles")
    return score(predictions, gold, config.level)


def train_student(
    articles: Sequence[Article],
    teacher_cache: Mapping[str, TeacherOutputs] | str | Path | None,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
) -> TrainResult:
    """Optimize the configured student on the train split; select by dev propaganda F1.

    `teacher_cache` is a mapping article_id -> TeacherOutputs or a cache
    directory; it may be None for baseline mode. Deterministic given the seed.
    Aborts with NumericalError (carrying the last finite report) on divergence.
    """
    encoder_config = encoder_config or EncoderConfig()
    train_articles = [a for a in articles if a.split == "train"]
    dev_articles = [a for a in articles if a.split == "dev"]
    if not train_articles:
        raise ValidationError("no articles with split='train'")
    selection_articles = dev_articles or train_articles

    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    model = _build_model(config, encoder_config)
    lr = config.learning_rate if config.learning_rate is not None else _default_lr(encoder_config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train_articles) / config.batch_size)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: max(0.0, 1.0 - step / max(1, config.epochs * steps_per_epoch)),
    )

    needs_teachers = config.mode in ("concat", "distill")
    teachers = _TeacherSource(teacher_cache, config.ablate_relations) if needs_teachers else None
    teacher_matrices: dict[str, tuple] = {}

    history: list[dict] = []
    best_f1, best_state, best_epoch = -1.0, None, -1
    last_report = None
    for epoch in range(config.epochs):
        model.train()
        order = list(train_articles)
        if config.shuffle:
            rng.shuffle(order)
        sums: dict[str, float] = {}
        total_sum = 0.0
        optimizer.zero_grad()
        pending = 0
        for pos, article in enumerate(order):
            try:
                total, parts = _article_loss(article, model, config, teachers, teacher_matrices)
            except NumericalError as exc:
                exc.last_report = last_report
                raise
            total.backward()
            pending += 1
            if pending == config.batch_size or pos == len(order) - 1:
                optimizer.step()
                scheduler.step()
                optimizer.zero_grad()
                pending = 0
            for name, value in parts.items():
                sums[name] = sums.get(name, 0.0) + value
            total_sum += float(total.detach())

        n_train = len(order)
        mean_parts = {k: v / n_train for k, v in sums.items()}
        report = build_loss_report(mean_parts, config.loss_weights, config.level, total_sum / n_train)
        last_report = report

        dev_f1 = evaluate_student(selection_articles, model, config, teachers).f1
        entry = {"epoch": epoch, **report.as_dict(), "dev_f1": dev_f1}
        if config.track_train_f1 or config.early_stop_train_f1 is not None:
            entry["train_f1"] = evaluate_student(train_articles, model, config, teachers).f1
        history.append(entry)
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if (
            config.early_stop_train_f1 is not None
            and entry["train_f1"] >= config.early_stop_train_f1
        ):
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, config, encoder_config, history, best_f1, best_epoch)


@dataclass
class StudentCheckpoint:
    model: nn.Module
    config: TrainConfig
    encoder_config: EncoderConfig


def save_student(result: TrainResult | StudentCheckpoint, path: str | Path) -> None:
    from dataclasses import asdict

    payload = {
        "train_config": asdict(result.config),
        "encoder_config": asdict(result.encoder_config),
        "state_dict": result.model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_student(path: str | Path) -> StudentCheckpoint:
    payload = torch.load(Path(path), weights_only=False)
    tc = dict(payload["train_config"])
    tc["loss_weights"] = LossWeights(**tc["loss_weights"])
    tc["ablate_relations"] = tuple(tc["ablate_relations"])
    config = TrainConfig(**tc)
    encoder_config = EncoderConfig(**payload["encoder_config"])
    model = _build_model(config, encoder_config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint does not match the configured architecture: {exc}") from exc
    model.eval()
    return StudentCheckpoint(model, config, encoder_config)


@dataclass
class ExplainedPrediction:
    prediction: Prediction
    explanations: list[dict]  # per surviving sentence: label, probability, teacher argmaxes


def predict(
    article: Article,
    checkpoint: StudentCheckpoint | TrainResult,
    teacher_outputs: TeacherOutputs | None = None,
    threshold: float | None = None,
) -> ExplainedPrediction:
    """Deterministic labels for one article plus per-sentence teacher explanations.

    Explanations (relation/role argmax) are attached only when teacher outputs
    are available; the first sentence has no preceding sentence, hence no
    relation explanation.
    """
    config = checkpoint.config
    threshold = config.decision_threshold if threshold is None else threshold
    teachers = None
    if config.mode == "concat" or teacher_outputs is not None:
        source = {article.article_id: teacher_outputs} if teacher_outputs is not None else None
        teachers = _TeacherSource(source, config.ablate_relations)
    prediction = predict_article(article, checkpoint.model, config, teachers)
    labels = prediction.sentence_labels(threshold)
    masked = teachers.get(article.article_id) if teachers is not None else None
    explanations = []
    for row, (sent_idx, label) in enumerate(zip(prediction.sentence_indices, labels)):
        entry = {
            "sentence_index": sent_idx,
            "label": label,
            "p_propaganda": float(prediction.sentence_probs[row, 1]),
        }
        if masked is not None:
            entry["relation"] = RELATIONS[int(np.argmax(masked.p_local[row]))] if row > 0 else None
            entry["role"] = ROLES[int(np.argmax(masked.p_global[row]))]
        explanations.append(entry)
    return ExplainedPrediction(prediction, explanations)
