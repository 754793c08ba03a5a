"""Document encoding: whole-article transformers emitting sentence and token embeddings.

A document is laid out as `<s> w11 w12 ... <s> w21 ...`: one marker token per
sentence followed by the subwords of its word tokens. Sentence embeddings are the
hidden states at the markers; a word token's embedding is the mean of its subword
hidden states. Two backbones implement the contract: `toy_random`, a small
randomly initialized transformer for desk-scale runs, and `pretrained_longdoc`,
a pretrained long-document model loaded through `transformers`.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .corpus import Article
from .errors import ConfigError

logger = logging.getLogger(__name__)

BACKBONES = ("toy_random", "pretrained_longdoc")


@dataclass
class EncoderConfig:
    backbone: str = "toy_random"
    hidden_dim: int = 16
    max_input_length: int = 4096
    sentence_marker: str = "<s>"
    num_layers: int = 2
    num_heads: int = 2
    vocab_buckets: int = 2048
    subword_max_chars: int = 4
    pretrained_name: str = "allenai/longformer-base-4096"
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown encoder backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.hidden_dim <= 0 or self.max_input_length <= 0:
            raise ConfigError("hidden_dim and max_input_length must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")


@dataclass
class DocumentEncoding:
    """Per-document embeddings restricted to sentences that survived truncation."""

    sentence_embeddings: torch.Tensor  # (n, d)
    token_embeddings: list[torch.Tensor]  # per surviving sentence: (m_i, d)
    sentence_indices: list[int]  # original sentence indices
    truncation_flag: bool

    @property
    def n(self) -> int:
        return int(self.sentence_embeddings.shape[0])


@dataclass
class _Layout:
    ids: list[int]
    sentence_ids: list[int]  # owning sentence per position
    marker_positions: list[int]  # one per sentence, in document order
    token_slices: list[list[tuple[int, int]]]  # per sentence, per token: [first, last) positions


def subword_spans(start: int, end: int, max_chars: int) -> list[tuple[int, int]]:
    """Deterministic subword segmentation of a token: fixed-width character chunks."""
    return [(s, min(s + max_chars, end)) for s in range(start, end, max_chars)]


def _hash_bucket(piece: str, buckets: int) -> int:
    # Bucket 0 is reserved for the sentence marker.
    return zlib.crc32(piece.encode("utf-8")) % (buckets - 1) + 1


class ToyDocumentEncoder(nn.Module):
    """Small randomly initialized transformer over hashed subword embeddings.

    Attention mirrors the long-document pattern at miniature scale: positions
    attend within their own sentence, and sentence markers additionally attend
    to each other, which is how information flows across sentences. Positions
    use fixed sinusoidal encodings; dropout is zero, so outputs are
    deterministic under fixed parameters.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.embedding = nn.Embedding(config.vocab_buckets, d)
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.num_heads,
            dim_feedforward=2 * d,
            dropout=0.0,
            batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, config.num_layers, enable_nested_tensor=False)

    def word_ids(self, piece: str) -> int:
        return _hash_bucket(piece, self.config.vocab_buckets)

    def marker_id(self) -> int:
        return 0

    def _positional(self, length: int, dtype, device) -> torch.Tensor:
        d = self.config.hidden_dim
        position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
        div = torch.exp(torch.arange(0, d, 2, dtype=dtype, device=device) * (-math.log(10000.0) / d))
        enc = torch.zeros(length, d, dtype=dtype, device=device)
        enc[:, 0::2] = torch.sin(position * div)
        enc[:, 1::2] = torch.cos(position * div[: d // 2])
        return enc

    @staticmethod
    def _attention_mask(sentence_ids: torch.Tensor, is_marker: torch.Tensor) -> torch.Tensor:
        same_sentence = sentence_ids.unsqueeze(0) == sentence_ids.unsqueeze(1)
        marker_pair = is_marker.unsqueeze(0) & is_marker.unsqueeze(1)
        return ~(same_sentence | marker_pair)  # True = blocked

    def forward(self, ids: Sequence[int], sentence_ids: Sequence[int] | None = None) -> torch.Tensor:
        dtype = self.embedding.weight.dtype
        device = self.embedding.weight.device
        id_tensor = torch.tensor(list(ids), dtype=torch.long, device=device).unsqueeze(0)
        x = self.embedding(id_tensor) + self._positional(id_tensor.shape[1], dtype, device)
        mask = None
        if sentence_ids is not None:
            sid = torch.tensor(list(sentence_ids), dtype=torch.long, device=device)
            mask = self._attention_mask(sid, id_tensor.squeeze(0) == self.marker_id())
        return self.transformer(x, mask=mask).squeeze(0)  # (L, d)


class PretrainedDocumentEncoder(nn.Module):
    """Pretrained long-document backbone behind the same layout contract.

    Requires the optional `transformers` dependency and a fetchable or local
    checkpoint. Not used by the desk-scale test suite.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConfigError(
                "backbone 'pretrained_longdoc' requires the 'transformers' package "
                "(pip install propdistill[pretrained])"
            ) from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(config.pretrained_name)
            self.model = AutoModel.from_pretrained(config.pretrained_name)
        except Exception as exc:  # pragma: no cover - needs network or local files
            raise ConfigError(f"could not load pretrained backbone {config.pretrained_name!r}: {exc}") from exc
        self.config = config
        hidden = int(self.model.config.hidden_size)
        if hidden != config.hidden_dim:
            raise ConfigError(
                f"encoder.hidden_dim={config.hidden_dim} does not match "
                f"{config.pretrained_name!r} hidden size {hidden}"
            )
        marker = self.tokenizer.convert_tokens_to_ids(config.sentence_marker)
        if marker is None or marker == self.tokenizer.unk_token_id:
            raise ConfigError(f"sentence marker {config.sentence_marker!r} unknown to the tokenizer")
        self._marker_id = int(marker)

    def word_ids(self, piece: str) -> int:  # pragma: no cover - exercised only with checkpoints
        ids = self.tokenizer(piece, add_special_tokens=False)["input_ids"]
        return ids[0] if ids else self.tokenizer.unk_token_id

    def marker_id(self) -> int:
        return self._marker_id

    def forward(self, ids: Sequence[int], sentence_ids: Sequence[int] | None = None) -> torch.Tensor:  # pragma: no cover
        # sentence_ids are unused: the pretrained model brings its own attention pattern.
        id_tensor = torch.tensor(list(ids), dtype=torch.long).unsqueeze(0)
        mask = torch.ones_like(id_tensor)
        kwargs = {}
        if "global_attention_mask" in self.model.forward.__code__.co_varnames:
            glob = torch.zeros_like(id_tensor)
            glob[id_tensor == self._marker_id] = 1
            kwargs["global_attention_mask"] = glob
        out = self.model(input_ids=id_tensor, attention_mask=mask, **kwargs)
        return out.last_hidden_state.squeeze(0)


def build_encoder(config: EncoderConfig) -> nn.Module:
    """Instantiate the configured backbone; toy weights are seeded from config.seed."""
    if config.backbone == "toy_random":
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            return ToyDocumentEncoder(config)
    return PretrainedDocumentEncoder(config)


def _layout_article(article: Article, model: nn.Module, config: EncoderConfig) -> _Layout:
    ids: list[int] = []
    sentence_ids: list[int] = []
    marker_positions = []
    token_slices = []
    for sent_idx, sentence in enumerate(article.sentences):
        marker_positions.append(len(ids))
        ids.append(model.marker_id())
        sentence_ids.append(sent_idx)
        slices = []
        for token in sentence.tokens:
            first = len(ids)
            for s, e in subword_spans(token.start, token.end, config.subword_max_chars):
                ids.append(model.word_ids(article.text[s:e]))
                sentence_ids.append(sent_idx)
            slices.append((first, len(ids)))
        token_slices.append(slices)
    return _Layout(ids, sentence_ids, marker_positions, token_slices)


def encode_document(article: Article, config: EncoderConfig, model: nn.Module) -> DocumentEncoding:
    """Encode a whole article into sentence and per-token embeddings.

    Articles longer than `config.max_input_length` positions are tail-truncated:
    sentences whose marker fell past the budget are dropped (callers exclude them
    from losses and score them benign), and tokens with any truncated subword get
    no embedding row.
    """
    if getattr(model, "config", None) is not None and model.config.hidden_dim != config.hidden_dim:
        raise ConfigError(
            f"encoder model hidden_dim {model.config.hidden_dim} != config hidden_dim {config.hidden_dim}"
        )
    layout = _layout_article(article, model, config)
    budget = config.max_input_length
    total = len(layout.ids)
    truncated = total > budget
    if truncated:
        logger.warning(
            "article %s: %d positions exceed budget %d; tail truncated", article.article_id, total, budget
        )

    if not article.sentences:
        d = config.hidden_dim
        empty = torch.zeros((0, d))
        return DocumentEncoding(empty, [], [], truncated)

    if truncated:
        hidden = model(layout.ids[:budget], layout.sentence_ids[:budget])
    else:
        hidden = model(layout.ids, layout.sentence_ids)

    sentence_rows = []
    token_rows: list[torch.Tensor] = []
    sentence_indices = []
    for i, marker_pos in enumerate(layout.marker_positions):
        if marker_pos >= budget:
            break
        sentence_indices.append(i)
        sentence_rows.append(hidden[marker_pos])
        kept = [hidden[first:last].mean(dim=0) for first, last in layout.token_slices[i] if last <= budget]
        token_rows.append(torch.stack(kept) if kept else hidden.new_zeros((0, config.hidden_dim)))
    return DocumentEncoding(torch.stack(sentence_rows), token_rows, sentence_indices, truncated)


def pair_embedding(enc: DocumentEncoding, i: int) -> torch.Tensor:
    """Concatenation s_{i-1} (+) s_i; the first sentence pairs with the zero vector."""
    if not (0 <= i < enc.n):
        raise IndexError(f"sentence index {i} out of range for document with {enc.n} sentences")
    current = enc.sentence_embeddings[i]
    previous = enc.sentence_embeddings[i - 1] if i >= 1 else torch.zeros_like(current)
    return torch.cat([previous, current])
