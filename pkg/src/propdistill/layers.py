"""Shared classification head."""

from __future__ import annotations

import torch
from torch import nn


class TwoLayerHead(nn.Module):
    """softmax(W2 (W1 x + b1) + b2), exposed as logits; no hidden activation."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.first = nn.Linear(in_dim, hidden_dim)
        self.second = nn.Linear(hidden_dim, out_dim)

    @property
    def in_dim(self) -> int:
        return self.first.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.second(self.first(x))

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(x), dim=-1)
