"""Loss functions: propaganda cross-entropy, response KL, and spatial-relation MSE.

All functions are stateless and dtype-preserving. Teacher-side arguments are
treated as constants: no gradient flows into them. Probabilities are clamped at
`epsilon` inside logarithms for numerical safety.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from typing import Mapping

import torch

from .errors import NumericalError

EPSILON = 1e-12

LEVELS = ("sentence", "token")

# Reduction for the spatial-matrix MSE. "mean" averages over off-diagonal pairs
# so the term does not scale with document length; "sum" is the literal
# all-pairs sum of squared differences.
RELATION_REDUCTIONS = ("mean", "sum")


@dataclass
class LossWeights:
    """Coefficients for the objective terms; all 1.0 recovers the unweighted sums."""

    propaganda: float = 1.0
    response_local: float = 1.0
    response_global: float = 1.0
    relation_local: float = 1.0
    relation_global: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {value}")


@dataclass
class LossReport:
    """Per-batch decomposition; `total` is the weighted sum of the parts."""

    loss_sent_propa: float = 0.0
    loss_token_propa: float = 0.0
    loss_response_local: float = 0.0
    loss_response_global: float = 0.0
    loss_relation_local: float = 0.0
    loss_relation_global: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _as_tensor(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x)
    return t if t.is_floating_point() else t.to(torch.get_default_dtype())


def propaganda_ce(q: torch.Tensor, gold, epsilon: float = EPSILON) -> torch.Tensor:
    """-sum_i P_i . log Q_i over predicted distributions `q` (rows sum to 1).

    `gold` is either a vector of class indices or a one-hot matrix of the same
    shape as `q`. The token variant is the same sum taken over all (i, j) rows.
    """
    q = _as_tensor(q)
    gold = torch.as_tensor(gold)
    if gold.dim() == q.dim():
        onehot = gold.to(q.dtype)
    else:
        onehot = torch.nn.functional.one_hot(gold.long(), num_classes=q.shape[-1]).to(q.dtype)
    return -(onehot * torch.log(q.clamp(min=epsilon))).sum()


def response_kl(p_teacher: torch.Tensor, q_student: torch.Tensor, epsilon: float = EPSILON) -> torch.Tensor:
    """Forward KL sum_i sum_c P_ic log(P_ic / Q_ic) with the teacher as target.

    Teacher cells with P_ic = 0 contribute exactly zero; student cells are
    clamped at epsilon. The teacher argument is detached.
    """
    p = _as_tensor(p_teacher).detach()
    q = _as_tensor(q_student)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: teacher {tuple(p.shape)} vs student {tuple(q.shape)}")
    log_ratio = torch.log(p.clamp(min=epsilon)) - torch.log(q.clamp(min=epsilon))
    return torch.where(p > 0, p * log_ratio, torch.zeros_like(q)).sum()


def spatial_matrix(s: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities M_ik = cosine(s_i, s_k); symmetric, unit diagonal.

    Zero-norm rows get cosine 0 off-diagonal (and 1 on the diagonal) with a warning.
    """
    s = _as_tensor(s)
    norms = torch.linalg.vector_norm(s, dim=1, keepdim=True)
    zero_rows = norms.squeeze(1) == 0
    if bool(zero_rows.any()):
        warnings.warn("spatial_matrix: zero-norm embedding rows; their cosines are defined as 0")
    unit = s / torch.where(norms > 0, norms, torch.ones_like(norms))
    m = unit @ unit.T
    m = 0.5 * (m + m.T)  # exact symmetry against BLAS rounding asymmetries
    m = m - torch.diag(torch.diagonal(m)) + torch.eye(m.shape[0], dtype=m.dtype, device=m.device)
    return m


def relation_mse(m_teacher: torch.Tensor, m_student: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared differences between two spatial matrices.

    "mean" averages over ordered off-diagonal pairs (the diagonals are
    identically 1, so they carry no signal); "sum" is the literal all-pairs sum.
    A 1x1 matrix has no off-diagonal pairs and yields 0.
    """
    mt = _as_tensor(m_teacher).detach()
    ms = _as_tensor(m_student)
    if mt.shape != ms.shape:
        raise ValueError(f"shape mismatch: teacher {tuple(mt.shape)} vs student {tuple(ms.shape)}")
    if reduction not in RELATION_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    n = ms.shape[0]
    sq = (mt - ms) ** 2
    if reduction == "sum":
        return sq.sum()
    if n <= 1:
        return (ms * 0).sum()
    off = ~torch.eye(n, dtype=torch.bool, device=ms.device)
    return sq[off].mean()


_PART_WEIGHTS = {
    "propaganda_ce": "propaganda",
    "response_local": "response_local",
    "response_global": "response_global",
    "relation_local": "relation_local",
    "relation_global": "relation_global",
}


def total_loss(parts: Mapping[str, torch.Tensor | float], weights: LossWeights, level: str) -> torch.Tensor:
    """Weighted objective: w * CE + response and relation terms for both structures.

    `parts` maps term names (propaganda_ce, response_local, response_global,
    relation_local, relation_global) to values; missing terms count as zero.
    A weight of exactly 0 removes a term. NaN/inf in any part aborts, naming it.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    unknown = set(parts) - set(_PART_WEIGHTS)
    if unknown:
        raise ValueError(f"unknown loss parts: {sorted(unknown)}")
    total = None
    for name, weight_name in _PART_WEIGHTS.items():
        if name not in parts:
            continue
        value = _as_tensor(parts[name])
        if not bool(torch.isfinite(value).all()):
            raise NumericalError(f"loss term {name!r} is not finite at {level} level")
        weight = getattr(weights, weight_name)
        if weight == 0.0:
            continue
        term = value * weight
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return total


def build_loss_report(
    parts: Mapping[str, float], weights: LossWeights, level: str, total: float
) -> LossReport:
    ce = float(parts.get("propaganda_ce", 0.0))
    return LossReport(
        loss_sent_propa=ce if level == "sentence" else 0.0,
        loss_token_propa=ce if level == "token" else 0.0,
        loss_response_local=float(parts.get("response_local", 0.0)),
        loss_response_global=float(parts.get("response_global", 0.0)),
        loss_relation_local=float(parts.get("relation_local", 0.0)),
        loss_relation_global=float(parts.get("relation_global", 0.0)),
        total=float(total),
    )
