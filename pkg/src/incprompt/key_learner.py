"""Per-task key learners, their triplet + L1 objective, and test-time task matching."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TokenBatch, attention, pooled_feature
from .errors import ConfigError, NoNegativeAvailable

__all__ = [
    "KeyLearner",
    "KeyLossConfig",
    "compute_key",
    "key_loss",
    "l1_reg",
    "match_task",
    "mine_negative",
    "similarity",
    "triplet_loss",
]


@dataclass(frozen=True)
class KeyLossConfig:
    margin: float = 0.5
    lambda_reg: float = 0.01

    def __post_init__(self):
        for name in ("margin", "lambda_reg"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")


class KeyLearner(nn.Module):
    """Single-head self-attention over backbone tokens, pooled to one key per input.

    The value projection starts at zero so a fresh learner only responds along
    directions its own task's tokens have pushed it towards.
    """

    def __init__(self, task_id: int, embed_dim: int, key_dim: int | None = None,
                 pool: str = "mean", init_std: float = 0.02):
        super().__init__()
        key_dim = embed_dim if key_dim is None else key_dim
        if key_dim <= 0:
            raise ConfigError(f"key_dim must be positive, got {key_dim}")
        if pool not in ("cls", "mean"):
            raise ConfigError(f"unknown pooling mode {pool!r}")
        self.task_id = task_id
        self.embed_dim = embed_dim
        self.key_dim = key_dim
        self.pool = pool
        self.W_q = nn.Parameter(torch.randn(embed_dim, key_dim) * init_std)
        self.W_k = nn.Parameter(torch.randn(embed_dim, key_dim) * init_std)
        self.W_v = nn.Parameter(torch.zeros(embed_dim, key_dim))

    def forward(self, tokens):
        return compute_key(self, tokens)


def _tokens(tokens) -> torch.Tensor:
    return tokens.tokens if isinstance(tokens, TokenBatch) else tokens


def compute_key(learner: KeyLearner, tokens) -> torch.Tensor:
    """Attention pass through the learner's projections, then pooling: ``[batch, key_dim]``."""
    x = _tokens(tokens)
    if x.ndim != 3 or x.shape[-1] != learner.embed_dim:
        raise ConfigError(
            f"key learner expects [batch, seq, {learner.embed_dim}] tokens, got {tuple(x.shape)}"
        )
    x = x.to(learner.W_q.dtype)
    out = attention(x @ learner.W_q, x @ learner.W_k, x @ learner.W_v)
    return pooled_feature(out, learner.pool)


def similarity(keys: torch.Tensor, feature: torch.Tensor, kind: str = "cosine") -> torch.Tensor:
    """Row-wise similarity between ``keys`` and ``feature`` (both ``[..., dim]``)."""
    if kind == "cosine":
        return F.cosine_similarity(keys, feature, dim=-1, eps=1e-12)
    if kind == "euclidean":
        return -((keys - feature) ** 2).sum(-1)
    raise ConfigError(f"unknown similarity {kind!r}")


def _all_keys(tokens, learners: Sequence[KeyLearner]) -> torch.Tensor:
    # [num_learners, batch, key_dim]
    return torch.stack([compute_key(l, tokens) for l in learners])


def mine_negative(anchor_task: int, tokens, all_learners: Sequence[KeyLearner],
                  *, kind: str = "cosine", feature: torch.Tensor | None = None) -> torch.Tensor:
    """Hard-negative key for every input in the batch.

    Among learners whose ``task_id`` differs from ``anchor_task``, pick (per
    input) the one whose key is most similar to the pooled tokens. Computed
    without gradients: only the anchor learner is being trained. Ties go to the
    lowest task id.
    """
    others = sorted((l for l in all_learners if l.task_id != anchor_task), key=lambda l: l.task_id)
    if not others:
        raise NoNegativeAvailable(f"no key learner other than task {anchor_task}")
    with torch.no_grad():
        keys = _all_keys(tokens, others)
        if feature is None:
            feature = pooled_feature(_tokens(tokens), "mean")
        sims = similarity(keys, feature.to(keys.dtype).unsqueeze(0), kind)
        best = sims.argmax(dim=0)
        return keys[best, torch.arange(keys.shape[1])]


def triplet_loss(T_k: torch.Tensor, K_a: torch.Tensor, K_n: torch.Tensor, margin: float) -> torch.Tensor:
    """Σ_i max(0, ‖T_k − K_a‖² − ‖T_k − K_n‖² + margin)."""
    if not (T_k.shape == K_a.shape == K_n.shape):
        raise ConfigError(
            f"triplet shapes differ: {tuple(T_k.shape)}, {tuple(K_a.shape)}, {tuple(K_n.shape)}"
        )
    if margin < 0:
        raise ConfigError("margin must be >= 0")
    pos = ((T_k - K_a) ** 2).sum(-1)
    neg = ((T_k - K_n) ** 2).sum(-1)
    return torch.clamp(pos - neg + margin, min=0).sum()


def l1_reg(K_a: torch.Tensor) -> torch.Tensor:
    # torch's abs has subgradient 0 at exactly 0.
    return K_a.abs().sum()


def key_loss(T_k, K_a, K_n, cfg: KeyLossConfig) -> torch.Tensor:
    """``lambda_reg * L1(K_a) + triplet``; the triplet term is dropped when ``K_n`` is None."""
    loss = cfg.lambda_reg * l1_reg(K_a)
    if K_n is not None:
        loss = loss + triplet_loss(T_k, K_a, K_n, cfg.margin)
    return loss


def match_task(tokens, all_learners: Sequence[KeyLearner], *, kind: str = "cosine",
               feature: torch.Tensor | None = None) -> torch.Tensor:
    """Task id of the best-matching learner for each input (``[batch]`` long tensor)."""
    if not all_learners:
        raise ConfigError("match_task needs at least one key learner")
    learners = sorted(all_learners, key=lambda l: l.task_id)
    with torch.no_grad():
        keys = _all_keys(tokens, learners)
        if feature is None:
            feature = pooled_feature(_tokens(tokens), "mean")
        sims = similarity(keys, feature.to(keys.dtype).unsqueeze(0), kind)
        # argmax returns the first maximum, i.e. the lowest task id on ties.
        idx = sims.argmax(dim=0)
    ids = torch.tensor([l.task_id for l in learners], dtype=torch.long)
    return ids[idx]
