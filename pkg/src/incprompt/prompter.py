"""Task-aware prompt generators and the prefix attention rule they feed."""
from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import PromptSchedule, attention, pooled_feature
from .errors import ConfigError

__all__ = ["TaskPrompter", "divide", "generate_prompt", "join", "prompted_attention", "prompts_by_layer"]


class TaskPrompter(nn.Module):
    """Two-layer MLP mapping a pooled feature to ``[layers, 2, L_p, D]`` prompts."""

    def __init__(self, task_id: int, embed_dim: int, schedule: PromptSchedule,
                 hidden_dim: int | None = None, activation: str = "gelu",
                 out_std: float = 0.02):
        super().__init__()
        acts = {"relu": nn.ReLU, "gelu": nn.GELU}
        if activation not in acts:
            raise ConfigError(f"activation must be one of {sorted(acts)}, got {activation!r}")
        self.task_id = task_id
        self.embed_dim = embed_dim
        self.schedule = schedule
        self.layers = schedule.active_layers
        self.hidden_dim = embed_dim if hidden_dim is None else hidden_dim
        self.out_shape = (len(self.layers), 2, schedule.prompt_length, embed_dim)
        out_dim = len(self.layers) * 2 * schedule.prompt_length * embed_dim
        self.fc1 = nn.Linear(embed_dim, self.hidden_dim)
        self.act = acts[activation]()
        # L_p = 0 or no prompted layers: nothing to generate.
        self.fc2 = nn.Linear(self.hidden_dim, out_dim) if out_dim else None
        if self.fc2 is not None:
            nn.init.normal_(self.fc2.weight, std=out_std)
            nn.init.normal_(self.fc2.bias, std=out_std)

    @property
    def output_size(self) -> int:
        return 0 if self.fc2 is None else self.fc2.out_features

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[-1] != self.embed_dim:
            raise ConfigError(
                f"prompter expects {self.embed_dim}-dim features, got {feature.shape[-1]}"
            )
        feature = feature.to(self.fc1.weight.dtype)
        if self.fc2 is None:
            return feature.new_zeros(*feature.shape[:-1], *self.out_shape)
        out = self.fc2(self.act(self.fc1(feature)))
        return out.reshape(*feature.shape[:-1], *self.out_shape)


def generate_prompt(prompter: TaskPrompter, tokens, pool: str = "mean") -> torch.Tensor:
    """Prompts for each input from its prompt-free tokens: ``[batch, layers, 2, L_p, D]``."""
    return prompter(pooled_feature(tokens, pool))


def divide(P: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a prompt on its key/value axis (third from last)."""
    if P.ndim < 3 or P.shape[-3] != 2:
        raise ConfigError(f"prompt needs a size-2 key/value axis at dim -3, got {tuple(P.shape)}")
    return P.select(-3, 0), P.select(-3, 1)


def join(P_k: torch.Tensor, P_v: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`divide`."""
    return torch.stack([P_k, P_v], dim=-3)


def prompts_by_layer(P: torch.Tensor, schedule: PromptSchedule) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    """Map a ``[batch, layers, 2, L_p, D]`` prompt onto the scheduled block indices."""
    P_k, P_v = divide(P)
    layers = schedule.active_layers
    if P_k.shape[-3] != len(layers):
        raise ConfigError(f"prompt covers {P_k.shape[-3]} layers, schedule has {len(layers)}")
    return {layer: (P_k[..., i, :, :], P_v[..., i, :, :]) for i, layer in enumerate(layers)}


def prompted_attention(Q, K, V, P_k, P_v, *, return_weights=False):
    """Attention with prompt rows prefixed to the keys and values."""
    if P_k.shape[-2] != P_v.shape[-2]:
        raise ConfigError(f"P_k has {P_k.shape[-2]} rows but P_v has {P_v.shape[-2]}")
    return attention(Q, torch.cat([P_k, K], dim=-2), torch.cat([P_v, V], dim=-2),
                     return_weights=return_weights)
