"""Small vision transformer whose attention layers accept prefix prompts.

The encoder is randomly initialised and (by default) frozen. Prompts enter a
block as extra key/value rows only, so they never show up as output tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn as nn

from .errors import ConfigError, NumericError

__all__ = [
    "BackboneConfig",
    "PromptSchedule",
    "TokenBatch",
    "VisionTransformer",
    "attention",
    "to_patches",
    "pooled_feature",
]


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    channels: int = 1
    frozen: bool = True

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}"
            )
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim={self.embed_dim} must be a positive multiple of num_heads={self.num_heads}"
            )
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class PromptSchedule:
    """Which blocks receive prefix prompts and how many tokens each gets."""

    layers: tuple[int, ...] = ()
    prompt_length: int = 0

    def __post_init__(self):
        layers = tuple(sorted(set(int(i) for i in self.layers)))
        object.__setattr__(self, "layers", layers)
        if self.prompt_length < 0:
            raise ConfigError(f"prompt_length must be >= 0, got {self.prompt_length}")
        if any(i < 0 for i in layers):
            raise ConfigError(f"negative layer index in {layers}")

    @classmethod
    def from_depth(cls, depth: int, prompt_length: int) -> "PromptSchedule":
        """Prompts on the first ``depth`` blocks."""
        if depth < 0:
            raise ConfigError(f"prompt depth must be >= 0, got {depth}")
        return cls(layers=tuple(range(depth)), prompt_length=prompt_length)

    @property
    def active_layers(self) -> tuple[int, ...]:
        # A zero prompt length disables injection everywhere.
        return self.layers if self.prompt_length > 0 else ()

    def validate(self, cfg: BackboneConfig) -> None:
        bad = [i for i in self.layers if i >= cfg.num_layers]
        if bad:
            raise ConfigError(
                f"prompt layers {bad} out of range for a {cfg.num_layers}-layer backbone"
            )


@dataclass
class TokenBatch:
    tokens: torch.Tensor  # [batch, seq_len, embed_dim]
    layer_index: int = -1  # -1: embedding output, before any block
    includes_cls: bool = True
    hidden: list[torch.Tensor] = field(default_factory=list, repr=False)

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]


def attention(q, k, v, *, return_weights=False):
    """softmax(q kᵀ / sqrt(d_k)) v over the last two axes.

    ``d_k`` is read from the last axis of ``q``. Leading axes (batch, heads)
    broadcast.
    """
    if q.shape[-1] == 0:
        raise ConfigError("head dimension must be positive")
    if k.shape[-2] != v.shape[-2]:
        raise ConfigError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite entries in {name}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def to_patches(images: torch.Tensor, cfg: BackboneConfig) -> torch.Tensor:
    """Cut ``[batch, H, W, C]`` images into flattened patches ``[batch, n, p*p*C]``."""
    if images.ndim != 4:
        raise ConfigError(f"expected [batch, H, W, C] images, got shape {tuple(images.shape)}")
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size:
        raise ConfigError(f"images are {h}x{w}, backbone expects {cfg.image_size}x{cfg.image_size}")
    if c != cfg.channels:
        raise ConfigError(f"images have {c} channels, backbone expects {cfg.channels}")
    p = cfg.patch_size
    g = h // p
    x = images.reshape(b, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * c)


def pooled_feature(x: TokenBatch | torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Reduce token states to one vector per input.

    ``cls`` takes the first token; ``mean`` averages every token. Prompts are
    never part of a TokenBatch, so "every token" already means the non-prompt
    ones.
    """
    tokens = x.tokens if isinstance(x, TokenBatch) else x
    if tokens.ndim != 3:
        raise ConfigError(f"expected [batch, seq, dim] tokens, got {tuple(tokens.shape)}")
    if mode == "cls":
        return tokens[:, 0]
    if mode == "mean":
        return tokens.mean(dim=1)
    raise ConfigError(f"unknown pooling mode {mode!r}")


class PrefixAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, t):
        # [B, S, D] -> [B, H, S, D/H]
        b, s, _ = t.shape
        return t.reshape(b, s, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, prefix=None, return_weights=False):
        b, s, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if prefix is not None:
            pk, pv = prefix
            if pk.ndim == 2:
                pk, pv = pk.expand(b, -1, -1), pv.expand(b, -1, -1)
            k = torch.cat([self._split(pk), k], dim=2)
            v = torch.cat([self._split(pv), v], dim=2)
        out, weights = attention(q, k, v, return_weights=True)
        out = self.proj(out.transpose(1, 2).reshape(b, s, d))
        if return_weights:
            return out, weights
        return out


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = PrefixAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, prefix=None):
        x = x + self.attn(self.norm1(x), prefix)
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Pre-norm ViT encoder with per-block prefix hooks."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_proj = nn.Linear(cfg.patch_size**2 * cfg.channels, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.num_patches, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers)
        )
        self.norm = nn.LayerNorm(d)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(self._init_weights)
        if cfg.frozen:
            self.freeze()

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def patch_embed(self, images: torch.Tensor) -> TokenBatch:
        """Patch tokens with a class token prepended and positions added."""
        patches = to_patches(images, self.cfg).to(self.patch_proj.weight.dtype)
        x = self.patch_proj(patches)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        return TokenBatch(x, layer_index=-1, includes_cls=True)

    def encode(
        self,
        x: TokenBatch,
        prompts_per_layer: Mapping[int, tuple[torch.Tensor, torch.Tensor]] | None = None,
        schedule: PromptSchedule | None = None,
        *,
        keep_hidden: bool = False,
    ) -> TokenBatch:
        """Run every block; scheduled blocks see ``K ⊕ P_k`` and ``V ⊕ P_v``.

        Each prompt half is ``[L_p, D]`` (shared across the batch) or
        ``[batch, L_p, D]`` (one prompt per input). The returned batch has the
        same number of tokens as ``x`` and has gone through the final norm.
        """
        prompts_per_layer = prompts_per_layer or {}
        schedule = schedule or PromptSchedule()
        schedule.validate(self.cfg)
        active = schedule.active_layers
        for layer in active:
            if layer not in prompts_per_layer:
                raise ConfigError(f"no prompt supplied for scheduled layer {layer}")
            pk, pv = prompts_per_layer[layer]
            if pk.shape[-2] != schedule.prompt_length or pv.shape[-2] != schedule.prompt_length:
                raise ConfigError(
                    f"layer {layer}: prompt lengths {pk.shape[-2]}/{pv.shape[-2]} "
                    f"!= schedule prompt_length {schedule.prompt_length}"
                )
        h = x.tokens
        hidden = []
        for i, block in enumerate(self.blocks):
            h = block(h, prompts_per_layer[i] if i in active else None)
            if keep_hidden:
                hidden.append(h)
        out = self.norm(h)
        return TokenBatch(out, layer_index=len(self.blocks) - 1, includes_cls=x.includes_cls, hidden=hidden)

    def forward(self, images, prompts_per_layer=None, schedule=None) -> TokenBatch:
        return self.encode(self.patch_embed(images), prompts_per_layer, schedule)
