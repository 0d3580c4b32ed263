"""Feature projection and early fusion.

Transformer blocks here follow the DETR convention: positional and modality
embeddings are added to queries and keys only, never to the values. A stack
with zero layers is therefore the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class FusionConfig:
    hidden_dim: int = 256
    num_layers: int = 3
    num_heads: int = 8
    dropout: float = 0.1
    ffn_dim: int = 1024
    max_tokens: int = 64

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * idx / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


def _with_pos(x, pos):
    return x if pos is None else x + pos


class EncoderLayer(nn.Module):
    """Post-norm self-attention block."""

    def __init__(self, dim, heads, ffn_dim, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff1 = nn.Linear(dim, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None, pos=None):
        q = k = _with_pos(x, pos)
        h, _ = self.attn(q, k, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + self.drop(h))
        h = self.ff2(self.drop(F.relu(self.ff1(x))))
        return self.norm2(x + self.drop(h))


class TransformerEncoder(nn.Module):
    def __init__(self, dim, heads, ffn_dim, dropout, num_layers):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(dim, heads, ffn_dim, dropout) for _ in range(num_layers)
        )

    def forward(self, x, pad_mask=None, pos=None):
        if pad_mask is not None and bool(pad_mask.all(dim=-1).any()):
            raise ValueError("invalid mask: a sequence is entirely padding")
        for layer in self.layers:
            x = layer(x, pad_mask, pos)
        return x


class Projection(nn.Module):
    """Bias-free linear map to the hidden size followed by LayerNorm."""

    def __init__(self, in_dim, hidden_dim):
        super().__init__()
        self.linear = nn.Linear(in_dim, hidden_dim, bias=False)
        self.norm = nn.LayerNorm(hidden_dim)

    def forward(self, raw):
        if raw.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"expected feature dim {self.linear.in_features}, got {raw.shape[-1]}"
            )
        return self.norm(self.linear(raw))


class EarlyFusion(nn.Module):
    """Projects both modalities and runs one shared encoder over [clips; tokens]."""

    def __init__(self, visual_dim, text_dim, cfg: FusionConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.cfg = cfg
        self.visual = Projection(visual_dim, D)
        self.textual = Projection(text_dim, D)
        self.token_pos = nn.Embedding(cfg.max_tokens, D)
        self.modality = nn.Embedding(2, D)
        self.encoder = TransformerEncoder(D, cfg.num_heads, cfg.ffn_dim, cfg.dropout, cfg.num_layers)
        nn.init.normal_(self.token_pos.weight, std=0.02)
        nn.init.normal_(self.modality.weight, std=0.02)

    def project(self, raw, which: str):
        if which == "visual":
            return self.visual(raw)
        if which == "textual":
            return self.textual(raw)
        raise ValueError(f"unknown modality {which!r}")

    def positions(self, L, N, dtype, use_positions=True):
        D = self.cfg.hidden_dim
        clip_pos = self.modality.weight[0].expand(L, D)
        tok_pos = self.modality.weight[1].expand(N, D)
        if use_positions:
            clip_pos = clip_pos + sinusoidal_positions(L, D, dtype)
            tok_pos = tok_pos + self.token_pos.weight[:N]
        return torch.cat([clip_pos, tok_pos], dim=0).to(dtype)

    def fuse(self, vis, txt, mask_v=None, mask_t=None, use_positions=True):
        """Fuse already-projected features.

        vis (B, L, D), txt (B, N, D); masks are True at padded positions.
        Returns fused (B, L, D) and (B, N, D).
        """
        B, L, _ = vis.shape
        N = txt.shape[1]
        if mask_v is None:
            mask_v = torch.zeros(B, L, dtype=torch.bool, device=vis.device)
        if mask_t is None:
            mask_t = torch.zeros(B, N, dtype=torch.bool, device=txt.device)
        if bool(mask_v.all(dim=1).any()) or bool(mask_t.all(dim=1).any()):
            raise ValueError("invalid mask: every clip or every token is padding")
        x = torch.cat([vis, txt], dim=1)
        mask = torch.cat([mask_v, mask_t], dim=1)
        pos = self.positions(L, N, x.dtype, use_positions)
        x = self.encoder(x, mask, pos)
        return x[:, :L], x[:, L:]

    def forward(self, raw_vis, raw_txt, mask_v=None, mask_t=None):
        return self.fuse(self.visual(raw_vis), self.textual(raw_txt), mask_v, mask_t)


def project(layer: Projection, raw: torch.Tensor) -> torch.Tensor:
    return layer(raw)


def early_fuse(fusion: EarlyFusion, vis, txt, mask_v=None, mask_t=None, use_positions=True):
    return fusion.fuse(vis, txt, mask_v, mask_t, use_positions)
