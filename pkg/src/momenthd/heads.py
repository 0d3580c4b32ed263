"""Prediction heads and the set-prediction matcher.

The moment head is a DETR-style decoder whose queries are the fused text
tokens; each query emits one (center, width) span through a logistic squash
plus a foreground logit. The saliency head is a scaled bilinear form between
the video-level feature and every clip feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .encoder import sinusoidal_positions
from .spans import cw_to_se, pairwise_generalized_iou


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim, dropout):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff1 = nn.Linear(dim, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, tgt, memory, query_pos, mem_pos, tgt_mask=None, mem_mask=None):
        q = k = tgt + query_pos
        h, _ = self.self_attn(q, k, tgt, key_padding_mask=tgt_mask, need_weights=False)
        tgt = self.norm1(tgt + self.drop(h))
        # clip positions ride along in the values so the span regressor can read them
        mem = memory + mem_pos
        h, _ = self.cross_attn(tgt + query_pos, mem, mem, key_padding_mask=mem_mask, need_weights=False)
        tgt = self.norm2(tgt + self.drop(h))
        h = self.ff2(self.drop(F.relu(self.ff1(tgt))))
        return self.norm3(tgt + self.drop(h))


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, layers):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class MomentDecoder(nn.Module):
    """Queries are a learned map of the fused tokens plus a per-index embedding."""

    def __init__(self, dim, heads, ffn_dim, dropout, num_layers=3, max_queries=64):
        super().__init__()
        self.query_proj = nn.Linear(dim, dim)
        self.query_pos = nn.Embedding(max_queries, dim)
        self.mem_pos = nn.Linear(dim, dim)
        self.layers = nn.ModuleList(
            DecoderLayer(dim, heads, ffn_dim, dropout) for _ in range(num_layers)
        )
        self.span_head = MLP(dim, dim, 2, 3)
        self.fg_head = nn.Linear(dim, 1)

    def forward(self, Ft, Fv_l, mask_t=None, mask_v=None):
        B, N, D = Ft.shape
        L = Fv_l.shape[1]
        tgt = self.query_proj(Ft)
        qpos = self.query_pos.weight[:N].unsqueeze(0)
        mpos = self.mem_pos(sinusoidal_positions(L, D, Fv_l.dtype)).unsqueeze(0)
        for layer in self.layers:
            tgt = layer(tgt, Fv_l, qpos, mpos, mask_t, mask_v)
        spans = torch.sigmoid(self.span_head(tgt))
        return spans, self.fg_head(tgt).squeeze(-1)


def moment_decoder(decoder: MomentDecoder, Ft, Fv_l, mask_t=None, mask_v=None):
    return decoder(Ft, Fv_l, mask_t, mask_v)


class SaliencyHead(nn.Module):
    """P_s[i] = <w_g g, w_l l_i> / sqrt(d)."""

    def __init__(self, dim, proj_dim=None):
        super().__init__()
        self.proj_dim = proj_dim or dim
        self.w_g = nn.Linear(dim, self.proj_dim, bias=False)
        self.w_l = nn.Linear(dim, self.proj_dim, bias=False)

    def forward(self, Fv_g, Fv_l):
        g = self.w_g(Fv_g).unsqueeze(-2)  # (B, 1, d)
        return (g * self.w_l(Fv_l)).sum(-1) / math.sqrt(self.proj_dim)


def saliency_head(head: SaliencyHead, Fv_g, Fv_l):
    return head(Fv_g, Fv_l)


@dataclass(frozen=True)
class MatchCostWeights:
    l1: float = 10.0
    giou: float = 1.0
    fg: float = 1.0


def match_cost(pred_spans, fg_logits, gt_spans, w: MatchCostWeights = MatchCostWeights()):
    """(Q, G) cost: w.l1 * L1(c, w) + w.giou * (1 - GIoU) - w.fg * p_fg."""
    cost_l1 = torch.cdist(pred_spans, gt_spans, p=1)
    giou = pairwise_generalized_iou(cw_to_se(pred_spans), cw_to_se(gt_spans))
    prob = torch.sigmoid(fg_logits)[:, None]
    return w.l1 * cost_l1 + w.giou * (1 - giou) - w.fg * prob


@torch.no_grad()
def hungarian_match(pred_spans, fg_logits, gt_spans, weights: MatchCostWeights = MatchCostWeights()):
    """Optimal one-to-one assignment, list of (query_index, gt_index) sorted by query."""
    if len(gt_spans) == 0:
        return []
    cost = match_cost(pred_spans, fg_logits, gt_spans, weights).cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def matching_cost_total(cost: np.ndarray, matching) -> float:
    return float(sum(cost[q, g] for q, g in matching))
