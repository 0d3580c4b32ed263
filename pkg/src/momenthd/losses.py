"""Training objectives.

Moment retrieval: L1 and GIoU on Hungarian-matched spans, plus a binary
foreground term for every query. Highlight detection: pairwise margin ranking,
a multi-threshold rank-aware contrastive term, and suppression of saliency on
mismatched (hard negative) video/query pairs. Contrastive alignment: clip/text
(per video) and video/sentence (across the batch).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .heads import MatchCostWeights, hungarian_match
from .spans import cw_to_se


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int | None = None):
        at = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite loss term {term!r}{at}")
        self.term = term
        self.step = step


@dataclass
class LossWeights:
    giou: float = 1.0
    l1: float = 10.0
    hd: float = 1.0
    hard: float = 1.0
    cta: float = 0.5
    vld: float = 0.5
    fg: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


TERMS = ("l1", "giou", "fg", "margin", "rank", "hard", "cta", "vld")


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)  # unweighted scalars
    total: torch.Tensor | float = 0.0

    def as_row(self) -> dict:
        row = {k: _scalar(self.terms.get(k, 0.0)) for k in TERMS}
        row["total"] = _scalar(self.total)
        return row


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


# --- moment retrieval -----------------------------------------------------

def span_l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """|c_p - c_g| + |w_p - w_g| for paired (..., 2) spans."""
    return (pred - gt).abs().sum(-1)


def generalized_iou(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Element-wise 1-D GIoU of paired (..., 2) center/width spans."""
    a, b = cw_to_se(pred), cw_to_se(gt)
    len_a = (a[..., 1] - a[..., 0]).clamp(min=eps)
    len_b = (b[..., 1] - b[..., 0]).clamp(min=eps)
    inter = (torch.min(a[..., 1], b[..., 1]) - torch.max(a[..., 0], b[..., 0])).clamp(min=0)
    union = len_a + len_b - inter
    hull = (torch.max(a[..., 1], b[..., 1]) - torch.min(a[..., 0], b[..., 0])).clamp(min=eps)
    return inter / union - (hull - union) / hull


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return 1 - generalized_iou(pred, gt)


def foreground_loss(fg_logits, matched_idx, eos_weight=0.1, valid=None):
    """Weighted BCE; matched queries -> 1, the rest -> 0 with weight ``eos_weight``."""
    target = torch.zeros_like(fg_logits)
    target[matched_idx] = 1.0
    weight = torch.full_like(fg_logits, eos_weight)
    weight[matched_idx] = 1.0
    if valid is not None:
        weight = weight * valid
    bce = F.binary_cross_entropy_with_logits(fg_logits, target, reduction="none")
    return (weight * bce).sum() / weight.sum()


# --- contrastive alignment --------------------------------------------------

def cta_loss(Fv_new, Ft, G_ct, temperature: float = 1.0, mask_t=None, mask_v=None):
    """Clip/text alignment for one video (L, D) / (N, D) or a batch (B, L, D) / (B, N, D).

    -sum_i log_softmax(cos(clip_i, mean token) / temperature)[i] * G_ct[i] / #positives,
    averaged over videos with at least one positive.
    """
    single = Fv_new.dim() == 2
    if single:
        Fv_new, Ft, G_ct = Fv_new[None], Ft[None], G_ct[None]
        mask_t = None if mask_t is None else mask_t[None]
        mask_v = None if mask_v is None else mask_v[None]
    G = G_ct.to(Fv_new.dtype)
    sent = _mean_tokens(Ft, mask_t)
    sim = F.cosine_similarity(Fv_new, sent.unsqueeze(1), dim=-1) / temperature
    if mask_v is not None:
        sim = sim.masked_fill(mask_v, float("-inf"))
        G = G.masked_fill(mask_v, 0.0)
    npos = G.sum(-1)
    has = npos > 0
    if not bool(has.any()):
        warnings.warn("cta_loss: no relevant clips, returning 0", RuntimeWarning, stacklevel=2)
        return Fv_new.sum() * 0.0
    logp = torch.log_softmax(sim, dim=-1).masked_fill(G == 0, 0.0)
    per_video = -(logp * G).sum(-1)[has] / npos[has]
    return per_video.mean()


def _mean_tokens(Ft, mask_t=None):
    if mask_t is None:
        return Ft.mean(-2)
    keep = (~mask_t).to(Ft.dtype).unsqueeze(-1)
    return (Ft * keep).sum(-2) / keep.sum(-2)


def vld_loss(video_emb: torch.Tensor, text_emb: torch.Tensor, temperature: float = 0.1):
    """Symmetric cross-pair InfoNCE over a batch of (B, D) video / sentence embeddings."""
    B = video_emb.shape[0]
    v = F.normalize(video_emb, dim=-1)
    t = F.normalize(text_emb, dim=-1)
    logits = v @ t.T / temperature
    target = torch.arange(B, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


# --- highlight detection ------------------------------------------------------

def sample_saliency_pairs(G_s, num_pairs=2, generator=None, mask=None):
    """(high, low) clip index pairs per video: high inside a moment, low outside.

    Returns a list (one per video) of LongTensor (num_pairs, 2), empty when the
    video has no inside or no outside clip.
    """
    if G_s.dim() == 1:
        G_s = G_s[None]
        mask = None if mask is None else mask[None]
    out = []
    for b in range(G_s.shape[0]):
        valid = torch.ones_like(G_s[b], dtype=torch.bool) if mask is None else ~mask[b]
        inside = torch.nonzero((G_s[b] > 0) & valid).flatten()
        outside = torch.nonzero((G_s[b] <= 0) & valid).flatten()
        if len(inside) == 0 or len(outside) == 0:
            out.append(torch.zeros(0, 2, dtype=torch.long))
            continue
        hi = inside[torch.randint(len(inside), (num_pairs,), generator=generator)]
        lo = outside[torch.randint(len(outside), (num_pairs,), generator=generator)]
        out.append(torch.stack([hi, lo], dim=1))
    return out


def margin_rank_loss(P_s, G_s=None, margin: float = 0.2, pairs=None, num_pairs=2, generator=None):
    """mean over pairs of max(0, margin + P_s[low] - P_s[high])."""
    if P_s.dim() == 1:
        P_s = P_s[None]
        G_s = None if G_s is None else G_s[None]
    if pairs is None:
        pairs = sample_saliency_pairs(G_s, num_pairs, generator)
    terms = []
    for b, pr in enumerate(pairs):
        if len(pr):
            terms.append(torch.relu(margin + P_s[b, pr[:, 1]] - P_s[b, pr[:, 0]]))
    if not terms:
        warnings.warn("margin_rank_loss: no valid (high, low) pair", RuntimeWarning, stacklevel=2)
        return P_s.sum() * 0.0
    return torch.cat(terms).mean()


def quantize_saliency(G_s, levels=5):
    return torch.round(G_s * (levels - 1)) / (levels - 1)


def rank_aware_loss(P_s, G_s, temperature: float = 0.5, levels: int = 5, mask=None):
    """Multi-threshold contrastive ranking.

    For every quantized saliency level r present in the video, clips with
    level >= r are positives: -log(sum_pos e^{P/t} / sum_all e^{P/t}).
    Averaged over (video, threshold) pairs having both positives and negatives.
    """
    if P_s.dim() == 1:
        P_s, G_s = P_s[None], G_s[None]
        mask = None if mask is None else mask[None]
    q = quantize_saliency(G_s, levels)
    logits = P_s / temperature
    if mask is not None:
        logits = logits.masked_fill(mask, float("-inf"))
        q = q.masked_fill(mask, -1.0)
    lse_all = torch.logsumexp(logits, dim=-1)
    terms = []
    for level in range(1, levels):
        r = level / (levels - 1)
        pos = q >= r - 1e-9
        neg = (q < r - 1e-9) & (q >= 0)
        ok = pos.any(-1) & neg.any(-1)
        if not bool(ok.any()):
            continue
        lse_pos = torch.logsumexp(logits.masked_fill(~pos, float("-inf")), dim=-1)
        terms.append((lse_all - lse_pos)[ok])
    if not terms:
        warnings.warn("rank_aware_loss: saliency is constant, returning 0", RuntimeWarning, stacklevel=2)
        return P_s.sum() * 0.0
    return torch.cat(terms).mean()


def hard_negative_loss(P_s_hard, mask=None):
    """mean over clips of -log(1 - sigmoid(s)), i.e. softplus(s)."""
    per_clip = F.softplus(P_s_hard)
    if mask is None:
        return per_clip.mean()
    keep = (~mask).to(per_clip.dtype)
    return (per_clip * keep).sum() / keep.sum()


# --- totals -----------------------------------------------------------------

def total_loss(parts: dict, weights: LossWeights = LossWeights(), step=None) -> LossReport:
    """Weighted sum; ``parts`` maps term names (see TERMS) to unweighted scalars."""
    for name, value in parts.items():
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteLossError(name, step)
    w = {
        "l1": weights.l1, "giou": weights.giou, "fg": weights.fg,
        "margin": weights.hd, "rank": weights.hd, "hard": weights.hard,
        "cta": weights.cta, "vld": weights.vld,
    }
    unknown = set(parts) - set(w)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = sum(w[k] * v for k, v in parts.items()) if parts else 0.0
    return LossReport(terms=dict(parts), total=total)


def set_losses(spans, fg_logits, gt_spans, mask_t=None, cost=MatchCostWeights(), eos_weight=0.1):
    """L1, GIoU and foreground terms for a batch.

    spans (B, Q, 2), fg_logits (B, Q), gt_spans list of (G_b, 2) tensors.
    """
    l1, giou, fg = [], [], []
    for b, gts in enumerate(gt_spans):
        valid = None if mask_t is None else (~mask_t[b]).to(spans.dtype)
        logits = fg_logits[b] if mask_t is None else fg_logits[b].masked_fill(mask_t[b], -1e4)
        pairs = hungarian_match(spans[b], logits, gts, cost)
        q = torch.tensor([p[0] for p in pairs], dtype=torch.long)
        g = torch.tensor([p[1] for p in pairs], dtype=torch.long)
        l1.append(span_l1_loss(spans[b, q], gts[g]))
        giou.append(giou_loss(spans[b, q], gts[g]))
        fg.append(foreground_loss(fg_logits[b], q, eos_weight, valid))
    return {
        "l1": torch.cat(l1).mean(),
        "giou": torch.cat(giou).mean(),
        "fg": torch.stack(fg).mean(),
    }
