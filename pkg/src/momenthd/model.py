"""Full joint moment-retrieval / highlight-detection network."""
from __future__ import annotations

import torch
from torch import nn

from .dbia import DbiaConfig, EMAttention
from .encoder import EarlyFusion, FusionConfig
from .gka import GlobalAccumulator, select_moment_snippet
from .heads import MomentDecoder, SaliencyHead
from .lrp import BmrwConfig, LocalRelationPerception
from .spans import cw_to_se

SWITCHES = ("disable_dbia", "disable_lrp", "disable_gka", "disable_mcl")


class MomentHDModel(nn.Module):
    def __init__(self, visual_dim, text_dim, fusion: FusionConfig = None, dbia: DbiaConfig = None,
                 bmrw: BmrwConfig = None, gka_layers=3, decoder_layers=3, saliency_dim=None,
                 switches=()):
        super().__init__()
        fusion = fusion or FusionConfig()
        dbia = dbia or DbiaConfig()
        bmrw = bmrw or BmrwConfig()
        unknown = set(switches) - set(SWITCHES)
        if unknown:
            raise ValueError(f"unknown switches {sorted(unknown)}")
        self.switches = frozenset(switches)
        D = fusion.hidden_dim
        self.fusion = EarlyFusion(visual_dim, text_dim, fusion)
        self.clip_em = EMAttention(dbia.n_v, D, dbia.iterations, dbia.lambda_rbf)
        self.token_em = EMAttention(dbia.n_t, D, dbia.iterations, dbia.lambda_rbf)
        self.lrp = LocalRelationPerception(D, bmrw)
        self.gka = GlobalAccumulator(D, fusion.num_heads, fusion.ffn_dim, fusion.dropout, gka_layers)
        self.decoder = MomentDecoder(D, fusion.num_heads, fusion.ffn_dim, fusion.dropout,
                                     decoder_layers, fusion.max_tokens)
        self.saliency = SaliencyHead(D, saliency_dim)

    def integrate(self, Fv, Ft, mask_v=None, mask_t=None):
        """Aggregation, local relation perception and global accumulation."""
        if "disable_dbia" in self.switches:
            Fm, Fp = Fv, Ft
        else:
            Fm = self.clip_em(Fv, mask_v)
            Fp = self.token_em(Ft, mask_t)
        if "disable_lrp" in self.switches:
            # omega -> 0: the walk collapses onto the conv-refined clips
            Fv_new = self.lrp.conv(Fv, mask_v)
        else:
            Fv_new = self.lrp(Fv, Fp, mask_v)
        snippet = select_moment_snippet(Fm, Fp)
        if "disable_gka" in self.switches:
            Fv_g, Fv_l = snippet, Fv_new
        else:
            Fv_g, Fv_l = self.gka(snippet, Fv_new, mask_v)
        return {"Fv_new": Fv_new, "Fv_g": Fv_g, "Fv_l": Fv_l, "Fm": Fm, "Fp": Fp}

    def forward(self, vis, txt, mask_v=None, mask_t=None, hard_negatives=False):
        pv = self.fusion.project(vis, "visual")
        pt = self.fusion.project(txt, "textual")
        Fv, Ft = self.fusion.fuse(pv, pt, mask_v, mask_t)
        cim = self.integrate(Fv, Ft, mask_v, mask_t)
        spans, fg_logits = self.decoder(Ft, cim["Fv_l"], mask_t, mask_v)
        out = {
            "spans": spans,
            "fg_logits": fg_logits,
            "saliency": self.saliency(cim["Fv_g"], cim["Fv_l"]),
            "Fv_new": cim["Fv_new"],
            "Fv_g": cim["Fv_g"],
            "Ft": Ft,
        }
        if hard_negatives and vis.shape[0] > 1:
            # each video against the next video's query
            pt_h = pt.roll(-1, dims=0)
            mt_h = None if mask_t is None else mask_t.roll(-1, dims=0)
            Fv_h, Ft_h = self.fusion.fuse(pv, pt_h, mask_v, mt_h)
            cim_h = self.integrate(Fv_h, Ft_h, mask_v, mt_h)
            out["saliency_hard"] = self.saliency(cim_h["Fv_g"], cim_h["Fv_l"])
        return out


@torch.no_grad()
def ranked_windows(spans, fg_logits, mask_t=None):
    """Per video: (Q, 3) [start, end, prob] sorted by foreground probability."""
    se = cw_to_se(spans).clamp(0, 1)
    prob = torch.sigmoid(fg_logits)
    out = []
    for b in range(spans.shape[0]):
        keep = slice(None) if mask_t is None else ~mask_t[b]
        w = torch.cat([se[b][keep], prob[b][keep, None]], dim=1)
        order = torch.argsort(-w[:, 2], stable=True)
        out.append(w[order].cpu().numpy().astype("float64"))
    return out
