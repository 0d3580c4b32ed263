"""Global knowledge accumulation.

The moment centroid most similar (cosine) to any phrase centroid is prepended
to the clip sequence and encoded jointly; position 0 of the output is the
video-level feature, the rest are the enriched clip features.
"""
from __future__ import annotations

import torch
from torch import nn

from .encoder import TransformerEncoder, sinusoidal_positions


def cosine_matrix(Fm: torch.Tensor, Fp: torch.Tensor) -> torch.Tensor:
    """(..., n_v, n_t) cosine similarities; rows with zero norm get -inf."""
    nm = Fm.norm(dim=-1, keepdim=True)
    np_ = Fp.norm(dim=-1, keepdim=True)
    sim = (Fm / nm.clamp(min=1e-12)) @ (Fp / np_.clamp(min=1e-12)).transpose(-1, -2)
    return sim.masked_fill(nm <= 0, float("-inf"))


def select_moment_snippet(Fm: torch.Tensor, Fp: torch.Tensor) -> torch.Tensor:
    """Row of Fm achieving the global max cosine similarity; ties -> lowest row.

    Fm (..., n_v, D), Fp (..., n_t, D) -> (..., D). Gradient flows through the
    selected row only.
    """
    sim = cosine_matrix(Fm, Fp)
    best_per_row = sim.max(dim=-1).values  # (..., n_v)
    # torch.argmax returns the first maximal index
    idx = torch.argmax(best_per_row, dim=-1)
    return torch.gather(Fm, -2, idx[..., None, None].expand(*idx.shape, 1, Fm.shape[-1])).squeeze(-2)


class GlobalAccumulator(nn.Module):
    def __init__(self, dim, heads, ffn_dim, dropout, num_layers=3):
        super().__init__()
        self.encoder = TransformerEncoder(dim, heads, ffn_dim, dropout, num_layers)
        self.snippet_pos = nn.Parameter(torch.zeros(dim))
        nn.init.normal_(self.snippet_pos, std=0.02)

    def forward(self, Fm_sel, Fv_new, mask=None):
        """Fm_sel (B, D), Fv_new (B, L, D) -> F_v^g (B, D), F_v^l (B, L, D)."""
        B, L, D = Fv_new.shape
        x = torch.cat([Fm_sel.unsqueeze(1), Fv_new], dim=1)
        if mask is not None:
            mask = torch.cat([torch.zeros(B, 1, dtype=torch.bool, device=mask.device), mask], dim=1)
        pos = torch.cat([self.snippet_pos[None], sinusoidal_positions(L, D, x.dtype)], dim=0)
        out = self.encoder(x, mask, pos)
        return out[:, 0], out[:, 1:]


def accumulate(module: GlobalAccumulator, Fm_sel, Fv_new, mask=None):
    return module(Fm_sel, Fv_new, mask)
