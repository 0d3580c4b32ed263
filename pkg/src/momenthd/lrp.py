"""Local relation perception: temporal conv residual + bidirectional modality random walk.

The random walk alternates phrase <- clip and clip <- phrase propagation:

    P_t = w * Norm1(Z)^T V_{t-1} + (1 - w) P_0
    V_t = w * Z P_t              + (1 - w) V_0

whose fixed point is V_inf = (1 - w) (I - w^2 A)^{-1} (w Z P_0 + V_0) with
A = Z Norm1(Z)^T. Z is row-softmaxed, which makes A row-stochastic and
bounds the spectral radius of w^2 A by w^2 < 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class BmrwConfig:
    omega: float = 0.5
    lambda_z: float | None = None  # None -> 1/sqrt(D)
    conv_kernel: int = 3

    def __post_init__(self):
        if not 0 < self.omega < 1:
            raise ValueError("omega must lie strictly inside (0, 1)")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be a positive odd number")
        if self.lambda_z is not None and not self.lambda_z > 0:
            raise ValueError("lambda_z must be positive")


class TemporalConvBlock(nn.Module):
    """F' = Conv1d(F) + F along the clip axis, same-length zero padding."""

    def __init__(self, dim, kernel=3):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)

    def forward(self, F, mask=None):
        if mask is not None:
            F = F.masked_fill(mask.unsqueeze(-1), 0.0)
        out = self.conv(F.transpose(1, 2)).transpose(1, 2) + F
        if mask is not None:
            out = out.masked_fill(mask.unsqueeze(-1), 0.0)
        return out


def temporal_conv_block(block: TemporalConvBlock, F, mask=None):
    return block(F, mask)


def affinity(Fv0: torch.Tensor, Fp0: torch.Tensor, lambda_z: float, mask=None) -> torch.Tensor:
    """Row-softmaxed scaled dot product, (..., L, n_t). Padded clip rows are zero."""
    Z = torch.softmax(lambda_z * Fv0 @ Fp0.transpose(-1, -2), dim=-1)
    if mask is not None:
        Z = Z.masked_fill(mask.unsqueeze(-1), 0.0)
    return Z


def norm1_columns(Z: torch.Tensor) -> torch.Tensor:
    col = Z.sum(-2, keepdim=True)
    # floor keeps gradients finite for columns that attract (almost) no clip
    return Z / col.clamp(min=1e-6)


def transition(Z: torch.Tensor) -> torch.Tensor:
    """A = Z Norm1(Z)^T, (..., L, L); row-stochastic for row-stochastic Z."""
    return Z @ norm1_columns(Z).transpose(-1, -2)


def bmrw_iterate(Fv0, Fp0, Z, omega: float, t: int):
    """Unroll the coupled updates t times; returns (V_t, P_t)."""
    Zn_t = norm1_columns(Z).transpose(-1, -2)
    V, P = Fv0, Fp0
    for _ in range(t):
        P = omega * Zn_t @ V + (1 - omega) * Fp0
        V = omega * Z @ P + (1 - omega) * Fv0
    return V, P


def bmrw_closed_form(Fv0, Fp0, Z, omega: float, max_cond: float = 1e8) -> torch.Tensor:
    """Fixed point of the random walk via one dense linear solve."""
    L = Z.shape[-2]
    eye = torch.eye(L, dtype=Z.dtype, device=Z.device)
    M = eye - omega**2 * transition(Z)
    if not bool(torch.isfinite(M).all()):
        raise FloatingPointError("non-finite affinity in the random walk")
    with torch.no_grad():
        cond = torch.linalg.cond(M)
    if not bool(torch.isfinite(cond).all()) or bool((cond > max_cond).any()):
        raise FloatingPointError(f"(I - w^2 A) is ill-conditioned (cond={cond.max().item():.3g})")
    rhs = omega * Z @ Fp0 + Fv0
    return (1 - omega) * torch.linalg.solve(M, rhs)


class LocalRelationPerception(nn.Module):
    def __init__(self, dim, cfg: BmrwConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = TemporalConvBlock(dim, cfg.conv_kernel)
        self.lambda_z = cfg.lambda_z if cfg.lambda_z is not None else 1.0 / math.sqrt(dim)

    def forward(self, Fv, Fp, mask=None):
        Fv0 = self.conv(Fv, mask)
        Z = affinity(Fv0, Fp, self.lambda_z, mask)
        return bmrw_closed_form(Fv0, Fp, Z, self.cfg.omega)
