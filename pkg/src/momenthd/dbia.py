"""RBF-kernel EM attention: condenses a feature sequence into a few centroids.

The clip branch turns L clips into ``n_v`` moment centroids, the token branch
turns N tokens into ``n_t`` phrase centroids. Mixture weights are uniform and
covariances are the identity, so the E step is a softmax over negative scaled
squared distances and the M step is a responsibility-weighted mean.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class DbiaConfig:
    n_v: int = 30
    n_t: int = 5
    iterations: int = 5
    lambda_rbf: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lambda_rbf > 0:
            raise ValueError("lambda_rbf must be > 0")
        if self.n_v < 1 or self.n_t < 1:
            raise ValueError("need at least one basis per branch")


def rbf_kernel(f: torch.Tensor, mu: torch.Tensor, lam: float) -> torch.Tensor:
    """exp(-lam * ||f - mu||^2) over the last axis."""
    if not (torch.isfinite(f).all() and torch.isfinite(mu).all()):
        raise FloatingPointError("rbf_kernel got non-finite input")
    return torch.exp(-lam * ((f - mu) ** 2).sum(-1))


def _sq_dists(F, mu):
    # (..., L, D), (..., n, D) -> (..., L, n); expanded form keeps memory flat
    d = (F * F).sum(-1, keepdim=True) - 2 * F @ mu.transpose(-1, -2) + (mu * mu).sum(-1).unsqueeze(-2)
    return d.clamp(min=0)


def _log_responsibilities(F, mu, lam, mask=None):
    logits = -lam * _sq_dists(F, mu)
    if bool((logits.max(-1).values < math.log(torch.finfo(logits.dtype).tiny)).any()):
        warnings.warn("RBF kernels underflow for some rows; normalized in log space",
                      RuntimeWarning, stacklevel=3)
    logZ = torch.log_softmax(logits, dim=-1)
    if mask is not None:
        logZ = logZ.masked_fill(mask.unsqueeze(-1), float("-inf"))
    return logZ


def e_step(F: torch.Tensor, mu: torch.Tensor, lam: float, mask=None) -> torch.Tensor:
    """Responsibilities Z[i, k] = K(f_i, mu_k) / sum_k' K(f_i, mu_k').

    Evaluated in log space with the row maximum subtracted, so rows whose raw
    kernels would all underflow still get the exact normalized weights.
    Rows flagged in ``mask`` (True = padding) are zeroed.
    """
    return torch.exp(_log_responsibilities(F, mu, lam, mask))


def m_step(F: torch.Tensor, Z: torch.Tensor, mu_prev=None) -> torch.Tensor:
    """mu = Norm1(Z)^T F with Norm1 scaling each column of Z to unit sum.

    A basis whose column is entirely zero keeps ``mu_prev`` (or zeros if none given).
    """
    col = Z.sum(-2, keepdim=True)  # (..., 1, n)
    empty = col <= 0
    mu = (Z / torch.where(empty, torch.ones_like(col), col)).transpose(-1, -2) @ F
    return _keep_empty(mu, empty, mu_prev)


def _keep_empty(mu, empty, mu_prev):
    if not bool(empty.any()):
        return mu
    prev = torch.zeros_like(mu) if mu_prev is None else mu_prev.expand_as(mu)
    return torch.where(empty.transpose(-1, -2), prev, mu)


def _m_step_log(F, logZ, mu_prev):
    # column normalization as a softmax over clips: exact for tiny column mass
    # and free of the 1/mass blow-up in the backward pass
    empty = torch.isneginf(logZ).all(-2, keepdim=True)
    Zn = torch.softmax(logZ.masked_fill(empty, 0.0), dim=-2)
    return _keep_empty(Zn.transpose(-1, -2) @ F, empty, mu_prev)


def em_aggregate(F: torch.Tensor, mu0: torch.Tensor, cfg: DbiaConfig | None = None,
                 *, iterations=None, lam=None, mask=None) -> torch.Tensor:
    """Run ``iterations`` E/M rounds from ``mu0`` and return the final centroids.

    F: (B, L, D) or (L, D); mu0: (n, D), broadcast over the batch.
    """
    T = iterations if iterations is not None else (cfg.iterations if cfg else 5)
    lam = lam if lam is not None else (cfg.lambda_rbf if cfg else 1.0)
    mu = mu0.expand(*F.shape[:-2], *mu0.shape)
    for _ in range(T):
        mu = _m_step_log(F, _log_responsibilities(F, mu, lam, mask), mu)
    return mu


class EMAttention(nn.Module):
    """Learnable initial means plus the fixed-iteration EM loop."""

    def __init__(self, num_bases, dim, iterations=5, lam=1.0):
        super().__init__()
        self.mu0 = nn.Parameter(torch.randn(num_bases, dim) / math.sqrt(dim))
        self.iterations = iterations
        self.lam = lam

    def forward(self, F, mask=None):
        return em_aggregate(F, self.mu0, iterations=self.iterations, lam=self.lam, mask=mask)
