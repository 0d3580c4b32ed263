"""Temporal span geometry shared by the generator, the heads and the evaluator.

Spans live in normalized time [0, 1]. The model works in (center, width)
form; IoU-style geometry is computed in (start, end) form.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Span:
    center: float
    width: float

    def __post_init__(self):
        if not (0.0 <= self.center <= 1.0):
            raise ValueError(f"span center {self.center} outside [0, 1]")
        if not (0.0 < self.width <= 1.0):
            raise ValueError(f"span width {self.width} outside (0, 1]")

    @property
    def start(self) -> float:
        return max(0.0, self.center - self.width / 2)

    @property
    def end(self) -> float:
        return min(1.0, self.center + self.width / 2)

    @classmethod
    def from_bounds(cls, start: float, end: float) -> "Span":
        if not end > start:
            raise ValueError(f"empty span [{start}, {end}]")
        return cls((start + end) / 2, end - start)

    def as_bounds(self) -> tuple[float, float]:
        return self.start, self.end


def cw_to_se(spans: torch.Tensor) -> torch.Tensor:
    """(..., 2) center/width -> (..., 2) start/end."""
    c, w = spans.unbind(-1)
    return torch.stack([c - 0.5 * w, c + 0.5 * w], dim=-1)


def se_to_cw(spans: torch.Tensor) -> torch.Tensor:
    s, e = spans.unbind(-1)
    return torch.stack([0.5 * (s + e), e - s], dim=-1)


def pairwise_temporal_iou(a: torch.Tensor, b: torch.Tensor, eps: float = 0.0):
    """IoU and union between every pair of (start, end) spans.

    a: (n, 2), b: (m, 2) -> iou (n, m), union (n, m)
    """
    len_a = (a[:, 1] - a[:, 0]).clamp(min=eps)
    len_b = (b[:, 1] - b[:, 0]).clamp(min=eps)
    left = torch.max(a[:, None, 0], b[None, :, 0])
    right = torch.min(a[:, None, 1], b[None, :, 1])
    inter = (right - left).clamp(min=0)
    union = len_a[:, None] + len_b[None, :] - inter
    return inter / union, union


def pairwise_generalized_iou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-6):
    """1-D GIoU between every pair of (start, end) spans; zero widths count as eps."""
    iou, union = pairwise_temporal_iou(a, b, eps=eps)
    left = torch.min(a[:, None, 0], b[None, :, 0])
    right = torch.max(a[:, None, 1], b[None, :, 1])
    hull = (right - left).clamp(min=eps)
    return iou - (hull - union) / hull
