"""Moment retrieval and highlight detection metrics.

Predictions for one query are an (n, 3) array of ``[start, end, score]``;
ground truth is a (g, 2) array of ``[start, end]``. Ranking always uses a
stable sort on descending score, so ties resolve to the lower index.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .spans import Span

IOU_GRID = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass
class MetricsReport:
    r1_at_05: float
    r1_at_07: float
    map_at_05: float
    map_at_075: float
    map_avg: float
    hd_map: float
    hit_at_1: float

    def as_dict(self):
        return asdict(self)


def temporal_iou(a, b) -> float:
    """IoU of two spans given as :class:`Span` or (start, end)."""
    s1, e1 = a.as_bounds() if isinstance(a, Span) else a
    s2, e2 = b.as_bounds() if isinstance(b, Span) else b
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0 else 0.0


def _iou_matrix(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)[..., :2].reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    left = np.maximum(pred[:, None, 0], gt[None, :, 0])
    right = np.minimum(pred[:, None, 1], gt[None, :, 1])
    inter = np.clip(right - left, 0, None)
    union = (pred[:, 1] - pred[:, 0])[:, None] + (gt[:, 1] - gt[:, 0])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def _rank(scores):
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def recall_at_1(preds, gts, thr: float) -> float:
    """Fraction of queries whose top-1 span reaches IoU >= thr with some GT span."""
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same queries")
    if not preds:
        return 0.0
    hits = 0
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            continue
        top = p[_rank(p[:, 2])[0]]
        hits += bool((_iou_matrix(top[None, :2], g) >= thr).any())
    return hits / len(preds)


def interpolated_ap(hits, num_positives: int) -> float:
    """All-point interpolated AP from a ranked 0/1 hit sequence."""
    hits = np.asarray(hits, dtype=np.float64)
    if num_positives == 0:
        return 0.0
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / num_positives
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(pred, gt, thr: float) -> float:
    """Detection AP for one query with greedy-by-rank matching at IoU >= thr."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(gt) == 0:
        raise ValueError("average_precision needs at least one ground-truth span")
    order = _rank(pred[:, 2])
    iou = _iou_matrix(pred[order, :2], gt)
    taken = np.zeros(len(gt), dtype=bool)
    hits = np.zeros(len(order))
    for i in range(len(order)):
        for j in np.argsort(-iou[i], kind="stable"):
            if iou[i, j] < thr:
                break
            if not taken[j]:
                taken[j] = True
                hits[i] = 1
                break
    return interpolated_ap(hits, len(gt))


def mean_average_precision(preds, gts, thr: float) -> float:
    if not preds:
        return 0.0
    return float(np.mean([average_precision(p, g, thr) for p, g in zip(preds, gts)]))


def average_map(preds, gts, thresholds=IOU_GRID) -> float:
    return float(np.mean([mean_average_precision(preds, gts, t) for t in thresholds]))


def hit_at_1(P_s, G_s, good_thr: float = 0.8) -> int:
    """1 if the top-scored clip has ground-truth saliency >= good_thr."""
    P_s = np.asarray(P_s, dtype=np.float64)
    top = int(np.argmax(P_s))
    return int(np.asarray(G_s, dtype=np.float64)[top] >= good_thr)


def hd_ap(P_s, G_s, good_thr: float = 0.8) -> float | None:
    """AP of one video's clip ranking against labels G_s >= good_thr (None if no positive)."""
    labels = np.asarray(G_s, dtype=np.float64) >= good_thr
    if not labels.any():
        return None
    return interpolated_ap(labels[_rank(P_s)], int(labels.sum()))


def hd_map(P_list, G_list, good_thr: float = 0.8) -> float:
    aps = [a for a in (hd_ap(p, g, good_thr) for p, g in zip(P_list, G_list)) if a is not None]
    return float(np.mean(aps)) if aps else 0.0


def compute_metrics(pred_windows, gt_windows, pred_saliency, gt_saliency, good_thr=0.8) -> MetricsReport:
    """All report fields from per-video predictions, in a fixed (input) order."""
    hits = [hit_at_1(p, g, good_thr) for p, g in zip(pred_saliency, gt_saliency)]
    return MetricsReport(
        r1_at_05=recall_at_1(pred_windows, gt_windows, 0.5),
        r1_at_07=recall_at_1(pred_windows, gt_windows, 0.7),
        map_at_05=mean_average_precision(pred_windows, gt_windows, 0.5),
        map_at_075=mean_average_precision(pred_windows, gt_windows, 0.75),
        map_avg=average_map(pred_windows, gt_windows),
        hd_map=hd_map(pred_saliency, gt_saliency, good_thr),
        hit_at_1=float(np.mean(hits)) if hits else 0.0,
    )


# --- prediction dumps ---------------------------------------------------------

def write_predictions(records, path) -> None:
    """records: iterable of dicts with video_id, pred_spans [[s, e, score]...], pred_saliency."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "video_id": r["video_id"],
                "pred_spans": [[float(x) for x in w] for w in r["pred_spans"]],
                "pred_saliency": [float(x) for x in r["pred_saliency"]],
            }) + "\n")


def read_predictions(path) -> dict:
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            out[r["video_id"]] = r
        except (ValueError, KeyError) as exc:
            raise ValueError(f"prediction record {i}: {exc}") from None
    return out


def evaluate_predictions(preds: dict, corpus, good_thr=0.8) -> MetricsReport:
    """Score a prediction dump against a corpus, iterating videos in sorted id order."""
    gts = {p.video_id: p for p in corpus.pairs}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise KeyError(f"no predictions for {len(missing)} videos, e.g. {missing[0]}")
    ids = sorted(gts)
    pw = [np.asarray(preds[v]["pred_spans"], dtype=np.float64).reshape(-1, 3) for v in ids]
    gw = [np.array([s.as_bounds() for s in gts[v].gt_spans]) for v in ids]
    ps = [preds[v]["pred_saliency"] for v in ids]
    gs = [gts[v].gt_saliency for v in ids]
    return compute_metrics(pw, gw, ps, gs, good_thr)


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.as_dict(), indent=2) + "\n")
