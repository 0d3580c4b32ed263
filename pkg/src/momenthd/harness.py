"""Training, evaluation, checkpointing and ablation runs."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dbia import DbiaConfig
from .encoder import FusionConfig
from .heads import MatchCostWeights
from .losses import (
    TERMS, LossWeights, cta_loss, hard_negative_loss, margin_rank_loss, rank_aware_loss,
    sample_saliency_pairs, set_losses, total_loss, vld_loss,
)
from .lrp import BmrwConfig
from .metrics import MetricsReport, compute_metrics
from .model import SWITCHES, MomentHDModel, ranked_windows

log = logging.getLogger(__name__)

THREADS_ENV = "MOMENTHD_NUM_THREADS"
_NESTED = {"loss": LossWeights, "dbia": DbiaConfig, "bmrw": BmrwConfig, "fusion": FusionConfig}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    lr_drop_epoch: int = 20
    seed: int = 0
    good_thr: float = 0.8
    grad_clip: float = 0.1
    val_fraction: float = 0.2
    eval_every: int = 5
    gka_layers: int = 3
    decoder_layers: int = 3
    saliency_dim: int = 0  # 0 -> hidden dim
    margin: float = 0.2
    rank_temperature: float = 0.5
    cta_temperature: float = 1.0
    vld_temperature: float = 0.1
    saliency_pairs: int = 2
    eos_weight: float = 0.1
    switches: tuple = ()
    loss: LossWeights = field(default_factory=LossWeights)
    dbia: DbiaConfig = field(default_factory=DbiaConfig)
    bmrw: BmrwConfig = field(default_factory=BmrwConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.weight_decay >= 0):
            raise ValueError("learning_rate must be positive and weight_decay nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.switches = tuple(self.switches)
        bad = set(self.switches) - set(SWITCHES)
        if bad:
            raise ValueError(f"unknown switches {sorted(bad)}")

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in _NESTED:
                for k, sub in dataclasses.asdict(v).items():
                    flat[f"{f.name}.{k}"] = sub
            else:
                flat[f.name] = list(v) if isinstance(v, tuple) else v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        top, nested = {}, {k: {} for k in _NESTED}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail and head in _NESTED:
                nested[head][tail] = value
            elif key in names:
                top[key] = value
            else:
                raise KeyError(f"unknown config key {key!r}")
        for name, kind in _NESTED.items():
            top[name] = kind(**nested[name])
        return cls(**top)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_flat({**self.to_flat(), **kw})


def load_config(path) -> TrainConfig:
    return TrainConfig.from_flat(json.loads(Path(path).read_text()))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat(), indent=2) + "\n")


def configure_threads() -> int:
    n = int(os.environ.get(THREADS_ENV, "0") or 0)
    if n > 0:
        torch.set_num_threads(n)
    return torch.get_num_threads()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


# --- data ---------------------------------------------------------------------

def is_validation(video_id: str, fraction: float) -> bool:
    h = int(hashlib.md5(video_id.encode()).hexdigest()[:8], 16)
    return (h % 10_000) < fraction * 10_000


def split_corpus(corpus, fraction: float):
    val = [p.video_id for p in corpus.pairs if is_validation(p.video_id, fraction)]
    train = [p.video_id for p in corpus.pairs if not is_validation(p.video_id, fraction)]
    return corpus.subset(train), corpus.subset(val)


@dataclass
class Batch:
    video_ids: list
    vis: torch.Tensor
    txt: torch.Tensor
    mask_v: torch.Tensor
    mask_t: torch.Tensor
    gt_spans: list
    saliency: torch.Tensor
    relevance: torch.Tensor


def collate(pairs, dtype=torch.float32) -> Batch:
    B = len(pairs)
    L = max(p.clip_features.shape[0] for p in pairs)
    N = max(p.token_features.shape[0] for p in pairs)
    Dv = pairs[0].clip_features.shape[1]
    Dt = pairs[0].token_features.shape[1]
    vis = torch.zeros(B, L, Dv, dtype=dtype)
    txt = torch.zeros(B, N, Dt, dtype=dtype)
    mask_v = torch.ones(B, L, dtype=torch.bool)
    mask_t = torch.ones(B, N, dtype=torch.bool)
    sal = torch.zeros(B, L, dtype=dtype)
    rel = torch.zeros(B, L, dtype=dtype)
    spans = []
    for i, p in enumerate(pairs):
        l, n = p.clip_features.shape[0], p.token_features.shape[0]
        vis[i, :l] = torch.as_tensor(p.clip_features, dtype=dtype)
        txt[i, :n] = torch.as_tensor(p.token_features, dtype=dtype)
        mask_v[i, :l] = False
        mask_t[i, :n] = False
        sal[i, :l] = torch.as_tensor(p.gt_saliency, dtype=dtype)
        rel[i, :l] = torch.as_tensor(p.relevance_mask, dtype=dtype)
        spans.append(torch.tensor([[s.center, s.width] for s in p.gt_spans], dtype=dtype).reshape(-1, 2))
    return Batch([p.video_id for p in pairs], vis, txt, mask_v, mask_t, spans, sal, rel)


# --- model / loss ---------------------------------------------------------------

def build_model(cfg: TrainConfig, visual_dim: int, text_dim: int) -> MomentHDModel:
    return MomentHDModel(
        visual_dim, text_dim, cfg.fusion, cfg.dbia, cfg.bmrw,
        gka_layers=cfg.gka_layers, decoder_layers=cfg.decoder_layers,
        saliency_dim=cfg.saliency_dim or None, switches=cfg.switches,
    )


def effective_weights(cfg: TrainConfig) -> LossWeights:
    if "disable_mcl" in cfg.switches:
        return dataclasses.replace(cfg.loss, cta=0.0, vld=0.0)
    return cfg.loss


def batch_losses(model, batch: Batch, cfg: TrainConfig, generator=None, step=None):
    """Forward pass plus every loss term; returns (LossReport, model outputs)."""
    out = model(batch.vis, batch.txt, batch.mask_v, batch.mask_t, hard_negatives=True)
    cost = MatchCostWeights(l1=cfg.loss.l1, giou=cfg.loss.giou, fg=1.0)
    parts = set_losses(out["spans"], out["fg_logits"], batch.gt_spans, batch.mask_t, cost, cfg.eos_weight)
    pairs = sample_saliency_pairs(batch.saliency, cfg.saliency_pairs, generator, batch.mask_v)
    parts["margin"] = margin_rank_loss(out["saliency"], margin=cfg.margin, pairs=pairs)
    parts["rank"] = rank_aware_loss(out["saliency"], batch.saliency, cfg.rank_temperature, mask=batch.mask_v)
    if "saliency_hard" in out:
        parts["hard"] = hard_negative_loss(out["saliency_hard"], batch.mask_v)
    else:
        parts["hard"] = out["saliency"].sum() * 0.0
    weights = effective_weights(cfg)
    parts["cta"] = cta_loss(out["Fv_new"], out["Ft"], batch.relevance, cfg.cta_temperature,
                            batch.mask_t, batch.mask_v)
    sent = (out["Ft"] * (~batch.mask_t).unsqueeze(-1)).sum(1) / (~batch.mask_t).sum(1, keepdim=True)
    parts["vld"] = vld_loss(out["Fv_g"], sent, cfg.vld_temperature)
    return total_loss(parts, weights, step), out


# --- checkpoints -----------------------------------------------------------------

def make_checkpoint(model, optimizer, cfg: TrainConfig, step: int, dims) -> dict:
    return {
        "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "config": cfg.to_flat(),
        "step": step,
        "dims": list(dims),
    }


def save_checkpoint(ckpt: dict, path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt: dict) -> tuple[MomentHDModel, TrainConfig]:
    cfg = TrainConfig.from_flat(ckpt["config"])
    model = build_model(cfg, *ckpt["dims"])
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


# --- evaluation -------------------------------------------------------------------

@torch.no_grad()
def predict(model, corpus, batch_size=32) -> list[dict]:
    model.eval()
    records = []
    for i in range(0, len(corpus.pairs), batch_size):
        chunk = corpus.pairs[i:i + batch_size]
        b = collate(chunk)
        out = model(b.vis, b.txt, b.mask_v, b.mask_t)
        windows = ranked_windows(out["spans"], out["fg_logits"], b.mask_t)
        for j, p in enumerate(chunk):
            L = p.clip_features.shape[0]
            records.append({
                "video_id": p.video_id,
                "pred_spans": windows[j].tolist(),
                "pred_saliency": out["saliency"][j, :L].tolist(),
            })
    return records


def score_records(records, corpus, good_thr=0.8) -> MetricsReport:
    by_id = {r["video_id"]: r for r in records}
    ids = sorted(p.video_id for p in corpus.pairs)
    gts = {p.video_id: p for p in corpus.pairs}
    return compute_metrics(
        [np.asarray(by_id[v]["pred_spans"], dtype=np.float64).reshape(-1, 3) for v in ids],
        [np.array([s.as_bounds() for s in gts[v].gt_spans]) for v in ids],
        [by_id[v]["pred_saliency"] for v in ids],
        [gts[v].gt_saliency for v in ids],
        good_thr,
    )


def evaluate(checkpoint, corpus, good_thr=None):
    """Run inference with a checkpoint (dict or path) on ``corpus``.

    Returns (MetricsReport, prediction records).
    """
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    if corpus.pairs:
        dims = (corpus.pairs[0].clip_features.shape[1], corpus.pairs[0].token_features.shape[1])
        if tuple(dims) != tuple(ckpt["dims"]):
            raise ValueError(f"corpus feature dims {dims} do not match checkpoint {tuple(ckpt['dims'])}")
    model, cfg = model_from_checkpoint(ckpt)
    records = predict(model, corpus)
    thr = cfg.good_thr if good_thr is None else good_thr
    return score_records(records, corpus, thr), records


# --- training ------------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "step", "lr") + TERMS + ("total",)


def train(cfg: TrainConfig, corpus, out_dir=None, val_corpus=None, progress=None):
    """Train on ``corpus`` (minus its validation split unless ``val_corpus`` is given).

    Returns (final checkpoint dict, list of log rows). With ``out_dir`` the log
    CSV, ``final.pt``, ``best.pt`` and the config snapshot are written there.
    """
    if not corpus.pairs:
        raise ValueError("cannot train on an empty corpus")
    configure_threads()
    seed_everything(cfg.seed)
    if val_corpus is None:
        train_set, val_set = split_corpus(corpus, cfg.val_fraction)
    else:
        train_set, val_set = corpus, val_corpus
    dims = (corpus.pairs[0].clip_features.shape[1], corpus.pairs[0].token_features.shape[1])
    model = build_model(cfg, *dims)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(cfg.lr_drop_epoch, 1), gamma=0.1)
    gen = torch.Generator().manual_seed(cfg.seed)
    rows, step = [], 0
    best, best_score = make_checkpoint(model, opt, cfg, 0, dims), -1.0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
    n = len(train_set.pairs)
    t0 = time.time()
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen).tolist()
        for i in range(0, n, cfg.batch_size):
            batch = collate([train_set.pairs[j] for j in order[i:i + cfg.batch_size]])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                report, _ = batch_losses(model, batch, cfg, gen, step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            row = {"epoch": epoch, "step": step, "lr": opt.param_groups[0]["lr"], **report.as_row()}
            rows.append(row)
            step += 1
        sched.step()
        last = epoch == cfg.epochs - 1
        if val_set.pairs and ((epoch + 1) % max(cfg.eval_every, 1) == 0 or last):
            metrics = score_records(predict(model, val_set), val_set, cfg.good_thr)
            score = metrics.map_avg + metrics.hit_at_1
            log.info("epoch %d step %d loss %.4f val %s (%.0fs)", epoch, step, rows[-1]["total"],
                     metrics.as_dict(), time.time() - t0)
            if progress:
                progress(epoch, rows[-1], metrics)
            if score > best_score:
                best_score = score
                best = make_checkpoint(model, opt, cfg, step, dims)
    final = make_checkpoint(model, opt, cfg, step, dims)
    if out is not None:
        write_log(rows, out / "train_log.csv")
        save_checkpoint(final, out / "final.pt")
        save_checkpoint(best, out / "best.pt")
    return final, rows


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


# --- ablation -------------------------------------------------------------------------

def ablation_variants(switches, grid=True) -> list[tuple]:
    """Baseline first, then subsets in size order (grid) or one switch at a time."""
    switches = list(dict.fromkeys(switches))
    if grid:
        return [c for k in range(len(switches) + 1) for c in itertools.combinations(switches, k)]
    return [()] + [(s,) for s in switches]


def ablate(cfg: TrainConfig, corpus, switches, seeds=None, grid=True, out_dir=None):
    """Train every variant with identical seeds; one row per (variant, seed).

    Each row holds ``variant`` (switch names joined by '+', or 'full'),
    ``seed`` and the validation MetricsReport fields.
    """
    seeds = [cfg.seed] if seeds is None else list(seeds)
    train_set, val_set = split_corpus(corpus, cfg.val_fraction)
    rows = []
    for variant in ablation_variants(switches, grid):
        for seed in seeds:
            vcfg = cfg.replace(switches=list(variant), seed=seed)
            ckpt, _ = train(vcfg, train_set, val_corpus=val_set)
            report, _ = evaluate(ckpt, val_set)
            rows.append({"variant": "+".join(variant) or "full", "seed": seed, **report.as_dict()})
            log.info("ablation %s seed %d: %s", rows[-1]["variant"], seed, report.as_dict())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / "ablation.csv")
    return rows


def write_table(rows, path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
