"""Shared fixtures-as-functions for the unit and acceptance suites."""
import numpy as np
import torch

from momenthd.datagen import CorpusSpec, generate_corpus
from momenthd.dbia import DbiaConfig
from momenthd.encoder import FusionConfig
from momenthd.harness import TrainConfig, batch_losses, build_model, collate

ACCEPTANCE_LINES = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


TINY_SPEC = CorpusSpec(num_videos=2, clips_per_video=6, tokens_per_query=3, feature_dim=8,
                       num_concepts=3, moments_per_video=(1, 1), moment_length=(2, 3),
                       max_distractors=1, seed=5)


def tiny_config(**kw):
    cfg = TrainConfig(
        fusion=FusionConfig(hidden_dim=8, num_layers=1, num_heads=2, dropout=0.0, ffn_dim=16),
        dbia=DbiaConfig(n_v=3, n_t=2), gka_layers=1, decoder_layers=1,
    )
    return cfg.replace(**kw)


def finite_difference_check(num_params=25, h=1e-6, seed=0):
    """Relative errors of analytic vs central-difference gradients of the total loss.

    Returns an array with one entry per sampled scalar parameter.
    """
    torch.manual_seed(seed)
    cfg = tiny_config()
    corpus = generate_corpus(TINY_SPEC)
    batch = collate(corpus.pairs, dtype=torch.float64)
    model = build_model(cfg, TINY_SPEC.feature_dim, TINY_SPEC.feature_dim).double().train()

    def loss():
        gen = torch.Generator().manual_seed(seed)
        return batch_losses(model, batch, cfg, generator=gen)[0].total

    model.zero_grad()
    loss().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    # unused embedding rows (positions past the sequence length) carry no signal
    flat = [(p, i) for _, p in params for i in range(p.numel()) if p.grad.view(-1)[i] != 0]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=num_params, replace=False)
    errors = []
    for k in picks:
        p, i = flat[k]
        analytic = p.grad.view(-1)[i].item()
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + h
            up = loss().item()
            p.view(-1)[i] = orig - h
            down = loss().item()
            p.view(-1)[i] = orig
        numeric = (up - down) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    return np.array(errors)
