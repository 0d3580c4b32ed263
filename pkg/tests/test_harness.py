import csv

import numpy as np
import pytest
import torch

from helpers import TINY_SPEC, tiny_config
from momenthd.datagen import CorpusSpec, generate_corpus
from momenthd.harness import (
    LOG_COLUMNS, TrainConfig, ablate, ablation_variants, batch_losses, build_model, collate, evaluate,
    is_validation, load_checkpoint, load_config, model_from_checkpoint, predict, read_log, save_checkpoint,
    save_config, score_records, split_corpus, train,
)
from momenthd.losses import NonFiniteLossError
from momenthd.metrics import recall_at_1

SMALL = CorpusSpec(num_videos=24, clips_per_video=12, tokens_per_query=3, feature_dim=8,
                   num_concepts=3, moment_length=(2, 3), seed=1)


def small_cfg(**kw):
    return tiny_config(**{"batch_size": 4, "epochs": 1, "eval_every": 1, **kw})


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SMALL)


class TestConfig:
    def test_flat_round_trip(self, tmp_path):
        cfg = TrainConfig().replace(**{"fusion.dropout": 0.0, "loss.cta": 0.25, "switches": ["disable_gka"]})
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg
        assert cfg.to_flat()["loss.cta"] == 0.25

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            TrainConfig.from_flat({"nonsense": 1})

    def test_unknown_switch(self):
        with pytest.raises(ValueError):
            TrainConfig(switches=("disable_everything",))

    def test_split_is_stable(self, corpus):
        train_set, val_set = split_corpus(corpus, 0.2)
        assert len(train_set) + len(val_set) == len(corpus)
        assert all(is_validation(p.video_id, 0.2) for p in val_set.pairs)
        assert split_corpus(corpus, 0.2)[1] == val_set


class TestTraining:
    def test_zero_epochs_returns_initialization(self, corpus):
        cfg = small_cfg(epochs=0)
        ckpt, rows = train(cfg, corpus)
        torch.manual_seed(cfg.seed)
        init = build_model(cfg, 8, 8)
        assert rows == []
        for k, v in init.state_dict().items():
            assert torch.equal(v, ckpt["model"][k]), k

    def test_deterministic(self, corpus):
        a_ckpt, a_rows = train(small_cfg(epochs=2), corpus)
        b_ckpt, b_rows = train(small_cfg(epochs=2), corpus)
        for ra, rb in zip(a_rows, b_rows):
            for k in LOG_COLUMNS:
                assert abs(ra[k] - rb[k]) <= 1e-12
        _, val = split_corpus(corpus, 0.2)
        assert evaluate(a_ckpt, val)[0] == evaluate(b_ckpt, val)[0]

    def test_loss_decreases_on_tiny_corpus(self):
        tiny = generate_corpus(CorpusSpec(**{**TINY_SPEC.__dict__, "num_videos": 8}))
        cfg = tiny_config(batch_size=8, epochs=200, eval_every=1000, learning_rate=1e-3)
        _, rows = train(cfg, tiny, val_corpus=tiny.subset([]))
        assert len(rows) == 200
        assert rows[-1]["total"] < rows[0]["total"]

    def test_outputs_written(self, corpus, tmp_path):
        train(small_cfg(epochs=2), corpus, out_dir=tmp_path)
        for name in ("train_log.csv", "final.pt", "best.pt", "config.json"):
            assert (tmp_path / name).exists()
        with open(tmp_path / "train_log.csv") as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == LOG_COLUMNS
        rows = read_log(tmp_path / "train_log.csv")
        assert all(set(r) == set(LOG_COLUMNS) for r in rows)

    def test_non_finite_loss_aborts_with_term_and_step(self, corpus):
        with pytest.raises(NonFiniteLossError) as err:
            train(small_cfg(rank_temperature=0.0), corpus)
        assert err.value.term == "rank" and err.value.step == 0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train(small_cfg(), generate_corpus(CorpusSpec(num_videos=0)))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, corpus, tmp_path):
        ckpt, _ = train(small_cfg(), corpus)
        save_checkpoint(ckpt, tmp_path / "m.pt")
        m1, _ = model_from_checkpoint(ckpt)
        m2, _ = model_from_checkpoint(load_checkpoint(tmp_path / "m.pt"))
        b = collate(corpus.pairs[:5])
        o1 = m1(b.vis, b.txt, b.mask_v, b.mask_t)
        o2 = m2(b.vis, b.txt, b.mask_v, b.mask_t)
        for k in ("spans", "fg_logits", "saliency"):
            assert torch.equal(o1[k], o2[k])

    def test_dimension_mismatch(self, corpus):
        ckpt, _ = train(small_cfg(epochs=0), corpus)
        other = generate_corpus(CorpusSpec(num_videos=2, feature_dim=5, clips_per_video=12,
                                           tokens_per_query=3, num_concepts=3, moment_length=(2, 3)))
        with pytest.raises(ValueError, match="do not match"):
            evaluate(ckpt, other)


class TestEvaluation:
    def test_report_in_unit_interval(self, corpus):
        ckpt, _ = train(small_cfg(), corpus)
        report, records = evaluate(ckpt, corpus)
        assert len(records) == len(corpus)
        assert all(0.0 <= v <= 1.0 for v in report.as_dict().values())

    def test_oracle_records_score_one(self, corpus):
        records = [{
            "video_id": p.video_id,
            "pred_spans": [[*s.as_bounds(), 1.0] for s in p.gt_spans],
            "pred_saliency": p.gt_saliency.tolist(),
        } for p in corpus.pairs]
        assert all(v == 1.0 for v in score_records(records, corpus).as_dict().values())

    def test_random_checkpoint_near_chance(self):
        """An untrained model is no better than random spans (Monte-Carlo estimate)."""
        c = generate_corpus(CorpusSpec(num_videos=64, seed=3))
        ckpt, _ = train(TrainConfig(epochs=0), c)
        report, _ = evaluate(ckpt, c)
        chance = monte_carlo_r1(c, draws=200)
        assert report.r1_at_05 <= chance + 0.15


def monte_carlo_r1(corpus, draws=200, seed=0):
    """Mean R1@0.5 of uniformly random [start, end] windows."""
    rng = np.random.default_rng(seed)
    gts = [np.array([s.as_bounds() for s in p.gt_spans]) for p in corpus.pairs]
    vals = []
    for _ in range(draws):
        preds = [np.array([[*np.sort(rng.uniform(size=2)), 1.0]]) for _ in gts]
        vals.append(recall_at_1(preds, gts, 0.5))
    return float(np.mean(vals))


class TestAblation:
    def test_variant_order(self):
        assert ablation_variants([]) == [()]
        assert ablation_variants(["disable_lrp", "disable_mcl"]) == [
            (), ("disable_lrp",), ("disable_mcl",), ("disable_lrp", "disable_mcl")]
        assert ablation_variants(["disable_lrp", "disable_mcl"], grid=False) == [
            (), ("disable_lrp",), ("disable_mcl",)]

    def test_rows(self, corpus, tmp_path):
        rows = ablate(small_cfg(), corpus, [], out_dir=tmp_path)
        assert [r["variant"] for r in rows] == ["full"]
        rows = ablate(small_cfg(), corpus, ["disable_lrp"])
        assert [r["variant"] for r in rows] == ["full", "disable_lrp"]
        assert (tmp_path / "ablation.csv").exists()

    def test_disable_lrp_changes_parameters(self, corpus):
        full, _ = train(small_cfg(), corpus)
        off, _ = train(small_cfg(switches=["disable_lrp"]), corpus)
        assert any(not torch.equal(full["model"][k], off["model"][k]) for k in full["model"])

    @pytest.mark.parametrize("switch", ["disable_dbia", "disable_lrp", "disable_gka", "disable_mcl"])
    def test_every_switch_trains(self, corpus, switch):
        cfg = small_cfg(switches=[switch])
        model = build_model(cfg, 8, 8)
        report, _ = batch_losses(model, collate(corpus.pairs[:4]), cfg, torch.Generator().manual_seed(0))
        assert np.isfinite(report.total.item())
        if switch == "disable_mcl":
            assert report.as_row()["cta"] >= 0  # still logged, weighted zero
