import dataclasses

import pytest
import torch

from molingo_lab.autoencoder import AutoencoderConfig
from molingo_lab.evaluation import EvaluatorConfig
from molingo_lab.generator import GeneratorConfig
from molingo_lab.training import (
    TrainParams,
    TrainingDiverged,
    _lr_at,
    train_autoencoder,
    train_evaluator,
    train_generator,
)

TINY_GEN = GeneratorConfig(
    layers=1, heads=2, width=16, flow_blocks=2, flow_width=16, latent_dim=4, adapter_depth=1
)


def _strip_labels(corpus):
    return [dataclasses.replace(m, labels=None) for m in corpus]


class TestLrSchedule:
    def test_no_warmup_constant(self):
        assert _lr_at(0, 1e-3, 0) == 1e-3
        assert _lr_at(500, 1e-3, 0) == 1e-3

    def test_linear_warmup_then_constant(self):
        assert _lr_at(0, 1e-3, 100) == pytest.approx(1e-5)
        assert _lr_at(49, 1e-3, 100) == pytest.approx(5e-4)
        assert _lr_at(99, 1e-3, 100) == pytest.approx(1e-3)
        assert _lr_at(100, 1e-3, 100) == 1e-3
        assert _lr_at(5000, 1e-3, 100) == 1e-3


class TestDeterminism:
    def test_autoencoder_bitwise(self, toy_corpus):
        params = TrainParams(steps=12, batch_size=8, lr=3e-4, seed=4)
        cfg = AutoencoderConfig(variant="sae", hidden=32, latent_dim=4)
        a, _ = train_autoencoder(toy_corpus, cfg, params)
        b, _ = train_autoencoder(toy_corpus, cfg, params)
        for k, v in a.model.state_dict().items():
            assert torch.equal(v, b.model.state_dict()[k]), k

    def test_generator_bitwise_step_100(self, toy_corpus):
        cfg = AutoencoderConfig(variant="ae", hidden=32, latent_dim=4)
        ae, _ = train_autoencoder(toy_corpus, cfg, TrainParams(steps=5, batch_size=8, lr=3e-4, seed=0))
        params = TrainParams(steps=100, batch_size=8, lr=3e-4, warmup_steps=10, seed=9)
        g1, _ = train_generator(toy_corpus, ae, TINY_GEN, params)
        g2, _ = train_generator(toy_corpus, ae, TINY_GEN, params)
        for k, v in g1.model.state_dict().items():
            assert torch.equal(v, g2.model.state_dict()[k]), k
        for k, v in g1.ema.items():
            assert torch.equal(v, g2.ema[k]), k


class TestDivergenceHandling:
    def test_autoencoder_divergence_aborts_with_finite_snapshot(self, toy_corpus):
        cfg = AutoencoderConfig(variant="ae", hidden=16, latent_dim=4)
        params = TrainParams(steps=60, batch_size=8, lr=1e18, seed=0, snapshot_every=5)
        with pytest.raises(TrainingDiverged) as exc:
            train_autoencoder(toy_corpus, cfg, params)
        for v in exc.value.bundle.model.state_dict().values():
            assert torch.isfinite(v).all()

    def test_generator_divergence_aborts_with_finite_snapshot(self, toy_corpus):
        cfg = AutoencoderConfig(variant="ae", hidden=16, latent_dim=4)
        ae, _ = train_autoencoder(toy_corpus, cfg, TrainParams(steps=3, batch_size=8, lr=3e-4, seed=0))
        params = TrainParams(steps=60, batch_size=8, lr=1e18, seed=0, snapshot_every=5)
        with pytest.raises(TrainingDiverged) as exc:
            train_generator(toy_corpus, ae, TINY_GEN, params)
        for v in exc.value.bundle.model.state_dict().values():
            assert torch.isfinite(v).all()


class TestValidation:
    def test_sae_requires_labels(self, toy_corpus):
        unlabeled = _strip_labels(toy_corpus)
        with pytest.raises(ValueError, match="labeled"):
            train_autoencoder(unlabeled, AutoencoderConfig(variant="sae"), TrainParams(steps=1))

    def test_plain_ae_trains_without_labels(self, toy_corpus):
        unlabeled = _strip_labels(toy_corpus)
        cfg = AutoencoderConfig(variant="ae", hidden=16, latent_dim=4)
        bundle, _ = train_autoencoder(unlabeled, cfg, TrainParams(steps=3, batch_size=8))
        assert bundle.cfg.variant == "ae"

    def test_generator_latent_dim_must_match(self, toy_corpus):
        cfg = AutoencoderConfig(variant="ae", hidden=16, latent_dim=8)
        ae, _ = train_autoencoder(toy_corpus, cfg, TrainParams(steps=2, batch_size=8))
        with pytest.raises(ValueError, match="latent_dim"):
            train_generator(toy_corpus, ae, TINY_GEN, TrainParams(steps=1))

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_autoencoder([], AutoencoderConfig(), TrainParams(steps=1))


class TestSmoke:
    def test_autoencoder_loss_decreases(self, toy_corpus):
        cfg = AutoencoderConfig(variant="ae", hidden=32, latent_dim=8)
        _, history = train_autoencoder(
            toy_corpus, cfg, TrainParams(steps=120, batch_size=16, lr=1e-3, seed=0, log_every=10)
        )
        feats = history.losses["l_feat"]
        assert feats[-1] < feats[0] * 0.5

    def test_vae_kl_term_present(self, toy_corpus):
        cfg = AutoencoderConfig(variant="vae", hidden=16, latent_dim=4)
        _, history = train_autoencoder(toy_corpus, cfg, TrainParams(steps=3, batch_size=8, log_every=1))
        assert "l_kl" in history.losses

    def test_sae_semantic_term_present(self, toy_corpus):
        cfg = AutoencoderConfig(variant="sae", hidden=16, latent_dim=4)
        _, history = train_autoencoder(toy_corpus, cfg, TrainParams(steps=3, batch_size=8, log_every=1))
        assert "l_sem" in history.losses

    def test_lambda_sem_sweep_expressible(self):
        for lam in (0.1, 0.01, 0.001):
            cfg = AutoencoderConfig(variant="sae", lambda_sem=lam)
            assert cfg.lambda_sem == lam

    def test_generator_flow_loss_decreases(self, toy_corpus):
        cfg = AutoencoderConfig(variant="ae", hidden=32, latent_dim=4)
        ae, _ = train_autoencoder(toy_corpus, cfg, TrainParams(steps=40, batch_size=16, lr=1e-3, seed=0))
        _, history = train_generator(
            toy_corpus, ae, TINY_GEN,
            TrainParams(steps=150, batch_size=16, lr=1e-3, warmup_steps=20, seed=0, log_every=10),
        )
        losses = history.losses["flow_loss"]
        assert losses[-1] < losses[0]
