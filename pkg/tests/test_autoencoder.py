import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from molingo_lab.autoencoder import (
    AutoencoderConfig,
    LatentSequence,
    build_autoencoder,
    class_tokens,
    decode,
    encode,
    filter_repetitive,
    kl_loss,
    latent_label_window,
    recon_loss,
    reparameterize,
    semantic_loss,
)
from molingo_lab.motion import MotionSequence, NormalizationStats, TOY_SPEC, compute_stats
from molingo_lab.text_encoding import ToyTextEncoder


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    cfg = AutoencoderConfig(variant="ae", hidden=32, latent_dim=8, downsample=4)
    return build_autoencoder(TOY_SPEC.dim, cfg)


@pytest.fixture(scope="module")
def text_encoder():
    return ToyTextEncoder()


class TestArchitecture:
    def test_latent_count_is_frames_over_h(self, small_model):
        with torch.no_grad():
            z = small_model.encoder(torch.randn(1, 196, 16))
        assert z.shape == (1, 49, 8)

    def test_constant_input_constant_output_replicate_padding(self, small_model):
        conv = small_model.encoder.conv_in
        bias = conv.conv.bias.data.clone()
        conv.conv.bias.data.zero_()
        try:
            with torch.no_grad():
                out = conv(torch.full((1, 16, 12), 0.37))
            assert (out - out[:, :, :1]).abs().max() <= 1e-6
        finally:
            conv.conv.bias.data.copy_(bias)

    def test_causality_receptive_field(self, small_model):
        # architecture trace: latent i sees frames <= 4i+3, within the 4i+4 bound
        torch.manual_seed(1)
        x = torch.randn(1, 64, 16)
        with torch.no_grad():
            z = small_model.encoder(x)
            for i in range(0, z.shape[1], 3):
                cut = 4 * i + 4 + 1
                if cut >= 64:
                    break
                x2 = x.clone()
                x2[:, cut:] = torch.randn(1, 64 - cut, 16)
                z2 = small_model.encoder(x2)
                assert torch.equal(z[:, : i + 1], z2[:, : i + 1])

    def test_encode_prefix_equivariance(self, small_model):
        torch.manual_seed(2)
        x = torch.randn(1, 48, 16)
        with torch.no_grad():
            full = small_model.encoder(x)
            prefix = small_model.encoder(x[:, :24])
        assert torch.equal(prefix, full[:, :6])

    def test_decoder_upsamples_back(self, small_model):
        with torch.no_grad():
            out = small_model.decoder(torch.randn(2, 12, 8))
        assert out.shape == (2, 48, 16)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            AutoencoderConfig(downsample=3)
        with pytest.raises(ValueError):
            AutoencoderConfig(variant="vqvae")
        with pytest.raises(ValueError):
            AutoencoderConfig(lambda_vel=-1.0)

    def test_downsample_2_single_stage(self):
        cfg = AutoencoderConfig(variant="ae", hidden=16, latent_dim=4, downsample=2)
        model = build_autoencoder(16, cfg)
        assert len(model.encoder.stages) == 1
        with torch.no_grad():
            z = model.encoder(torch.randn(1, 20, 16))
        assert z.shape == (1, 10, 4)


class TestEncodeDecode:
    def test_ae_deterministic(self, small_model):
        m = MotionSequence(torch.randn(30, 16), TOY_SPEC)
        a = encode(small_model, m)
        b = encode(small_model, m)
        assert torch.equal(a.latents, b.latents)
        assert a.latents.shape == (8, 8)  # 30 -> padded 32 -> l=8
        assert a.mean is None

    def test_vae_seeded_sample_reproducible(self):
        torch.manual_seed(3)
        cfg = AutoencoderConfig(variant="vae", hidden=32, latent_dim=8)
        model = build_autoencoder(16, cfg)
        m = MotionSequence(torch.randn(24, 16), TOY_SPEC)
        a = encode(model, m, torch.Generator().manual_seed(5))
        b = encode(model, m, torch.Generator().manual_seed(5))
        c = encode(model, m, torch.Generator().manual_seed(6))
        assert torch.equal(a.latents, b.latents)
        assert not torch.equal(a.latents, c.latents)
        assert a.mean is not None and a.log_var is not None

    def test_log_var_minus_inf_is_mean_path(self):
        mean = torch.randn(4, 8)
        log_var = torch.full((4, 8), float("-inf"))
        sample = reparameterize(mean, log_var, torch.Generator().manual_seed(0))
        assert torch.equal(sample, mean)

    def test_decode_truncates_to_original_length(self, small_model):
        m = MotionSequence(torch.randn(30, 16), TOY_SPEC)
        lat = encode(small_model, m)
        out = decode(small_model, lat, TOY_SPEC)
        assert out.frames.shape == (30, 16)

    def test_latent_dim_mismatch_rejected(self, small_model):
        lat = LatentSequence(latents=torch.zeros(4, 5), h=4, n_frames=16)
        with pytest.raises(ValueError, match="latent dim"):
            decode(small_model, lat, TOY_SPEC)


class TestReconLoss:
    def test_perfect_reconstruction_all_zero(self, toy_corpus):
        stats = compute_stats(toy_corpus)
        x = toy_corpus[0]
        l_feat, l_joint, l_vel, l_recon = recon_loss(x, x, stats)
        assert l_feat == 0 and l_joint == 0 and l_vel == 0 and l_recon == 0

    def test_paper_default_weights(self):
        cfg = AutoencoderConfig()
        assert cfg.lambda_joint == 1.0
        assert cfg.lambda_vel == 10.0
        assert cfg.lambda_kl == 1e-5
        assert cfg.tau == 0.995

    def test_single_frame_velocity_loss_zero_with_warning(self, caplog):
        stats = NormalizationStats(torch.zeros(16), torch.ones(16))
        x = MotionSequence(torch.randn(1, 16), TOY_SPEC)
        x_hat = MotionSequence(x.frames * 1.1, TOY_SPEC)
        with caplog.at_level("WARNING"):
            _, _, l_vel, _ = recon_loss(x, x_hat, stats)
        assert l_vel == 0
        assert "velocity" in caplog.text

    def test_shape_mismatch_rejected(self):
        stats = NormalizationStats(torch.zeros(16), torch.ones(16))
        with pytest.raises(ValueError):
            recon_loss(
                MotionSequence(torch.zeros(3, 16), TOY_SPEC),
                MotionSequence(torch.zeros(4, 16), TOY_SPEC),
                stats,
            )

    def test_gradient_matches_finite_differences(self, toy_corpus):
        # central differences on L_recon w.r.t. reconstruction entries, float64
        stats = compute_stats(toy_corpus)
        torch.manual_seed(0)
        x = toy_corpus[0].frames[:9].double()
        x_hat = (x + 0.1 * torch.randn_like(x)).requires_grad_(True)

        def loss_fn(xh):
            return recon_loss(
                MotionSequence(x, TOY_SPEC), MotionSequence(xh, TOY_SPEC), stats
            )[3]

        loss = loss_fn(x_hat)
        (grad,) = torch.autograd.grad(loss, x_hat)
        eps = 1e-5
        for _ in range(10):
            d = torch.randn_like(x)
            d /= d.norm()
            with torch.no_grad():
                num = (loss_fn(x_hat + eps * d) - loss_fn(x_hat - eps * d)) / (2 * eps)
            ana = (grad * d).sum()
            rel = abs(float(num - ana)) / max(abs(float(ana)), 1e-12)
            assert rel < 1e-4


class TestKlLoss:
    def test_standard_normal_is_zero(self):
        assert float(kl_loss(torch.zeros(3, 4), torch.zeros(3, 4))) == 0

    def test_unit_mean_single_dim_is_half(self):
        assert float(kl_loss(torch.ones(1, 1), torch.zeros(1, 1))) == pytest.approx(0.5)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        mean = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        log_var = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        loss = kl_loss(mean, log_var)
        g_mean, g_lv = torch.autograd.grad(loss, (mean, log_var))
        eps = 1e-5
        for _ in range(10):
            dm, dl = torch.randn_like(mean), torch.randn_like(log_var)
            norm = math.sqrt(float(dm.square().sum() + dl.square().sum()))
            dm, dl = dm / norm, dl / norm
            with torch.no_grad():
                num = (
                    kl_loss(mean + eps * dm, log_var + eps * dl)
                    - kl_loss(mean - eps * dm, log_var - eps * dl)
                ) / (2 * eps)
            ana = (g_mean * dm).sum() + (g_lv * dl).sum()
            rel = abs(float(num - ana)) / max(abs(float(ana)), 1e-12)
            assert rel < 1e-4


class TestClassTokens:
    def test_window_formula(self):
        assert latent_label_window(4, 4) == (0, 20)
        assert latent_label_window(0, 4) == (-16, 4)
        assert latent_label_window(10, 4) == (24, 44)

    def test_uniform_labels_give_identical_tokens(self, text_encoder):
        torch.manual_seed(0)
        proj = torch.nn.Linear(text_encoder.embed_dim, 8)
        toks = class_tokens(["squat slow"] * 40, text_encoder, proj, h=4)
        assert toks.tokens.shape == (10, 8)
        assert toks.valid_mask.all()
        assert (toks.tokens - toks.tokens[0]).abs().max() < 1e-6

    def test_two_label_switch_affects_only_straddling_windows(self, text_encoder):
        torch.manual_seed(0)
        proj = torch.nn.Linear(text_encoder.embed_dim, 8)
        n = 80
        labels = ["walk fast"] * 40 + ["squat slow"] * 40
        mixed = class_tokens(labels, text_encoder, proj, h=4)
        pure_a = class_tokens(["walk fast"] * n, text_encoder, proj, h=4)
        pure_b = class_tokens(["squat slow"] * n, text_encoder, proj, h=4)
        # windows [4i-16, 4i+4] straddle frame 40 exactly for i in 9..13
        for i in range(20):
            if i <= 8:
                assert torch.allclose(mixed.tokens[i], pure_a.tokens[i], atol=1e-6)
            elif i >= 14:
                assert torch.allclose(mixed.tokens[i], pure_b.tokens[i], atol=1e-6)
            else:
                assert not torch.allclose(mixed.tokens[i], pure_a.tokens[i], atol=1e-4)
                assert not torch.allclose(mixed.tokens[i], pure_b.tokens[i], atol=1e-4)

    def test_missing_labels_invalidate_windows(self, text_encoder):
        proj = torch.nn.Identity()
        labels = [None] * 40 + ["wave left hand"] * 24
        toks = class_tokens(labels, text_encoder, proj, h=4)
        # windows fully inside the unlabeled prefix are invalid: 4i+4 < 40 -> i <= 8
        assert not toks.valid_mask[:9].any()
        assert toks.valid_mask[9:].all()


class TestFilterRepetitive:
    def test_identical_tokens_keep_only_last_per_sequence(self):
        kappa = torch.ones(12, 8)
        seq = torch.tensor([0] * 6 + [1] * 6)
        kept = filter_repetitive(kappa, tau=0.995, seq_ids=seq)
        assert kept.tolist() == [False] * 5 + [True] + [False] * 5 + [True]

    def test_tau_at_least_one_keeps_everything(self):
        torch.manual_seed(0)
        kappa = torch.randn(20, 8)
        assert filter_repetitive(kappa, tau=1.0).all()

    def test_alternating_orthogonal_keeps_everything(self):
        a, b = torch.zeros(8), torch.zeros(8)
        a[0], b[1] = 1.0, 1.0
        kappa = torch.stack([a, b] * 5)
        assert filter_repetitive(kappa, tau=0.995).all()

    def test_invalid_positions_pre_excluded(self):
        kappa = torch.ones(6, 4)
        valid = torch.tensor([True, False, True, True, False, True])
        kept = filter_repetitive(kappa, tau=0.995, valid_mask=valid)
        # consecutive *valid* tokens: 0-2-3-5; identical so only last kept
        assert kept.tolist() == [False, False, False, False, False, True]

    @given(st.integers(min_value=0, max_value=1000))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_tau(self, seed):
        g = torch.Generator().manual_seed(seed)
        kappa = torch.randn(24, 4, generator=g)
        # correlated tokens so some deltas are high
        kappa[1::2] = kappa[0::2] + 0.05 * torch.randn(12, 4, generator=g)
        seq = torch.arange(24) // 8
        tau1, tau2 = 0.5, 0.9
        k1 = filter_repetitive(kappa, tau1, seq_ids=seq)
        k2 = filter_repetitive(kappa, tau2, seq_ids=seq)
        assert bool((~k1 | k2).all())  # kept(tau1) subset of kept(tau2)


class TestSemanticLoss:
    def test_positive_rescaling_gives_zero(self):
        torch.manual_seed(0)
        kappa = torch.randn(6, 8)
        scale = torch.rand(6, 1) * 5 + 0.1
        m = kappa * scale
        kept = torch.ones(6, dtype=torch.bool)
        assert float(semantic_loss(m, kappa, kept)) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_gives_one(self):
        m = torch.zeros(4, 8)
        kappa = torch.zeros(4, 8)
        m[:, 0] = 1.0
        kappa[:, 1] = 1.0
        kept = torch.ones(4, dtype=torch.bool)
        assert float(semantic_loss(m, kappa, kept)) == pytest.approx(1.0)

    def test_opposite_gives_two(self):
        torch.manual_seed(1)
        kappa = torch.randn(5, 8)
        kept = torch.ones(5, dtype=torch.bool)
        assert float(semantic_loss(-kappa, kappa, kept)) == pytest.approx(2.0, abs=1e-6)

    def test_zero_norm_positions_skipped_with_flag(self, caplog):
        kappa = torch.randn(3, 8)
        m = kappa.clone()
        m[1] = 0.0
        kept = torch.ones(3, dtype=torch.bool)
        with caplog.at_level("WARNING"):
            loss = semantic_loss(m, kappa, kept)
        assert "zero-norm" in caplog.text
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_empty_kept_set_is_zero_with_flag(self, caplog):
        with caplog.at_level("WARNING"):
            loss = semantic_loss(torch.randn(3, 8), torch.randn(3, 8), torch.zeros(3, dtype=torch.bool))
        assert float(loss) == 0
        assert "no kept positions" in caplog.text

    def test_gradient_flows_to_latents_and_projector_only(self, text_encoder):
        torch.manual_seed(0)
        proj = torch.nn.Linear(text_encoder.embed_dim, 8)
        raw = text_encoder.encode("walk fast").tokens.mean(0, keepdim=True).repeat(4, 1)
        kappa = proj(raw)
        m = torch.randn(4, 8, requires_grad=True)
        loss = semantic_loss(m, kappa, torch.ones(4, dtype=torch.bool))
        loss.backward()
        assert m.grad is not None and m.grad.abs().sum() > 0
        assert proj.weight.grad is not None and proj.weight.grad.abs().sum() > 0
