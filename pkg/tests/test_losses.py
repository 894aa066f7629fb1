import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ambicodec.dsp import SpectrogramConfig
from ambicodec.losses import (LossWeights, NonFiniteLossError, adversarial_and_feature_losses,
                              composite_generator_loss, covariance_loss, covariance_loss_backward,
                              covariance_loss_value, multiscale_mel_loss, normalized_covariance, sample_covariance)
from oracles import central_difference, pearson_two_pass, rel_err

SMALL_SCALES = [SpectrogramConfig(16, 4, 3, sample_rate=8000), SpectrogramConfig(32, 8, 5, sample_rate=8000)]


def t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def oracle_loss(ref, rec):
    return 0.5 * np.abs(pearson_two_pass(ref) - pearson_two_pass(rec)).sum()


class TestNormalizedCovariance:
    def test_matches_two_pass_oracle(self, rng):
        for _ in range(20):
            x = rng.standard_normal((int(rng.integers(2, 6)), int(rng.integers(3, 40))))
            np.testing.assert_allclose(normalized_covariance(t(x)).numpy(), pearson_two_pass(x), atol=1e-10)

    def test_sample_covariance_divisor(self, rng):
        x = rng.standard_normal((3, 17))
        np.testing.assert_allclose(sample_covariance(t(x)).numpy(), np.cov(x), atol=1e-12)

    def test_unit_diagonal(self, rng):
        r = normalized_covariance(t(rng.standard_normal((5, 100))))
        np.testing.assert_allclose(torch.diagonal(r).numpy(), 1.0, atol=1e-9)

    def test_anti_correlated(self, rng):
        a = rng.standard_normal(50)
        r = normalized_covariance(t([a, -a]))
        assert float(r[0, 1]) == pytest.approx(-1.0, abs=1e-9)

    def test_silent_channel_is_finite(self):
        r = normalized_covariance(t([[0.0] * 8, [1.0, -1.0] * 4]))
        assert torch.isfinite(r).all()
        assert float(r[0, 1]) == 0.0

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            normalized_covariance(torch.zeros(2, 1))


class TestCovarianceLoss:
    def test_identical_pair_is_zero(self, rng):
        x = t(rng.standard_normal((16, 200)))
        assert float(covariance_loss(x, x)) == 0.0

    def test_sign_flip_case_is_two(self, rng):
        a = rng.standard_normal(64)
        loss = covariance_loss(t([a, a]), t([a, -a]))
        assert float(loss) == pytest.approx(2.0, abs=1e-8)

    def test_single_channel_is_zero(self, rng):
        assert float(covariance_loss(t(rng.standard_normal((1, 30))), t(rng.standard_normal((1, 30))))) == 0.0

    def test_matches_oracle(self, rng):
        for _ in range(10):
            ref, rec = rng.standard_normal((4, 25)), rng.standard_normal((4, 25))
            assert float(covariance_loss(t(ref), t(rec))) == pytest.approx(oracle_loss(ref, rec), abs=1e-10)

    def test_batch_is_item_mean(self, rng):
        ref, rec = rng.standard_normal((3, 4, 25)), rng.standard_normal((3, 4, 25))
        want = np.mean([oracle_loss(a, b) for a, b in zip(ref, rec)])
        assert float(covariance_loss(t(ref), t(rec))) == pytest.approx(want, abs=1e-10)

    @pytest.mark.parametrize("n", [2, 4, 16])
    def test_bound_fuzz(self, rng, n):
        for _ in range(100):
            scale = 10.0 ** rng.uniform(-3, 3, (n, 1))
            ref, rec = rng.standard_normal((n, 40)) * scale, rng.standard_normal((n, 40))
            if rng.random() < 0.3:
                rec[:] = rec[0]  # fully correlated reconstructions sit near the upper end
            v = float(covariance_loss(t(ref), t(rec)))
            assert 0.0 <= v <= n * (n - 1)

    @given(st.integers(0, 2 ** 31))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = t(rng.standard_normal((3, 20))), t(rng.standard_normal((3, 20)))
        assert float(covariance_loss(a, b)) == pytest.approx(float(covariance_loss(b, a)), abs=1e-12)

    @given(st.lists(st.floats(0.1, 10), min_size=3, max_size=3), st.floats(-5, 5), st.integers(0, 2 ** 31))
    def test_invariant_to_per_channel_gain_and_offset(self, gains, offset, seed):
        rng = np.random.default_rng(seed)
        a, b = t(rng.standard_normal((3, 50))), t(rng.standard_normal((3, 50)))
        scaled = t(gains)[:, None] * b + offset
        # eps in the denominator perturbs r by about eps / (2 var_i var_j) <= 1e-5 here
        assert float(covariance_loss(a, scaled)) == pytest.approx(float(covariance_loss(a, b)), abs=2e-5)
        assert float(covariance_loss(scaled, a)) == pytest.approx(float(covariance_loss(b, a)), abs=2e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            covariance_loss(torch.zeros(2, 10), torch.zeros(3, 10))

    def test_backward_matches_finite_differences(self, rng):
        done = 0
        while done < 10:
            ref, rec = rng.standard_normal((3, 12)), rng.standard_normal((3, 12))
            gaps = np.abs(pearson_two_pass(ref) - pearson_two_pass(rec))[~np.eye(3, dtype=bool)]
            if gaps.min() < 1e-6:
                continue
            g = covariance_loss_backward(t(ref), t(rec)).numpy()
            assert rel_err(g, central_difference(lambda a: oracle_loss(ref, a), rec.copy())) < 1e-6
            done += 1

    def test_autograd_uses_authored_backward(self, rng):
        ref, rec = t(rng.standard_normal((2, 4, 16))), t(rng.standard_normal((2, 4, 16))).requires_grad_()
        covariance_loss(ref, rec).backward()
        torch.testing.assert_close(rec.grad, covariance_loss_backward(ref, rec.detach()))

    def test_identical_pair_has_zero_gradient(self, rng):
        x = t(rng.standard_normal((4, 30)))
        assert not covariance_loss_backward(x, x.clone()).any()

    def test_uniform_gain_direction_has_zero_gradient(self, rng):
        # scaling the reconstruction does not change correlations
        ref, rec = t(rng.standard_normal((3, 40))), t(rng.standard_normal((3, 40)))
        g = covariance_loss_backward(ref, rec)
        assert abs(float((g * rec).sum())) < 1e-6 * float(g.norm() * rec.norm())

    def test_value_function_agrees(self, rng):
        a, b = t(rng.standard_normal((3, 20))), t(rng.standard_normal((3, 20)))
        assert float(covariance_loss_value(a, b)) == float(covariance_loss(a, b))


class TestMelLoss:
    def test_identical_is_zero(self, rng):
        x = t(rng.standard_normal((2, 200)))
        assert float(multiscale_mel_loss(x, x, SMALL_SCALES)) == 0.0

    def test_positive_for_different(self, rng):
        a, b = t(rng.standard_normal((2, 200))), t(rng.standard_normal((2, 200)))
        assert float(multiscale_mel_loss(a, b, SMALL_SCALES)) > 0

    def test_channel_permutation_invariant(self, rng):
        a, b = t(rng.standard_normal((4, 200))), t(rng.standard_normal((4, 200)))
        perm = [3, 1, 0, 2]
        assert float(multiscale_mel_loss(a[perm], b[perm], SMALL_SCALES)) == pytest.approx(
            float(multiscale_mel_loss(a, b, SMALL_SCALES)), rel=1e-12)

    def test_replicated_channels_equal_mono(self, rng):
        a, b = t(rng.standard_normal((1, 300))), t(rng.standard_normal((1, 300)))
        mono = float(multiscale_mel_loss(a, b, SMALL_SCALES))
        multi = float(multiscale_mel_loss(a.repeat(16, 1), b.repeat(16, 1), SMALL_SCALES))
        assert multi == pytest.approx(mono, rel=1e-12)

    def test_is_mean_over_channels(self, rng):
        a, b = t(rng.standard_normal((3, 200))), t(rng.standard_normal((3, 200)))
        per = [float(multiscale_mel_loss(a[i:i + 1], b[i:i + 1], SMALL_SCALES)) for i in range(3)]
        assert float(multiscale_mel_loss(a, b, SMALL_SCALES)) == pytest.approx(np.mean(per), rel=1e-12)

    def test_per_item(self, rng):
        a, b = t(rng.standard_normal((3, 2, 200))), t(rng.standard_normal((3, 2, 200)))
        items = multiscale_mel_loss(a, b, SMALL_SCALES, per_item=True)
        assert items.shape == (3,)
        assert float(items.mean()) == pytest.approx(float(multiscale_mel_loss(a, b, SMALL_SCALES)), rel=1e-12)

    def test_gradient_only_through_reconstruction(self, rng):
        a = t(rng.standard_normal((1, 200))).requires_grad_()
        b = t(rng.standard_normal((1, 200))).requires_grad_()
        multiscale_mel_loss(a, b, SMALL_SCALES).backward()
        assert a.grad is None
        assert b.grad.abs().sum() > 0

    def test_default_scales_on_five_second_mono(self, rng):
        x = torch.from_numpy(rng.standard_normal((1, 1, 44100))).float()
        assert float(multiscale_mel_loss(x, 0.5 * x)) > 0


def fake_outputs(rng, n=2):
    return [(t(rng.standard_normal((2, 3, 4))), [t(rng.standard_normal((2, 3, k))) for k in (5, 3)])
            for _ in range(n)]


class TestAdversarial:
    def test_perfect_discriminator_values(self):
        ones, zeros = torch.ones(2, 3), torch.zeros(2, 3)
        feats = [torch.ones(2, 4)]
        adv_g, adv_d, feat = adversarial_and_feature_losses([(ones, feats)], [(zeros, feats)])
        assert float(adv_d) == 0.0
        assert float(adv_g) == 1.0
        assert float(feat) == 0.0

    def test_half_logits(self):
        half = torch.full((4,), 0.5)
        adv_g, adv_d, _ = adversarial_and_feature_losses([(half, [half])], [(half, [half])])
        assert float(adv_g) == 0.25
        assert float(adv_d) == 0.5

    def test_feature_matching_is_l1(self, rng):
        real, fake = fake_outputs(rng, 1), fake_outputs(rng, 1)
        _, _, feat = adversarial_and_feature_losses(real, fake)
        want = np.mean([np.abs(a.numpy() - b.numpy()).mean() for a, b in zip(real[0][1], fake[0][1])])
        assert float(feat) == pytest.approx(want, rel=1e-12)

    def test_structure_mismatch(self, rng):
        with pytest.raises(ValueError):
            adversarial_and_feature_losses(fake_outputs(rng, 2), fake_outputs(rng, 1))
        real = fake_outputs(rng, 1)
        bad = [(real[0][0], real[0][1][:1])]
        with pytest.raises(ValueError):
            adversarial_and_feature_losses(real, bad)

    def test_feature_gradient_stops_at_real(self, rng):
        real = [(t(rng.standard_normal(3)), [t(rng.standard_normal(5)).requires_grad_()])]
        fake = [(t(rng.standard_normal(3)), [t(rng.standard_normal(5)).requires_grad_()])]
        adversarial_and_feature_losses(real, fake)[2].backward()
        assert real[0][1][0].grad is None
        assert fake[0][1][0].grad is not None


class TestComposite:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.mel, w.feature_matching, w.adversarial, w.codebook, w.commitment, w.covariance) == \
            (15.0, 2.0, 1.0, 1.0, 0.25, 1.0)

    def test_weighted_sum(self):
        total = composite_generator_loss({"mel": 1.0, "feature_matching": 1.0, "covariance": 3.0})
        assert total == 15.0 + 2.0 + 3.0

    def test_zero_weight_drops_gradient(self):
        x = torch.tensor(2.0, requires_grad=True)
        y = torch.tensor(3.0, requires_grad=True)
        total = composite_generator_loss({"mel": x, "covariance": y}, LossWeights(covariance=0.0))
        total.backward()
        assert y.grad is None
        assert float(x.grad) == 15.0

    def test_non_finite_names_term(self):
        with pytest.raises(NonFiniteLossError, match="covariance") as info:
            composite_generator_loss({"mel": 1.0, "covariance": math.nan}, step=7)
        assert info.value.term == "covariance"
        assert info.value.step == 7

    def test_unknown_term(self):
        with pytest.raises(KeyError):
            composite_generator_loss({"perceptual": 1.0})

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(mel=-1.0)
