import math

import numpy as np
import pytest
import torch

from stormtail.errors import ConfigError, DataError, ValidationError
from stormtail.losses import (
    ClassStats,
    LossConfig,
    blv_perturb,
    dice_heavy,
    la_adjust,
    main_loss,
    overall_loss,
    pixel_mean_ce,
    rarity_noise_scales,
    spatial_loss,
    wce_weights,
)

torch.manual_seed(0)

STATS6 = ClassStats(counts=np.array([700, 150, 80, 40, 25, 5]))
CFG = LossConfig()


def random_case(rng, h=4, w=4, c=6, batch=1):
    logits = torch.tensor(rng.standard_normal((batch, c, h, w)), dtype=torch.float64)
    target = torch.tensor(rng.integers(0, c, (batch, h, w)))
    return logits, target


def central_diff(fn, logits, eps=1e-6):
    """Finite-difference gradient oracle, independent of autograd."""
    grad = torch.zeros_like(logits)
    flat = logits.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn(logits).item()
        flat[i] = orig - eps
        down = fn(logits).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


class TestDiceHeavy:
    def test_perfect_one_hot_match_is_zero(self, rng):
        target = torch.tensor(rng.integers(0, 6, (1, 40, 40)))
        probs = torch.zeros(1, 6, 40, 40, dtype=torch.float64)
        probs.scatter_(1, target.unsqueeze(1), 1.0)
        loss = dice_heavy(probs, target, CFG)
        assert loss.item() <= 1e-3  # >= 1000 pixels, eps = 1

    def test_empty_empty_is_zero(self):
        target = torch.zeros(1, 4, 4, dtype=torch.long)
        probs = torch.zeros(1, 6, 4, 4, dtype=torch.float64)
        probs[:, 0] = 1.0
        assert dice_heavy(probs, target, CFG).item() == 0.0

    def test_hand_counted_overlap(self):
        # p = 1 on 2 of 4 heavy target pixels, no false mass
        target = torch.zeros(1, 4, 4, dtype=torch.long)
        target[0, 0, :4] = 4  # 4 heavy pixels
        probs = torch.zeros(1, 6, 4, 4, dtype=torch.float64)
        probs[:, 0] = 1.0
        for j in range(2):  # heavy mass on 2 true pixels only
            probs[0, 0, 0, j] = 0.0
            probs[0, 4, 0, j] = 1.0
        tiny = LossConfig(dice_smoothing=1e-9)
        assert dice_heavy(probs, target, tiny).item() == pytest.approx(1 / 3, abs=1e-8)
        # with the default eps = 1: 1 - (2*2 + 1) / (2 + 4 + 1)
        assert dice_heavy(probs, target, CFG).item() == pytest.approx(1 - 5 / 7, abs=1e-12)

    def test_unnormalized_probs_rejected(self):
        target = torch.zeros(1, 2, 2, dtype=torch.long)
        probs = torch.full((1, 6, 2, 2), 0.2, dtype=torch.float64)
        with pytest.raises(ValidationError):
            dice_heavy(probs, target, CFG)

    def test_range(self, rng):
        for _ in range(20):
            logits, target = random_case(rng)
            loss = dice_heavy(torch.softmax(logits, dim=1), target, CFG)
            assert 0.0 <= loss.item() <= 1.0


class TestWceWeights:
    def test_uniform_frequencies(self):
        w = wce_weights(ClassStats(counts=np.array([10, 10, 10, 10])))
        assert torch.allclose(w, torch.ones(4, dtype=torch.float64))

    def test_spec_two_class_example(self):
        w = wce_weights(ClassStats(counts=np.array([80, 20])))
        assert w[0].item() == pytest.approx(2 / 3, abs=1e-12)
        assert w[1].item() == pytest.approx(4 / 3, abs=1e-12)

    def test_monotone_decreasing_in_frequency(self):
        w = wce_weights(STATS6)
        counts = STATS6.counts
        for a in range(6):
            for b in range(6):
                if counts[a] > counts[b]:
                    assert w[a] < w[b]

    def test_absent_class_error_mentions_floor(self):
        with pytest.raises(DataError, match="floor"):
            wce_weights(ClassStats(counts=np.array([5, 0, 3])))
        floored = ClassStats(counts=np.array([5, 0, 3])).floored(1)
        assert wce_weights(floored).shape == (3,)


class TestBlv:
    def test_sigma_zero_is_bitwise_identity(self, rng):
        logits, _ = random_case(rng)
        out = blv_perturb(logits, STATS6, sigma=0.0)
        assert out is logits

    def test_eval_mode_identity(self, rng):
        logits, _ = random_case(rng)
        assert blv_perturb(logits, STATS6, 0.5, training=False) is logits

    def test_spec_scale_example(self):
        scales = rarity_noise_scales(ClassStats(counts=np.array([9, 1])))
        assert scales[0].item() == pytest.approx(math.log(10 / 9) / math.log(10), abs=1e-12)
        assert scales[1].item() == 1.0

    def test_rarest_class_scale_is_one(self):
        scales = rarity_noise_scales(STATS6)
        assert scales[np.argmin(STATS6.counts)].item() == 1.0
        assert (scales <= 1.0).all() and (scales > 0.0).all()

    def test_seeded_determinism(self, rng):
        logits, _ = random_case(rng)
        a = blv_perturb(logits, STATS6, 0.5, rng=torch.Generator().manual_seed(3))
        b = blv_perturb(logits, STATS6, 0.5, rng=torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_frozen_noise_formula(self, rng):
        logits, _ = random_case(rng)
        noise = torch.randn_like(logits)
        out = blv_perturb(logits, STATS6, 0.7, noise=noise)
        scales = rarity_noise_scales(STATS6).view(1, -1, 1, 1)
        assert torch.allclose(out, logits + scales * 0.7 * noise)


class TestLa:
    def test_tau_zero_is_bitwise_identity(self, rng):
        logits, _ = random_case(rng)
        assert la_adjust(logits, STATS6, 0.0) is logits

    def test_uniform_priors_keep_argmax(self, rng):
        logits, _ = random_case(rng, batch=3)
        uniform = ClassStats(counts=np.full(6, 50))
        adjusted = la_adjust(logits, uniform, 0.8)
        assert torch.equal(adjusted.argmax(dim=1), logits.argmax(dim=1))

    def test_spec_numeric_example(self):
        z = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
        stats = ClassStats(counts=np.array([90, 10]))
        out = la_adjust(z, stats, 0.5)
        assert out[0, 0, 0, 0].item() == pytest.approx(0.5 * math.log(0.9), abs=1e-9)
        assert out[0, 1, 0, 0].item() == pytest.approx(0.5 * math.log(0.1), abs=1e-9)


class TestCompositeLosses:
    def test_spatial_gamma_endpoints(self, rng):
        logits, target = random_case(rng)
        pure_dice = spatial_loss(logits, target, STATS6, LossConfig(gamma=1.0), training=False)
        assert pure_dice.item() == pytest.approx(
            dice_heavy(torch.softmax(logits, dim=1), target, CFG).item()
        )
        with pytest.warns(UserWarning):
            cfg0 = LossConfig(gamma=0.0, sigma=0.0)
        uniform = ClassStats(counts=np.full(6, 100))
        plain = spatial_loss(logits, target, uniform, cfg0, training=False)
        assert plain.item() == pytest.approx(pixel_mean_ce(logits, target).item(), abs=1e-12)

    def test_convex_combination_arithmetic(self):
        # gamma = 0.7 with Dice 0.2 and WCE 1.0 -> 0.44
        assert 0.7 * 0.2 + 0.3 * 1.0 == pytest.approx(0.44)

    def test_main_tau_gamma_zero_is_plain_ce(self, rng):
        logits, target = random_case(rng)
        with pytest.warns(UserWarning):
            cfg = LossConfig(tau=0.0, gamma=0.0)
        out = main_loss(logits, target, STATS6, cfg)
        assert out.item() == pytest.approx(pixel_mean_ce(logits, target).item(), abs=1e-12)

    def test_main_gamma_one_ignores_la(self, rng):
        logits, target = random_case(rng)
        a = main_loss(logits, target, STATS6, LossConfig(gamma=1.0, tau=0.5))
        b = main_loss(logits, target, STATS6, LossConfig(gamma=1.0, tau=2.0))
        assert a.item() == b.item()

    def test_overall_endpoints_exact(self, rng):
        logits_m, target = random_case(rng)
        logits_s, _ = random_case(rng)
        for alpha, want in ((0.0, "main"), (1.0, "spatial")):
            cfg = LossConfig(alpha=alpha, sigma=0.0)
            total = overall_loss(logits_m, logits_s, target, STATS6, cfg, training=False)
            main = main_loss(logits_m, target, STATS6, cfg)
            spatial = spatial_loss(logits_s, target, STATS6, cfg, training=False)
            expected = main if want == "main" else spatial
            assert total.item() == expected.item()  # exact endpoint reproduction

    def test_overall_midpoint_arithmetic(self):
        assert (1 - 0.5) * 0.4 + 0.5 * 0.8 == pytest.approx(0.6)

    def test_all_losses_finite_nonnegative(self, rng):
        for _ in range(10):
            logits_m, target = random_case(rng, batch=2)
            logits_s, _ = random_case(rng, batch=2)
            total = overall_loss(
                logits_m, logits_s, target, STATS6, CFG,
                rng=torch.Generator().manual_seed(0),
            )
            assert torch.isfinite(total) and total.item() >= 0.0

    def test_spatial_loss_seeded_bitwise_reproducible(self, rng):
        logits, target = random_case(rng)
        a = spatial_loss(logits, target, STATS6, CFG, rng=torch.Generator().manual_seed(9))
        b = spatial_loss(logits, target, STATS6, CFG, rng=torch.Generator().manual_seed(9))
        assert a.item() == b.item()


class TestGradients:
    """Central finite differences vs autograd, float64, 4x4 grids."""

    def check(self, fn, logits, tol=1e-4):
        leaf = logits.clone().requires_grad_(True)
        fn(leaf).backward()
        analytic = leaf.grad.clone()
        numeric = central_diff(fn, logits.clone())
        assert rel_err(analytic, numeric) < tol

    def test_dice_heavy_gradient(self, rng):
        logits, target = random_case(rng)
        self.check(lambda z: dice_heavy(torch.softmax(z, dim=1), target, CFG), logits)

    def test_wce_blv_frozen_noise_gradient(self, rng):
        logits, target = random_case(rng)
        noise = torch.randn(logits.shape, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(4))
        w = wce_weights(STATS6)

        def fn(z):
            return pixel_mean_ce(blv_perturb(z, STATS6, 0.5, noise=noise), target, weights=w)

        self.check(fn, logits)

    def test_la_ce_gradient(self, rng):
        logits, target = random_case(rng)
        self.check(lambda z: pixel_mean_ce(la_adjust(z, STATS6, 0.5), target), logits)

    def test_overall_loss_gradient(self, rng):
        logits_m, target = random_case(rng)
        logits_s, _ = random_case(rng)
        noise = torch.randn(logits_s.shape, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(5))

        def fn_main(z):
            return overall_loss(z, logits_s, target, STATS6, CFG, noise=noise)

        def fn_spatial(z):
            return overall_loss(logits_m, z, target, STATS6, CFG, noise=noise)

        self.check(fn_main, logits_m)
        self.check(fn_spatial, logits_s)

    def test_overall_gradient_scales_with_alpha(self, rng):
        logits_m, target = random_case(rng)
        logits_s, _ = random_case(rng)
        grads = {}
        for alpha in (0.2, 0.4):
            cfg = LossConfig(alpha=alpha, sigma=0.0)
            leaf = logits_m.clone().requires_grad_(True)
            overall_loss(leaf, logits_s, target, STATS6, cfg, training=False).backward()
            grads[alpha] = leaf.grad.clone()
        ratio = grads[0.2].norm() / grads[0.4].norm()
        assert ratio.item() == pytest.approx(0.8 / 0.6, rel=1e-6)


class TestLossConfig:
    def test_gamma_warning(self):
        with pytest.warns(UserWarning, match="0.5"):
            LossConfig(gamma=0.3)

    def test_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(alpha=1.5)
        with pytest.raises(ConfigError):
            LossConfig(tau=-0.1)
        with pytest.raises(ConfigError):
            LossConfig(dice_smoothing=0.0)
