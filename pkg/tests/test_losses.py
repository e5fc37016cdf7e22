"""Loss suite tests.

skimage.metrics.structural_similarity is the SSIM oracle, configured to
the same windowed-Gaussian, population-covariance formulation.
"""

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from dfdeblur import autodiff as ad
from dfdeblur import losses


def t(arr, grad=False):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def rand_pair(seed, shape=(1, 3, 24, 24)):
    rng = np.random.default_rng(seed)
    return rng.random(shape), rng.random(shape)


class TestIdentitiesAtZeroError:
    """Values when pred == gt, with default weights."""

    def setup_method(self):
        rng = np.random.default_rng(21)
        self.img = rng.random((1, 3, 16, 16))
        self.depth = rng.random((1, 1, 16, 16))

    def test_l1_is_exactly_zero(self):
        assert losses.l1_depth(t(self.depth), t(self.depth)).data.item() == 0.0

    def test_grad_smooth_is_exactly_zero(self):
        assert losses.grad_smooth(t(self.depth), t(self.depth)).data.item() == 0.0

    def test_charbonnier_floor_is_eps(self):
        # mean of sqrt(0 + eps^2) = eps up to one float64 rounding.
        got = losses.charbonnier(t(self.img), t(self.img)).data.item()
        assert got == pytest.approx(1e-3, abs=5e-19)

    def test_ssim_loss_is_exactly_zero(self):
        assert losses.ssim_loss(t(self.img), t(self.img)).data.item() == 0.0

    def test_total_is_lambda_times_eps(self):
        total, parts = losses.total_loss(
            t(self.depth), t(self.depth), t(self.img), t(self.img),
            variant=losses.DEFAULT_VARIANT)
        assert total.data.item() == pytest.approx(1e-5, abs=5e-21)
        assert parts["depth"] == 0.0
        assert parts["deblur_ssim"] == 0.0


class TestClosedForms:
    def test_grad_smooth_ramp_case(self):
        # Residual 0.5*(i+j) on a 4x4 grid: 24 first differences of 0.5
        # over 16 pixels = 0.75, exact in binary arithmetic.
        i, j = np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij")
        pred = t((0.5 * (i + j)).reshape(1, 1, 4, 4))
        gt = t(np.zeros((1, 1, 4, 4)))
        assert losses.grad_smooth(pred, gt).data.item() == 0.75

    def test_l1_constant_offset(self):
        gt = t(np.full((1, 1, 3, 3), 1.0))
        pred = t(np.full((1, 1, 3, 3), 1.25))
        assert losses.l1_depth(pred, gt).data.item() == 0.25

    def test_charbonnier_hand_value(self):
        pred = t(np.full((1, 1, 2, 2), 0.5))
        gt = t(np.full((1, 1, 2, 2), 0.2))
        want = np.sqrt(0.3 ** 2 + 1e-6)
        assert losses.charbonnier(pred, gt).data.item() == pytest.approx(want, rel=1e-15)

    def test_depth_loss_combines_with_mu(self):
        pred, gt0 = rand_pair(22, (1, 1, 8, 8))
        w = losses.LossWeights()
        got = losses.depth_loss(t(pred), t(gt0), w).data.item()
        want = (losses.l1_depth(t(pred), t(gt0)).data.item()
                + w.mu * losses.grad_smooth(t(pred), t(gt0)).data.item())
        assert got == pytest.approx(want, rel=1e-15)


class TestSsim:
    @pytest.mark.parametrize("seed", [30, 31, 32])
    def test_matches_skimage(self, seed):
        pred, gt0 = rand_pair(seed, (1, 1, 32, 32))
        got = 1.0 - losses.ssim_loss(t(pred), t(gt0)).data.item()
        want = structural_similarity(
            pred[0, 0], gt0[0, 0], data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert got == pytest.approx(want, abs=1e-12)

    def test_multichannel_averages_planes(self):
        pred, gt0 = rand_pair(33)
        got = 1.0 - losses.ssim_loss(t(pred), t(gt0)).data.item()
        per_plane = [structural_similarity(
            pred[0, c], gt0[0, c], data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
            for c in range(3)]
        assert got == pytest.approx(np.mean(per_plane), abs=1e-12)

    def test_window_too_large_rejected(self):
        small = np.zeros((1, 1, 8, 8))
        with pytest.raises(ad.ShapeMismatchError):
            losses.ssim_loss(t(small), t(small))

    def test_loss_decreases_as_images_align(self):
        rng = np.random.default_rng(34)
        gt0 = rng.random((1, 1, 24, 24))
        noisy = gt0 + 0.2 * rng.standard_normal(gt0.shape)
        closer = gt0 + 0.05 * rng.standard_normal(gt0.shape)
        assert (losses.ssim_loss(t(closer), t(gt0)).data.item()
                < losses.ssim_loss(t(noisy), t(gt0)).data.item())


class TestVariants:
    def test_registry_order_and_default(self):
        assert losses.VARIANTS == (
            "l1+charb", "l1+l1", "l1grad+charb", "l1+charb_ssim", "l1grad+charb_ssim")
        assert losses.DEFAULT_VARIANT == "l1grad+charb_ssim"

    def test_unknown_variant_rejected(self):
        dp, dg = (t(a) for a in rand_pair(40, (1, 1, 16, 16)))
        ip, ig = (t(a) for a in rand_pair(41, (1, 3, 16, 16)))
        with pytest.raises(ValueError):
            losses.total_loss(dp, dg, ip, ig, variant="l2+mse")

    @pytest.mark.parametrize("variant", losses.VARIANTS)
    def test_parts_sum_to_total(self, variant):
        dp, dg = (t(a) for a in rand_pair(42, (1, 1, 16, 16)))
        ip, ig = (t(a) for a in rand_pair(43, (1, 3, 16, 16)))
        w = losses.LossWeights()
        total, parts = losses.total_loss(dp, dg, ip, ig, variant=variant, weights=w)
        assert parts["total"] == total.data.item()
        want = parts["depth"] + w.lam * parts["deblur"]
        assert total.data.item() == pytest.approx(want, rel=1e-12)

    def test_variant_structure(self):
        dp, dg = (t(a) for a in rand_pair(44, (1, 1, 16, 16)))
        ip, ig = (t(a) for a in rand_pair(45, (1, 3, 16, 16)))
        _, plain = losses.total_loss(dp, dg, ip, ig, variant="l1+l1")
        assert "deblur_l1" in plain and "deblur_ssim" not in plain
        assert "depth_grad" not in plain
        _, full = losses.total_loss(dp, dg, ip, ig, variant="l1grad+charb_ssim")
        assert {"depth_l1", "depth_grad", "deblur_charb", "deblur_ssim"} <= full.keys()

    def test_default_weights(self):
        w = losses.LossWeights()
        assert (w.mu, w.psi, w.lam, w.eps_charb) == (1e-3, 4.0, 1e-2, 1e-3)


class TestGradientFlow:
    def test_total_loss_reaches_all_inputs(self):
        dp = t(np.random.default_rng(50).random((1, 1, 16, 16)), grad=True)
        ip = t(np.random.default_rng(51).random((1, 3, 16, 16)), grad=True)
        dg, ig = t(np.zeros((1, 1, 16, 16))), t(np.zeros((1, 3, 16, 16)))
        total, _ = losses.total_loss(dp, dg, ip, ig, variant=losses.DEFAULT_VARIANT)
        ad.backward(total)
        assert dp.grad is not None and np.any(dp.grad != 0)
        assert ip.grad is not None and np.any(ip.grad != 0)
