import numpy as np
import pytest
import torch

from residual_reid.errors import ConfigurationError, ShapeError
from residual_reid.recon import (VAE, LatentDistribution, ReconstructionOutput, VaeConfig,
                                 ae_reconstruct, bilateral_filter_reconstruct, kl_loss, mse_loss,
                                 reconstruction_loss, reparameterize)

from oracles import central_difference, gaussian_blur, relative_error


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


@pytest.fixture(scope="module")
def small_vae():
    torch.manual_seed(0)
    return VAE(VaeConfig(latent_channels=4, encoder_widths=(8, 8, 16, 16))).eval()


class TestShapes:
    @pytest.mark.parametrize("size,latent", [(64, 4), (256, 16), (32, 2)])
    def test_latent_spatial_size(self, small_vae, size, latent):
        lat = small_vae.encode(torch.zeros(1, 3, size, size))
        assert lat.mean.shape == (1, 4, latent, latent)
        assert lat.log_variance.shape == lat.mean.shape

    def test_non_divisible_input_rejected(self, small_vae):
        with pytest.raises(ShapeError, match="divisible by 16"):
            small_vae.encode(torch.zeros(1, 3, 60, 60))

    def test_decode_shape_and_roundtrip(self, small_vae):
        z = torch.randn(2, 4, 4, 4)
        assert small_vae.decode(z).shape == (2, 3, 64, 64)
        x = torch.rand(2, 3, 48, 80) * 2 - 1
        assert small_vae(x).generated.shape == x.shape

    def test_decode_rejects_wrong_latent(self, small_vae):
        with pytest.raises(ShapeError):
            small_vae.decode(torch.zeros(1, 5, 4, 4))

    def test_outputs_saturate_into_unit_range(self, small_vae):
        gen = torch.Generator().manual_seed(0)
        for _ in range(100):
            z = torch.randn(1, 4, 4, 4, generator=gen) * 10
            out = small_vae.decode(z)
            assert out.min() >= -1 and out.max() <= 1

    def test_no_transposed_convolutions(self):
        vae = VAE()
        assert not any(isinstance(m, torch.nn.ConvTranspose2d) for m in vae.modules())
        assert sum(isinstance(m, torch.nn.MaxPool2d) for m in vae.modules()) == 4


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        lat = LatentDistribution(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3))
        assert torch.equal(reparameterize(lat, noise=torch.zeros(1, 2, 3, 3)), lat.mean)

    def test_unit_variance_adds_noise(self):
        mu = torch.randn(1, 2, 3, 3)
        eps = torch.randn(1, 2, 3, 3)
        out = reparameterize(LatentDistribution(mu, torch.zeros_like(mu)), noise=eps)
        assert torch.equal(out, mu + eps)

    def test_monte_carlo_moments(self):
        lat = LatentDistribution(torch.zeros(10_000, dtype=torch.float64),
                                 torch.zeros(10_000, dtype=torch.float64))
        theta = reparameterize(lat, generator=torch.Generator().manual_seed(1)).numpy()
        assert abs(theta.mean()) < 0.05
        assert abs(theta.var() - 1) < 0.1

    def test_fixed_noise_forward_bit_reproducible(self, small_vae):
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        a = small_vae(x, generator=torch.Generator().manual_seed(5)).generated
        b = small_vae(x, generator=torch.Generator().manual_seed(5)).generated
        assert torch.equal(a, b)


class TestLosses:
    def test_mse_values(self):
        x = torch.rand(2, 3, 8, 8)
        assert mse_loss(x, x).item() == 0
        assert mse_loss(torch.ones(3, 4, 4), torch.zeros(3, 4, 4)).item() == 1.0
        y = torch.rand(2, 3, 8, 8)
        assert mse_loss(x, y).item() == mse_loss(y, x).item()

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))

    def test_kl_standard_normal_is_zero(self):
        lat = LatentDistribution(torch.zeros(2, 4, 3, 3), torch.zeros(2, 4, 3, 3))
        assert kl_loss(lat).item() == 0

    def test_kl_single_element(self):
        lat = LatentDistribution(t64([[[[1.0]]]]), t64([[[[0.0]]]]))
        assert kl_loss(lat).item() == 0.5

    def test_kl_normalizer_is_spatial_only(self):
        # 1 channel vs 3 channels with identical per-element terms -> 3x larger
        one = LatentDistribution(torch.ones(1, 1, 2, 2, dtype=torch.float64), torch.zeros(1, 1, 2, 2, dtype=torch.float64))
        three = LatentDistribution(torch.ones(1, 3, 2, 2, dtype=torch.float64), torch.zeros(1, 3, 2, 2, dtype=torch.float64))
        assert kl_loss(one).item() == pytest.approx(4 * 1 / (2 * 4))
        assert kl_loss(three).item() == pytest.approx(3 * kl_loss(one).item())

    def test_kl_non_negative_scan(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            mu = rng.normal(size=(1, 2, 2, 2)) * 3
            lv = rng.normal(size=(1, 2, 2, 2)) * 3
            terms = mu ** 2 + np.exp(lv) - lv - 1
            assert (terms >= 0).all()
            assert kl_loss(LatentDistribution(t64(mu), t64(lv))).item() >= 0

    def test_reconstruction_loss_affine_in_lambda(self):
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        g = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        lat = LatentDistribution(torch.randn(2, 4, 1, 1, dtype=torch.float64),
                                 torch.randn(2, 4, 1, 1, dtype=torch.float64))
        out = ReconstructionOutput(g, lat, lat.mean)
        mse, kl = mse_loss(x, g).item(), kl_loss(lat).item()
        for lam in (0.0, 1e-3, 1.0):
            assert reconstruction_loss(x, out, lam).item() == mse + lam * kl
        assert reconstruction_loss(x, out, 0.0).item() == mse

    def test_lambda_two_hand_value(self):
        # mse = (1 + 0) / 2 = 0.5; kl = (0.25 + 0.25) / (2 * 1) = 0.25
        x = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
        g = t64([[[[1.0, 0.0]]]])
        lat = LatentDistribution(t64([[[[0.5]], [[0.5]]]]), torch.zeros(1, 2, 1, 1, dtype=torch.float64))
        out = ReconstructionOutput(g, lat, lat.mean)
        assert reconstruction_loss(x, out, 2.0).item() == 1.0

    def test_default_kl_weight(self):
        assert VaeConfig().kl_weight == 1e-3

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigurationError):
            VaeConfig(kl_weight=-1)


class TestGradients:
    def test_mse_gradient(self):
        rng = np.random.default_rng(0)
        a, b0 = rng.normal(size=5), rng.normal(size=5)
        b = t64(b0).requires_grad_(True)
        mse_loss(t64(a), b).backward()
        fd = central_difference(lambda v: mse_loss(t64(a), t64(v)).item(), b0)
        assert relative_error(b.grad.numpy(), fd) < 1e-4

    def test_kl_gradients(self):
        rng = np.random.default_rng(1)
        mu0 = rng.normal(size=(1, 5, 1, 1))
        lv0 = rng.normal(size=(1, 5, 1, 1))
        mu = t64(mu0).requires_grad_(True)
        lv = t64(lv0).requires_grad_(True)
        kl_loss(LatentDistribution(mu, lv)).backward()
        fd_mu = central_difference(lambda m: kl_loss(LatentDistribution(t64(m), t64(lv0))).item(), mu0)
        fd_lv = central_difference(lambda v: kl_loss(LatentDistribution(t64(mu0), t64(v))).item(), lv0)
        assert relative_error(mu.grad.numpy(), fd_mu) < 1e-4
        assert relative_error(lv.grad.numpy(), fd_lv) < 1e-4


class TestAutoEncoderVariant:
    def test_shape(self, small_vae):
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        assert ae_reconstruct(x, small_vae).shape == x.shape

    def test_matches_vae_with_zero_noise(self, small_vae):
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        lat = small_vae.encode(x)
        vae_out = small_vae(x, noise=torch.zeros_like(lat.mean)).generated
        assert torch.equal(ae_reconstruct(x, small_vae), vae_out)


class TestBilateral:
    def test_constant_image_unchanged(self):
        img = np.full((3, 12, 12), 0.3)
        np.testing.assert_allclose(bilateral_filter_reconstruct(img, 1.5, 0.1), img, atol=1e-15)

    def test_large_range_sigma_is_gaussian(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, size=(3, 16, 16))
        out = bilateral_filter_reconstruct(img, 1.2, 1e4)
        ref = gaussian_blur(img, 1.2, radius=4)
        assert np.abs(out - ref).max() < 1e-3

    def test_edges_preserved_better_than_gaussian(self):
        img = np.zeros((3, 16, 16))
        img[:, :, 8:] = 1.0
        bf = bilateral_filter_reconstruct(img, 2.0, 0.1)
        gb = gaussian_blur(img, 2.0, radius=6)
        assert np.abs(bf - img).max() < np.abs(gb - img).max()
        assert bf.shape == img.shape

    @pytest.mark.parametrize("s,r", [(0, 1), (1, 0), (-1, 1)])
    def test_non_positive_sigma(self, s, r):
        with pytest.raises(ConfigurationError):
            bilateral_filter_reconstruct(np.zeros((3, 4, 4)), s, r)
