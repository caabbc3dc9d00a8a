import math

import numpy as np
import pytest
from scipy import ndimage

from emsr.metrics import MetricError, SsimParams, _ring_labels, dft2, evaluate, frc, max_rings, psnr, ssim
from emsr.phantom import PhantomConfig, generate_phantom

from oracles import dft_direct, frc_direct, psnr_direct, ssim_direct


# ---------------------------------------------------------------- SSIM


class TestSsim:
    def test_self_is_one(self):
        x = np.random.default_rng(0).uniform(size=(32, 32))
        assert ssim(x, x) == 1.0

    def test_constants_closed_form(self):
        a, b, c1 = 0.3, 0.7, 1e-4
        want = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(np.full((8, 8), a), np.full((8, 8), b)) == pytest.approx(want, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(64, 64))
        y = np.clip(x + rng.normal(0, 0.1, size=x.shape), 0, 1)
        assert abs(ssim(x, y) - ssim_direct(x, y)) <= 1e-12

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
            assert ssim(a, b) == ssim(b, a)
            assert -1 <= ssim(a, b) <= 1
            assert -1 <= ssim(a, 1 - a) <= 1

    def test_windowed_is_mean_of_tiles(self):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(size=(32, 24)), rng.uniform(size=(32, 24))
        tiles = [ssim_direct(x[i : i + 8, j : j + 8], y[i : i + 8, j : j + 8]) for i in range(0, 32, 8) for j in range(0, 24, 8)]
        assert ssim(x, y, SsimParams(mode="windowed")) == pytest.approx(np.mean(tiles), abs=1e-12)

    def test_constants_scale_with_range(self):
        p = SsimParams(L=255)
        assert p.c1 == pytest.approx((0.01 * 255) ** 2) and p.c2 == pytest.approx((0.03 * 255) ** 2)

    def test_extent_mismatch(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------- PSNR


class TestPsnr:
    def test_identical_is_inf(self):
        x = np.random.default_rng(0).uniform(size=(8, 8))
        assert psnr(x, x) == math.inf

    def test_closed_form(self):
        x = np.zeros((10, 10))
        assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_direct(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(size=(64, 64)), rng.uniform(size=(64, 64))
        assert abs(psnr(x, y) - psnr_direct(x, y)) <= 1e-12

    def test_offset_invariant(self):
        rng = np.random.default_rng(3)
        x, y = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        assert psnr(x + 0.25, y + 0.25) == pytest.approx(psnr(x, y), abs=1e-10)

    def test_error_scaling_decreases(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(16, 16))
        e = rng.normal(0, 0.05, size=x.shape)
        assert psnr(x, x + 1.5 * e) < psnr(x, x + e)

    def test_extent_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))


# ---------------------------------------------------------------- DFT


class TestDft:
    def test_brute_force_8x8(self):
        x = np.random.default_rng(0).normal(size=(8, 8))
        np.testing.assert_allclose(dft2(x), dft_direct(x), rtol=0, atol=1e-10)

    def test_non_power_of_two(self):
        x = np.random.default_rng(1).normal(size=(6, 5))
        np.testing.assert_allclose(dft2(x), dft_direct(x), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("shape", [(8, 8), (64, 64), (15, 22)])
    def test_parseval(self, shape):
        x = np.random.default_rng(2).normal(size=shape)
        lhs = np.sum(x**2)
        rhs = np.sum(np.abs(dft2(x)) ** 2) / x.size
        assert abs(lhs - rhs) <= 1e-9 * lhs

    def test_constant_in_dc(self):
        f = dft2(np.full((8, 8), 2.0))
        assert f[0, 0] == pytest.approx(128.0)
        f[0, 0] = 0
        assert np.max(np.abs(f)) <= 1e-12


# ---------------------------------------------------------------- FRC


class TestFrc:
    def test_self_is_one(self):
        x = np.random.default_rng(0).uniform(size=(64, 64))
        c = frc(x, x).correlation
        assert np.max(np.abs(c - 1)) <= 1e-12

    def test_negation(self):
        x = np.random.default_rng(1).uniform(size=(64, 64))
        assert np.max(np.abs(frc(x, -x).correlation + 1)) <= 1e-12

    @pytest.mark.parametrize("n, rings", [(64, 16), (33, 8), (16, 4)])
    def test_matches_direct(self, n, rings):
        rng = np.random.default_rng(n)
        x = rng.uniform(size=(n, n))
        y = x + rng.normal(0, 0.3, size=x.shape)
        got = frc(x, y, rings).correlation
        np.testing.assert_allclose(got, frc_direct(x, y, rings), rtol=0, atol=1e-12)

    def test_gain_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
        np.testing.assert_allclose(frc(x, 3.7 * y).correlation, frc(x, y).correlation, rtol=0, atol=1e-12)

    def test_ring0_equal_means(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
        b += a.mean() - b.mean()
        # unit-width rings: ring 0 holds only the DC bin
        c = frc(a, b, 16).correlation
        assert c[0] == pytest.approx(1.0, abs=1e-12)
        assert np.max(np.abs(c)) <= 1 + 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_independent_noise_near_zero(self, seed):
        # for independent white noise each ring value has std ~ 1/sqrt(bins);
        # the fixed 0.2 bound is only meaningful once a ring holds >= 100 bins
        labels, _ = _ring_labels(128, 32)
        bins = np.bincount(labels[labels >= 0])
        rng = np.random.default_rng(seed)
        c = frc(rng.normal(size=(128, 128)), rng.normal(size=(128, 128)), 32).correlation
        populated = bins >= 100
        assert populated[4:].all()
        assert np.all(np.abs(c[populated]) <= 0.2)
        assert np.all(np.abs(c[1:]) * np.sqrt(bins[1:]) <= 4.0)

    def test_lowpass_decays(self):
        x = generate_phantom(PhantomConfig(size=96, seed=5))
        c = frc(x, ndimage.gaussian_filter(x, 2.0)).correlation
        assert c[-1] < c[1]

    def test_too_many_rings(self):
        with pytest.raises(MetricError, match=f"max is {max_rings(8)}"):
            frc(np.ones((8, 8)), np.ones((8, 8)), 100)

    def test_non_square(self):
        with pytest.raises(MetricError):
            frc(np.zeros((8, 9)), np.zeros((8, 9)))

    def test_default_rings(self):
        assert len(frc(np.ones((64, 64)), np.ones((64, 64))).correlation) == 16

    def test_ring_populations(self):
        # 2N rings exceed the radial resolution of an N-pixel spectrum
        assert 1 <= max_rings(32) < 32
        frc(np.ones((32, 32)), np.ones((32, 32)), max_rings(32))


def test_evaluate_report():
    rng = np.random.default_rng(9)
    x = rng.uniform(size=(32, 32))
    r = evaluate(x, x)
    assert r.ssim == 1.0 and r.psnr == math.inf and r.mean_frc == pytest.approx(1.0)
    assert r.ssim_mode == "global"
