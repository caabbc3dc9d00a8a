import numpy as np
import pytest
from scipy import ndimage

from emsr.atw import AtwKernel, atw_decompose, atw_details, edge_stack, min_size, smooth, smooth_adjoint
from emsr.autodiff import ShapeError, Tensor, backward, mean, mul, sum_

from fdcheck import RTOL, max_rel_error, numerical_grad


def dilated_kernel_2d(level):
    """Dense 2-D kernel with 2**(level-1)-1 zeros between the B3 taps."""
    base = np.array([1.0, 4, 6, 4, 1]) / 16
    step = 2 ** (level - 1)
    k = np.zeros(4 * step + 1)
    k[::step] = base
    return np.outer(k, k)


def reference_details(img, scales):
    c = img
    out = []
    for j in range(1, scales + 1):
        nxt = ndimage.convolve(c, dilated_kernel_2d(j), mode="mirror")
        out.append(c - nxt)
        c = nxt
    return out, c


class TestKernel:
    def test_default_taps(self):
        np.testing.assert_array_equal(AtwKernel().base, np.array([1, 4, 6, 4, 1]) / 16)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            AtwKernel(np.array([0.5, 0.3, 0.2]))

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="sum to 1"):
            AtwKernel(np.array([1.0, 2.0, 1.0]))

    def test_rejects_even_length(self):
        with pytest.raises(ValueError):
            AtwKernel(np.array([0.5, 0.5]))


class TestDecompose:
    def test_impulse_center(self):
        img = np.zeros((9, 9))
        img[4, 4] = 1.0
        w1 = atw_decompose(img, 1).details[0]
        assert w1[4, 4] == pytest.approx(1 - (6 / 16) ** 2, abs=1e-15)
        assert w1[4, 4] == 0.859375

    def test_constant_image_has_zero_details(self):
        # dyadic constants survive the tap products without rounding
        for w in atw_decompose(np.full((20, 17), 0.625), 3).details:
            assert np.all(w == 0.0)
        for w in atw_decompose(np.full((20, 17), 0.37), 3).details:
            assert np.max(np.abs(w)) <= 1e-15

    @pytest.mark.parametrize("scales", [1, 2, 3, 4])
    def test_perfect_reconstruction(self, scales):
        rng = np.random.default_rng(scales)
        img = rng.uniform(size=(33, 40))
        pyr = atw_decompose(img, scales)
        assert pyr.scales == scales
        assert np.max(np.abs(pyr.reconstruct() - img)) <= 1e-10
        assert all(w.shape == img.shape for w in pyr.details + pyr.smoothings)

    def test_matches_dense_dilated_convolution(self):
        img = np.random.default_rng(3).uniform(size=(40, 36))
        pyr = atw_decompose(img, 3)
        ref, coarse = reference_details(img, 3)
        for got, want in zip(pyr.details, ref):
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)
        np.testing.assert_allclose(pyr.smoothings[-1], coarse, rtol=0, atol=1e-13)

    def test_shift_covariance_interior(self):
        rng = np.random.default_rng(4)
        big = rng.uniform(size=(80, 80))
        a = atw_decompose(big[0:64, 0:64], 3).details
        b = atw_decompose(big[5:69, 3:67], 3).details
        # support radius of three levels is 2+4+8 = 14 pixels
        m = 14
        for wa, wb in zip(a, b):
            np.testing.assert_array_equal(wa[5 + m : 64 - m, 3 + m : 64 - m], wb[m : 59 - m, m : 61 - m])

    @pytest.mark.parametrize("seed", range(10))
    def test_noise_energy_decreases_with_scale(self, seed):
        noise = np.random.default_rng(seed).normal(size=(128, 128))
        v = [w.var() for w in atw_decompose(noise, 3).details]
        assert v[0] > v[1] > v[2]

    def test_too_small_names_minimum(self):
        with pytest.raises(ShapeError, match="minimum side is 9"):
            atw_decompose(np.zeros((8, 20)), 3)

    def test_minimum_size_accepted(self):
        for j in (1, 2, 3, 4):
            n = min_size(j)
            pyr = atw_decompose(np.random.default_rng(j).uniform(size=(n, n)), j)
            assert np.max(np.abs(pyr.reconstruct() - pyr.smoothings[0])) <= 1e-12

    def test_zero_scales(self):
        with pytest.raises(ValueError):
            atw_decompose(np.zeros((16, 16)), 0)

    def test_non_finite_rejected(self):
        img = np.zeros((16, 16))
        img[3, 3] = np.nan
        with pytest.raises(ValueError):
            atw_decompose(img, 1)


class TestAdjointAndGradient:
    @pytest.mark.parametrize("level", [1, 2, 3])
    def test_smooth_adjoint_dot_product(self, level):
        rng = np.random.default_rng(level)
        u, v = rng.normal(size=(2, 11, 13)), rng.normal(size=(2, 11, 13))
        k = AtwKernel()
        lhs = np.vdot(smooth(u, level, k), v)
        rhs = np.vdot(u, smooth_adjoint(v, level, k))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_atw_details_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(size=(2, 1, 10, 9)), requires_grad=True)
        r = Tensor(rng.uniform(-1, 1, size=(2, 3, 10, 9)))

        def loss():
            return sum_(mul(atw_details(x, 3), r))

        backward(loss())
        num = numerical_grad(lambda: loss().item(), x.data)
        assert max_rel_error(x.grad, num) <= RTOL


class TestEdgeStack:
    def test_channel_count_and_order(self):
        rng = np.random.default_rng(6)
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        out = edge_stack(a, b, 3).data
        assert out.shape == (1, 6, 16, 16)
        for j, w in enumerate(atw_decompose(a, 3).details):
            np.testing.assert_array_equal(out[0, j], w)
        for j, w in enumerate(atw_decompose(b, 3).details):
            np.testing.assert_array_equal(out[0, 3 + j], w)

    def test_identical_inputs(self):
        a = np.random.default_rng(7).uniform(size=(12, 12))
        out = edge_stack(a, a, 2).data
        np.testing.assert_array_equal(out[:, :2], out[:, 2:])

    def test_zero_recon(self):
        a = np.random.default_rng(8).uniform(size=(12, 12))
        assert np.all(edge_stack(a, np.zeros((12, 12)), 2).data[:, 2:] == 0)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            edge_stack(np.zeros((12, 12)), np.zeros((12, 13)), 2)

    def test_gradient_flows_into_tensor_input(self):
        rc = Tensor(np.random.default_rng(9).uniform(size=(1, 1, 9, 9)), requires_grad=True)
        backward(mean(edge_stack(np.zeros((9, 9)), rc, 2)))
        assert rc.grad is not None and np.any(rc.grad != 0)
