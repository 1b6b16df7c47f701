"""Volume rendering: transmittance, compositing, pixel/total losses."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrvm_nerf import autodiff as ad
from mrvm_nerf.renderer import composite, nerf_loss, total_loss, transmittance


def random_ray_batch(rng, R=4, N=8):
    sigmas = rng.random((R, N)) * 5.0
    colors = rng.random((R, N, 3))
    deltas = rng.random((R, N)) * 0.2 + 0.01
    return sigmas, colors, deltas


class TestTransmittance:
    def test_first_sample_unity(self):
        T, _ = transmittance(np.array([[1.0, 2.0, 3.0]]),
                             np.array([[0.1, 0.1, 0.1]]))
        assert T.value[0, 0] == 1.0

    def test_closed_form_two_samples(self):
        s = np.array([[2.0, 5.0]])
        d = np.array([[0.3, 0.1]])
        T, T_res = transmittance(s, d)
        np.testing.assert_allclose(T.value, [[1.0, np.exp(-0.6)]])
        np.testing.assert_allclose(T_res.value, [np.exp(-1.1)])

    def test_monotone_nonincreasing(self):
        rng = np.random.default_rng(0)
        s, _, d = random_ray_batch(rng)
        T, T_res = transmittance(s, d)
        assert np.all(np.diff(T.value, axis=1) <= 0)
        assert np.all(T_res.value <= T.value[:, -1])

    def test_zero_density_identity(self):
        T, T_res = transmittance(np.zeros((2, 5)), np.full((2, 5), 0.3))
        np.testing.assert_array_equal(T.value, 1.0)
        np.testing.assert_array_equal(T_res.value, 1.0)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            transmittance(np.array([[-1.0, 2.0]]), np.array([[0.1, 0.1]]))

    def test_negative_delta_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            transmittance(np.array([[1.0, 2.0]]), np.array([[0.1, -0.1]]))


class TestComposite:
    def test_weights_plus_residual_sum_to_one(self):
        rng = np.random.default_rng(1)
        s, c, d = random_ray_batch(rng, R=16, N=32)
        _, w, T_res = composite(s, c, d, np.ones(3))
        np.testing.assert_allclose(w.value.sum(axis=1) + T_res.value, 1.0,
                                   atol=1e-12)

    def test_zero_density_renders_background_exactly(self):
        bg = np.array([0.2, 0.5, 0.9])
        rgb, w, T_res = composite(np.zeros((3, 6)),
                                  np.random.default_rng(2).random((3, 6, 3)),
                                  np.full((3, 6), 0.25), bg)
        np.testing.assert_array_equal(w.value, 0.0)
        np.testing.assert_array_equal(T_res.value, 1.0)
        np.testing.assert_array_equal(rgb.value,
                                      np.broadcast_to(bg, (3, 3)))

    def test_opaque_first_sample_dominates(self):
        # a very dense first sample makes the ray its color
        s = np.array([[1e4, 1.0]])
        c = np.array([[[0.3, 0.6, 0.9], [1.0, 0.0, 0.0]]])
        d = np.array([[0.5, 0.5]])
        rgb, _, _ = composite(s, c, d, np.ones(3))
        np.testing.assert_allclose(rgb.value[0], [0.3, 0.6, 0.9], atol=1e-12)

    def test_single_sample_alpha_blend(self):
        # rgb = alpha * color + (1 - alpha) * background with one sample
        sigma, delta = 2.0, 0.3
        alpha = 1.0 - np.exp(-sigma * delta)
        color = np.array([0.1, 0.4, 0.7])
        bg = np.array([1.0, 1.0, 1.0])
        rgb, _, _ = composite(np.array([[sigma]]), color[None, None, :],
                              np.array([[delta]]), bg)
        np.testing.assert_allclose(rgb.value[0], alpha * color + (1 - alpha) * bg,
                                   atol=1e-12)

    def test_rgb_in_hull_of_colors_and_background(self):
        rng = np.random.default_rng(3)
        s, c, d = random_ray_batch(rng, R=32)
        rgb, _, _ = composite(s, c, d, np.ones(3))
        assert np.all(rgb.value >= c.min(axis=(1,)).min() - 1e-12)
        assert np.all(rgb.value <= 1.0 + 1e-12)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        c = rng.random((2, 4, 3))
        ps = ad.ParamStore(5)
        ps.add("raw_s", (2, 4), init="normal", scale=0.5)
        ps.add("raw_d", (2, 4), init="normal", scale=0.5)

        def loss(lv):
            s = ad.softplus(lv["raw_s"])
            d = ad.softplus(lv["raw_d"])
            rgb, _, _ = composite(s, ad.Tensor(c), d, np.ones(3))
            return (rgb * rgb).sum()

        assert ad.finite_diff_check(loss, ps, 1e-5) <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 12))
    def test_partition_of_unity_property(self, seed, R, N):
        rng = np.random.default_rng(seed)
        s = rng.random((R, N)) * 10
        d = rng.random((R, N)) * 0.5
        c = rng.random((R, N, 3))
        _, w, T_res = composite(s, c, d, np.zeros(3))
        np.testing.assert_allclose(w.value.sum(axis=1) + T_res.value, 1.0,
                                   atol=1e-10)


class TestLosses:
    def test_nerf_loss_zero_at_truth(self):
        gt = np.random.default_rng(6).random((5, 3))
        per_ray = nerf_loss(ad.Tensor(gt.copy()), ad.Tensor(gt.copy()), gt)
        np.testing.assert_array_equal(per_ray.value, 0.0)

    def test_nerf_loss_sums_both_branches(self):
        gt = np.zeros((1, 3))
        c = ad.Tensor(np.array([[0.1, 0.2, 0.2]]))
        f = ad.Tensor(np.array([[0.3, 0.0, 0.4]]))
        per_ray = nerf_loss(c, f, gt)
        want = (0.01 + 0.04 + 0.04) + (0.09 + 0.16)
        assert per_ray.value[0] == pytest.approx(want)

    def test_total_loss_weighted_mean(self):
        nerf = ad.Tensor(np.array([1.0, 3.0]))
        mrvm = ad.Tensor(np.array([2.0, 4.0]))
        assert total_loss(nerf, mrvm, 0.1).value == pytest.approx(
            np.mean([1.0 + 0.2, 3.0 + 0.4]))

    def test_total_loss_without_alignment_term(self):
        nerf = ad.Tensor(np.array([1.0, 3.0]))
        assert total_loss(nerf, None, 0.1).value == pytest.approx(2.0)
        assert total_loss(nerf, ad.Tensor(np.array([5.0, 5.0])),
                          0.0).value == pytest.approx(2.0)

    def test_total_loss_gradient_scales_with_lambda(self):
        nerf = ad.Tensor(np.array([1.0, 3.0]), requires_grad=True)
        mrvm = ad.Tensor(np.array([2.0, 4.0]), requires_grad=True)
        ad.backward(total_loss(nerf, mrvm, 0.25))
        np.testing.assert_allclose(nerf.grad, 0.5)
        np.testing.assert_allclose(mrvm.grad, 0.125)
