import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camfield.render import (composite_full, composite_full_bwd,
                             composite_full_fwd, composite_static,
                             composite_static_bwd, composite_static_fwd,
                             expected_depth_bwd, expected_depth_fwd,
                             ray_near_far, sample_quadrature, transmittance)

BLACK = np.zeros(3)


def rand_samples(rng, B=4, K=16):
    sigma = rng.uniform(0.0, 4.0, (B, K))
    rgb = rng.uniform(0.0, 1.0, (B, K, 3))
    delta = rng.uniform(0.02, 0.3, (B, K))
    return sigma, rgb, delta


class TestSampleQuadrature:
    def test_uniform_midpoints(self):
        u, delta = sample_quadrature(0.0, 1.0, 4)
        np.testing.assert_allclose(u[0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(delta[0], [0.25] * 4)

    def test_stratified_deterministic_per_seed(self):
        u1, _ = sample_quadrature(0.0, 2.0, 8, stratified=True,
                                  rng=np.random.default_rng(42))
        u2, _ = sample_quadrature(0.0, 2.0, 8, stratified=True,
                                  rng=np.random.default_rng(42))
        np.testing.assert_array_equal(u1, u2)

    def test_stratified_inside_bins(self):
        rng = np.random.default_rng(1)
        K = 10
        for _ in range(100):                    # 1000 depths in total
            u, _ = sample_quadrature(1.0, 3.0, K, stratified=True, rng=rng)
            width = 2.0 / K
            bins = np.floor((u[0] - 1.0) / width)
            np.testing.assert_array_equal(bins, np.arange(K))

    def test_zero_samples_rejected(self):
        with pytest.raises(ValueError):
            sample_quadrature(0.0, 1.0, 0)

    def test_positive_deltas(self):
        rng = np.random.default_rng(2)
        u, delta = sample_quadrature(0.5, 4.0, 32, stratified=True, rng=rng)
        assert np.all(delta > 0)


class TestTransmittance:
    def test_vacuum(self):
        T = transmittance(np.zeros((1, 5)), np.full((1, 5), 0.1))
        np.testing.assert_array_equal(T, np.ones((1, 5)))

    def test_hand_value(self):
        sigma = np.ones((1, 3))
        delta = np.full((1, 3), 0.1)
        T = transmittance(sigma, delta)
        assert T[0, 0] == 1.0
        np.testing.assert_allclose(T[0, 1], math.exp(-0.1), atol=1e-15)
        np.testing.assert_allclose(T[0, 2], math.exp(-0.2), atol=1e-15)

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError):
            transmittance(np.array([[-0.1]]), np.array([[0.1]]))

    @given(st.integers(1, 30), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_non_increasing_in_unit_interval(self, K, seed):
        rng = np.random.default_rng(seed)
        sigma = rng.uniform(0, 10, (2, K))
        delta = rng.uniform(0.01, 0.5, (2, K))
        T = transmittance(sigma, delta)
        assert np.all(T[:, 0] == 1.0)
        assert np.all(np.diff(T, axis=1) <= 1e-15)
        assert np.all((T > 0) & (T <= 1.0))


class TestCompositeStatic:
    def test_vacuum_black(self):
        C = composite_static(np.zeros((1, 8)), np.full((1, 8, 3), 0.5),
                             np.full((1, 8), 0.1), BLACK)
        np.testing.assert_array_equal(C, np.zeros((1, 3)))

    def test_opaque_first_sample(self):
        rng = np.random.default_rng(3)
        sigma, rgb, delta = rand_samples(rng, B=1, K=6)
        sigma[0, 0] = 50.0 / delta[0, 0]        # sigma * delta = 50
        C = composite_static(sigma, rgb, delta, np.ones(3))
        np.testing.assert_allclose(C[0], rgb[0, 0], atol=1e-20)

    def test_homogeneous_slab_closed_form(self):
        # quadrature covering exactly the slab: telescoping is exact
        albedo = np.array([0.3, 0.6, 0.9])
        K = 256
        u, delta = sample_quadrature(0.0, 1.0, K)
        sigma = np.full((1, K), 2.0)
        rgb = np.tile(albedo, (1, K, 1))
        C = composite_static(sigma, rgb, delta, BLACK)
        expected = albedo * (1.0 - math.exp(-2.0))
        rel = np.abs(C[0] - expected) / expected
        assert rel.max() < 1e-3

    def test_background_weighted_by_residual(self):
        sigma = np.full((1, 4), 1.0)
        delta = np.full((1, 4), 0.25)
        rgb = np.zeros((1, 4, 3))
        bg = np.array([1.0, 0.5, 0.25])
        C = composite_static(sigma, rgb, delta, bg)
        np.testing.assert_allclose(C[0], math.exp(-1.0) * bg, atol=1e-12)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        sigma, rgb, delta = rand_samples(rng, B=3, K=10)
        bg = np.array([0.2, 0.4, 0.6])
        dC = rng.normal(size=(3, 3))
        _, cache = composite_static_fwd(sigma, rgb, delta, bg)
        ds, dr = composite_static_bwd(cache, dC)
        h = 1e-6

        def val(s, r):
            return float(np.sum(composite_static(s, r, delta, bg) * dC))

        for probe in ((0, 0), (1, 5), (2, 9)):
            s2 = sigma.copy()
            s2[probe] += h
            f1 = val(s2, rgb)
            s2[probe] -= 2 * h
            f0 = val(s2, rgb)
            fd = (f1 - f0) / (2 * h)
            assert abs(fd - ds[probe]) <= 1e-4 * max(1.0, abs(fd))
        r2 = rgb.copy()
        r2[1, 3, 2] += h
        f1 = val(sigma, r2)
        r2[1, 3, 2] -= 2 * h
        f0 = val(sigma, r2)
        fd = (f1 - f0) / (2 * h)
        assert abs(fd - dr[1, 3, 2]) <= 1e-4 * max(1.0, abs(fd))


class TestEnergyConservation:
    def test_exact_partition_of_unity(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            sigma = rng.uniform(0, 20, (100, 24))
            delta = rng.uniform(0.001, 0.5, (100, 24))
            T = transmittance(sigma, delta)
            alpha = 1.0 - np.exp(-sigma * delta)
            T_end = np.exp(-np.sum(sigma * delta, axis=1))
            total = np.sum(T * alpha, axis=1) + T_end
            assert np.max(np.abs(total - 1.0)) < 1e-12


class TestCompositeFull:
    def test_blend_one_equals_static(self):
        rng = np.random.default_rng(6)
        sigma_s, rgb_s, delta = rand_samples(rng)
        sigma_d, rgb_d, _ = rand_samples(rng)
        bg = rng.uniform(0, 1, 3)
        C_full = composite_full(sigma_s, rgb_s, sigma_d, rgb_d,
                                np.ones_like(sigma_s), delta, bg)
        C_s = composite_static(sigma_s, rgb_s, delta, bg)
        np.testing.assert_allclose(C_full, C_s, atol=1e-12)

    def test_blend_zero_equals_dynamic(self):
        rng = np.random.default_rng(7)
        sigma_s, rgb_s, delta = rand_samples(rng)
        sigma_d, rgb_d, _ = rand_samples(rng)
        bg = rng.uniform(0, 1, 3)
        C_full = composite_full(sigma_s, rgb_s, sigma_d, rgb_d,
                                np.zeros_like(sigma_s), delta, bg)
        C_d = composite_static(sigma_d, rgb_d, delta, bg)
        np.testing.assert_allclose(C_full, C_d, atol=1e-12)

    def test_two_sample_hand_computation(self):
        # b = 0.5 everywhere, every sigma*delta = 0.1; scalar arithmetic
        delta = np.array([[0.1, 0.1]])
        sigma_s = np.array([[1.0, 1.0]])
        sigma_d = np.array([[1.0, 1.0]])
        c_s = np.array([[[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]]])
        c_d = np.array([[[0.1, 0.5, 0.7], [0.6, 0.3, 0.2]]])
        b = np.array([[0.5, 0.5]])
        bg = np.array([0.25, 0.5, 0.75])
        got = composite_full(sigma_s, c_s, sigma_d, c_d, b, delta, bg)[0]

        alpha = 1.0 - math.exp(-0.1)
        emit1 = alpha * 0.5 * c_d[0, 0] + alpha * 0.5 * c_s[0, 0]
        emit2 = alpha * 0.5 * c_d[0, 1] + alpha * 0.5 * c_s[0, 1]
        T1 = 1.0
        T2 = math.exp(-0.1)                     # blended density 1.0, delta 0.1
        T_end = math.exp(-0.2)
        expected = T1 * emit1 + T2 * emit2 + T_end * bg
        np.testing.assert_allclose(got, expected, atol=1e-15)

    def test_blend_outside_unit_interval_rejected(self):
        rng = np.random.default_rng(8)
        sigma_s, rgb_s, delta = rand_samples(rng, B=1, K=4)
        with pytest.raises(ValueError):
            composite_full(sigma_s, rgb_s, sigma_s, rgb_s,
                           np.full((1, 4), 1.5), delta, BLACK)

    def test_blending_identities_random_sweep(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            sigma_s, rgb_s, delta = rand_samples(rng, B=2, K=8)
            sigma_d, rgb_d, _ = rand_samples(rng, B=2, K=8)
            bg = rng.uniform(0, 1, 3)
            one = composite_full(sigma_s, rgb_s, sigma_d, rgb_d,
                                 np.ones((2, 8)), delta, bg)
            np.testing.assert_allclose(
                one, composite_static(sigma_s, rgb_s, delta, bg), atol=1e-12)
            zero = composite_full(sigma_s, rgb_s, sigma_d, rgb_d,
                                  np.zeros((2, 8)), delta, bg)
            np.testing.assert_allclose(
                zero, composite_static(sigma_d, rgb_d, delta, bg), atol=1e-12)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(10)
        sigma_s, rgb_s, delta = rand_samples(rng, B=2, K=8)
        sigma_d, rgb_d, _ = rand_samples(rng, B=2, K=8)
        blend = rng.uniform(0.05, 0.95, (2, 8))
        bg = rng.uniform(0, 1, 3)
        dC = rng.normal(size=(2, 3))
        _, cache = composite_full_fwd(sigma_s, rgb_s, sigma_d, rgb_d, blend,
                                      delta, bg)
        dss, drs, dsd, drd, db = composite_full_bwd(cache, dC)

        def val(ss=sigma_s, rs=rgb_s, sd=sigma_d, rd=rgb_d, b=blend):
            return float(np.sum(composite_full(ss, rs, sd, rd, b, delta, bg) * dC))

        h = 1e-6
        checks = [
            (sigma_s, dss, (0, 3), "ss"), (sigma_d, dsd, (1, 6), "sd"),
            (blend, db, (0, 0), "b"), (rgb_s, drs, (1, 2, 1), "rs"),
            (rgb_d, drd, (0, 7, 2), "rd"),
        ]
        for arr, grad, probe, name in checks:
            a2 = arr.copy()
            a2[probe] += h
            f1 = val(*[a2 if arr is x else x
                       for x in (sigma_s, rgb_s, sigma_d, rgb_d, blend)])
            a2[probe] -= 2 * h
            f0 = val(*[a2 if arr is x else x
                       for x in (sigma_s, rgb_s, sigma_d, rgb_d, blend)])
            fd = (f1 - f0) / (2 * h)
            assert abs(fd - grad[probe]) <= 1e-4 * max(1.0, abs(fd)), name


class TestExpectedDepth:
    def test_empty_ray_gives_far(self):
        depth, _ = expected_depth_fwd(np.zeros((1, 6)), np.full((1, 6), 0.2),
                                      np.linspace(0.1, 1.1, 6)[None],
                                      np.array([7.0]))
        np.testing.assert_allclose(depth, [7.0])

    def test_opaque_front_gives_first_depth(self):
        u = np.linspace(0.5, 2.0, 8)[None]
        sigma = np.zeros((1, 8))
        sigma[0, 0] = 1e4
        depth, _ = expected_depth_fwd(sigma, np.full((1, 8), 0.2), u,
                                      np.array([9.0]))
        np.testing.assert_allclose(depth, u[0, 0], atol=1e-9)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        sigma = rng.uniform(0, 3, (2, 8))
        delta = rng.uniform(0.05, 0.2, (2, 8))
        u = np.sort(rng.uniform(0.1, 3.0, (2, 8)), axis=1)
        far = np.array([4.0, 5.0])
        dd = rng.normal(size=2)
        _, cache = expected_depth_fwd(sigma, delta, u, far)
        ds = expected_depth_bwd(cache, dd)
        h = 1e-6
        for probe in ((0, 2), (1, 7)):
            s2 = sigma.copy()
            s2[probe] += h
            f1 = float(np.sum(expected_depth_fwd(s2, delta, u, far)[0] * dd))
            s2[probe] -= 2 * h
            f0 = float(np.sum(expected_depth_fwd(s2, delta, u, far)[0] * dd))
            fd = (f1 - f0) / (2 * h)
            assert abs(fd - ds[probe]) <= 1e-5 * max(1.0, abs(fd))


class TestRayNearFar:
    def test_padding(self):
        near, far = ray_near_far(np.array([[0.0, 0.0, -5.0]]),
                                 np.array([[0.0, 0.0, 1.0]]),
                                 np.array([-1.0, -1.0, -1.0]),
                                 np.array([1.0, 1.0, 1.0]))
        # raw interval [4, 6], padded 5% each side
        np.testing.assert_allclose(near, [4.0 - 0.1])
        np.testing.assert_allclose(far, [6.0 + 0.1])
