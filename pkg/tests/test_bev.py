import numpy as np
import pytest

from camfield.bev import (BevFeature, BevVolume, lift, sample,
                          sample_vjp, sample_with_cache, toy_encode,
                          visible_mask)
from camfield.scene import Primitive, Scene
from conftest import make_camera


def empty_scene(cams=None):
    return Scene(static_primitives=[], dynamic_primitives=[],
                 bounds_min=[-4.0, -4.0, 0.0], bounds_max=[4.0, 4.0, 4.0],
                 background=[0.0, 0.0, 0.0], timestamps=[0],
                 agents=cams or {})


def box_scene(z0=1.0, z1=2.0):
    box = Primitive(shape="box", density=10.0, albedo=[0.6, 0.3, 0.1],
                    center=[0.0, 0.0, (z0 + z1) / 2], size=[8.0, 8.0, z1 - z0])
    return Scene(static_primitives=[box], dynamic_primitives=[],
                 bounds_min=[-4.0, -4.0, 0.0], bounds_max=[4.0, 4.0, 4.0],
                 background=[0.0, 0.0, 0.0], timestamps=[0])


def wide_cam(cam_id, position, target):
    return make_camera(cam_id, "agent0", position, target, focal=10.0,
                       width=32, height=32)


class TestToyEncode:
    def test_empty_scene_lifts_to_zero(self):
        cam = wide_cam("c", (-6.0, 0.0, 2.0), (0.0, 0.0, 2.0))
        feat = toy_encode(empty_scene(), [cam], 0, channels=8, dims=(8, 8, 8))
        vol = lift(feat)
        assert np.all(feat.heights < 0)
        assert np.max(np.abs(vol.values)) < 1e-3

    def test_box_slab_heights(self):
        scene = box_scene(z0=1.0, z1=2.0)
        cam = wide_cam("c", (-7.0, 0.0, 1.5), (0.0, 0.0, 1.5))
        feat = toy_encode(scene, [cam], 0, channels=8, dims=(8, 8, 8))
        # z voxel centers at 0.25, 0.75, ..., 3.75; the slab [1, 2] covers
        # voxels 2 and 3
        logits = feat.heights[0]                     # (Z, X, Y)
        visible = logits.max(axis=(1, 2)) > 0
        assert visible[2] and visible[3]
        assert not visible[0] and not visible[6] and not visible[7]

    def test_disjoint_frustum_union_is_elementwise_max(self):
        scene = box_scene()
        # two narrow cameras staring at opposite halves of the slab
        cam_a = make_camera("a", "agent0", (-2.0, -7.0, 1.5), (-2.0, 0.0, 1.5),
                            focal=120.0, width=32, height=32)
        cam_b = make_camera("b", "agent1", (2.0, -7.0, 1.5), (2.0, 0.0, 1.5),
                            focal=120.0, width=32, height=32)
        fa = toy_encode(scene, [cam_a], 0, channels=8, dims=(16, 16, 8))
        fb = toy_encode(scene, [cam_b], 0, channels=8, dims=(16, 16, 8))
        fu = toy_encode(scene, [cam_a, cam_b], 0, channels=8, dims=(16, 16, 8))
        # coverage gates: visible-and-occupied voxels of the union equal the
        # elementwise max of the single-agent gates
        ga = fa.heights > 0
        gb = fb.heights > 0
        gu = fu.heights > 0
        assert np.any(ga) and np.any(gb)
        assert not np.any(ga & gb)                   # frustums disjoint
        np.testing.assert_array_equal(gu, ga | gb)

    def test_deterministic(self):
        scene = box_scene()
        cam = wide_cam("c", (-7.0, 0.0, 1.5), (0.0, 0.0, 1.5))
        f1 = toy_encode(scene, [cam], 0, dims=(8, 8, 8))
        f2 = toy_encode(scene, [cam], 0, dims=(8, 8, 8))
        np.testing.assert_array_equal(f1.values, f2.values)
        np.testing.assert_array_equal(f1.heights, f2.heights)


class TestLift:
    def rand_feature(self, seed=0, C=3, Z=4, X=5, Y=6):
        rng = np.random.default_rng(seed)
        return BevFeature(values=rng.normal(size=(C, X, Y)),
                          heights=rng.normal(size=(1, Z, X, Y)),
                          extent_min=np.zeros(3), extent_max=np.ones(3),
                          timestamp=0)

    def test_zero_logits_halve_features(self):
        f = self.rand_feature()
        f.heights[:] = 0.0
        vol = lift(f)
        np.testing.assert_allclose(
            vol.values, 0.5 * np.broadcast_to(f.values[:, None], vol.values.shape),
            atol=1e-15)

    def test_zero_features_annihilate(self):
        f = self.rand_feature()
        f.values[:] = 0.0
        assert not lift(f).values.any()

    def test_saturated_logits(self):
        f = self.rand_feature(C=2, Z=3)
        f.heights[0, 0] = 20.0
        f.heights[0, 1:] = -20.0
        vol = lift(f)
        err_on = np.abs(vol.values[:, 0] - f.values)
        err_off = np.abs(vol.values[:, 1:])
        assert err_on.max() < 1e-8
        assert err_off.max() < 1e-8

    def test_magnitude_never_exceeds_features(self):
        f = self.rand_feature(seed=4)
        vol = lift(f)
        bound = np.abs(f.values)[:, None, :, :] + 1e-15
        assert np.all(np.abs(vol.values) <= bound)
        # sigmoid > 0 preserves the sign pattern
        signs = np.sign(f.values)[:, None, :, :]
        nz = vol.values != 0
        assert np.all(np.sign(vol.values)[nz] == np.broadcast_to(signs, vol.values.shape)[nz])

    def test_dim_mismatch_rejected(self):
        f = self.rand_feature()
        f.heights = f.heights[:, :, :4, :]
        with pytest.raises(ValueError):
            lift(f)


def grid_volume(values, extent_min=(0, 0, 0), extent_max=(1, 1, 1)):
    return BevVolume(values=np.asarray(values, dtype=np.float64),
                     extent_min=np.asarray(extent_min, dtype=np.float64),
                     extent_max=np.asarray(extent_max, dtype=np.float64),
                     timestamp=0)


class TestSample:
    def test_voxel_center_returns_voxel_value(self):
        rng = np.random.default_rng(3)
        vol = grid_volume(rng.normal(size=(4, 3, 5, 6)),
                          extent_max=(5.0, 6.0, 3.0))
        # voxel (x=2, y=1, z=0) center in world coordinates
        x = np.array([[(2 + 0.5) * 1.0, (1 + 0.5) * 1.0, (0 + 0.5) * 1.0]])
        got = sample(vol, x)
        np.testing.assert_allclose(got[0], vol.values[:, 0, 2, 1], atol=1e-12)

    def test_constant_volume_everywhere(self):
        vol = grid_volume(np.full((2, 4, 4, 4), 1.7))
        rng = np.random.default_rng(4)
        x = rng.uniform(0.05, 0.95, (20, 3))
        np.testing.assert_allclose(sample(vol, x), 1.7, atol=1e-12)

    def test_linear_field_reproduced(self):
        # volume linear in world x between the first and last voxel centers
        X, Y, Z = 8, 4, 4
        centers = (np.arange(X) + 0.5) / X
        vals = np.tile(centers[None, None, :, None], (1, Z, 1, Y))
        vol = grid_volume(vals)
        xs = np.linspace(centers[0], centers[-1], 9)
        pts = np.stack([xs, np.full(9, 0.5), np.full(9, 0.5)], axis=1)
        np.testing.assert_allclose(sample(vol, pts)[:, 0], xs, atol=1e-12)

    def test_outside_extent_is_zero(self):
        vol = grid_volume(np.ones((2, 4, 4, 4)))
        x = np.array([[1.5, 0.5, 0.5], [-0.1, 0.5, 0.5]])
        np.testing.assert_array_equal(sample(vol, x), np.zeros((2, 2)))

    def test_continuous_across_interior_boundaries(self):
        rng = np.random.default_rng(5)
        vol = grid_volume(rng.normal(size=(3, 6, 6, 6)))
        # cross the plane between voxel centers along y
        for y_plane in (2.0 / 6, 3.0 / 6):
            a = sample(vol, np.array([[0.5, y_plane - 1e-10, 0.4]]))
            b = sample(vol, np.array([[0.5, y_plane + 1e-10, 0.4]]))
            np.testing.assert_allclose(a, b, atol=1e-7)

    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(6)
        vol = grid_volume(rng.normal(size=(3, 6, 6, 6)))
        x = rng.uniform(0.15, 0.85, (10, 3))
        up = rng.normal(size=(10, 3))
        _, cache = sample_with_cache(vol, x)
        dx = sample_vjp(vol, x, up, cache=cache)
        h = 1e-7
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fd = np.sum((sample(vol, x + e) - sample(vol, x - e)) * up, axis=1) / (2 * h)
            np.testing.assert_allclose(dx[:, a], fd, atol=1e-4)


class TestVisibleMask:
    def test_behind_camera_invisible(self):
        cam = make_camera("c", "a", (0.0, 0.0, 1.0), (0.0, 5.0, 1.0))
        pts = np.array([[0.0, -3.0, 1.0], [0.0, 3.0, 1.0]])
        vis = visible_mask([cam], pts)
        assert not vis[0] and vis[1]
